"""Decoding algorithms over an abstract next-token distribution.

Every routine takes ``step_fn(prefixes) -> log_probs`` where ``prefixes`` is a
``(B, t)`` LongTensor starting with BOS and the result is ``(B, V)``.
Returned hypotheses exclude BOS and EOS.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

StepFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool

    def score(self, length_penalty: float) -> float:
        length = len(self.tokens) + (1 if self.finished else 0)
        return self.logprob / (max(length, 1) ** length_penalty)


def _expand(step_fn, beams: list[Hypothesis], bos: int, chosen=(), diversity_penalty=0.0):
    prefixes = torch.tensor([[bos] + h.tokens for h in beams], dtype=torch.long)
    lp = step_fn(prefixes).to(torch.float64)
    base = torch.tensor([h.logprob for h in beams], dtype=torch.float64)[:, None]
    total = base + lp
    ranked = total
    if chosen and diversity_penalty:
        counts = torch.bincount(torch.tensor(list(chosen)), minlength=lp.shape[1])
        ranked = total - diversity_penalty * counts.to(torch.float64)[None, :]
    flat = ranked.reshape(-1)
    order = torch.sort(flat, descending=True, stable=True).indices
    vocab = lp.shape[1]
    return [(int(i) // vocab, int(i) % vocab, float(total.reshape(-1)[i])) for i in order]


def _beam_step(step_fn, beams, bos, eos, width, finished, chosen=(), diversity_penalty=0.0):
    """Advance one group of beams by one token; returns the surviving beams."""
    alive = []
    for rank, (b, tok, lp) in enumerate(_expand(step_fn, beams, bos, chosen, diversity_penalty)):
        if rank >= 2 * width or len(alive) >= width:
            break
        if tok == eos:
            if rank < width:
                finished.append(Hypothesis(list(beams[b].tokens), lp, True))
            continue
        alive.append(Hypothesis(beams[b].tokens + [tok], lp, False))
    return alive


def _finalize(finished, num_return, length_penalty):
    ranked = sorted(enumerate(finished), key=lambda p: (-p[1].score(length_penalty), p[0]))
    return [h for _, h in ranked[:num_return]]


def beam_search(step_fn: StepFn, bos: int, eos: int, beam_width: int, max_len: int,
                num_return: int | None = None, length_penalty: float = 1.0) -> list[Hypothesis]:
    num_return = beam_width if num_return is None else num_return
    if num_return > beam_width:
        raise ValueError("cannot return more hypotheses than the beam width")
    beams = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        beams = _beam_step(step_fn, beams, bos, eos, beam_width, finished)
        if not beams or len(finished) >= beam_width:
            break
    if len(finished) < beam_width:
        finished.extend(beams)
    return _finalize(finished, num_return, length_penalty)


def diverse_beam_search(step_fn: StepFn, bos: int, eos: int, beam_width: int, max_len: int,
                        groups: int, diversity_penalty: float = 1.0,
                        num_return: int | None = None,
                        length_penalty: float = 1.0) -> list[Hypothesis]:
    """Grouped beam search with a Hamming diversity penalty between groups.

    At each step, group ``g`` pays ``diversity_penalty`` for every time a token
    was already chosen at this step by groups ``0..g-1``.
    """
    if groups < 1 or beam_width % groups:
        raise ValueError(f"beam_width {beam_width} must be a positive multiple of groups {groups}")
    num_return = beam_width if num_return is None else num_return
    if num_return > beam_width:
        raise ValueError("cannot return more hypotheses than the beam width")
    width = beam_width // groups
    group_beams = [[Hypothesis([], 0.0, False)] for _ in range(groups)]
    group_done = [[] for _ in range(groups)]
    for _ in range(max_len):
        chosen: list[int] = []
        for g in range(groups):
            beams = group_beams[g]
            if not beams or len(group_done[g]) >= width:
                continue
            n_done = len(group_done[g])
            group_beams[g] = _beam_step(step_fn, beams, bos, eos, width, group_done[g],
                                        chosen, diversity_penalty)
            chosen.extend(h.tokens[-1] for h in group_beams[g])
            chosen.extend(eos for _ in group_done[g][n_done:])
        if all(not b or len(d) >= width for b, d in zip(group_beams, group_done)):
            break
    finished = []
    for beams, done in zip(group_beams, group_done):
        finished.extend(done if len(done) >= width else done + beams)
    return _finalize(finished, num_return, length_penalty)


def _filter_top_k(logits: torch.Tensor, k: int) -> torch.Tensor:
    k = min(k, logits.shape[-1])
    kth = torch.topk(logits, k, dim=-1).values[..., -1, None]
    return logits.masked_fill(logits < kth, float("-inf"))


def _filter_top_p(logits: torch.Tensor, p: float) -> torch.Tensor:
    sorted_logits, idx = torch.sort(logits, descending=True, stable=True, dim=-1)
    probs = torch.softmax(sorted_logits, dim=-1)
    # Keep the smallest prefix whose mass reaches p; the top token always survives.
    drop = (torch.cumsum(probs, dim=-1) - probs) >= p
    sorted_logits = sorted_logits.masked_fill(drop, float("-inf"))
    return torch.full_like(logits, float("-inf")).scatter(-1, idx, sorted_logits)


def sample(step_fn: StepFn, bos: int, eos: int, num_samples: int, max_len: int,
           generator: torch.Generator, temperature: float = 1.0,
           top_k: int | None = None, top_p: float | None = None) -> list[Hypothesis]:
    """Draw ``num_samples`` independent sequences with top-k and/or nucleus filtering."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    seqs = torch.full((num_samples, 1), bos, dtype=torch.long)
    logp = torch.zeros(num_samples, dtype=torch.float64)
    done = torch.zeros(num_samples, dtype=torch.bool)
    lengths = torch.full((num_samples,), max_len, dtype=torch.long)
    for t in range(max_len):
        lp = step_fn(seqs).to(torch.float64)
        logits = lp / temperature
        if top_k is not None:
            logits = _filter_top_k(logits, top_k)
        if top_p is not None:
            logits = _filter_top_p(logits, top_p)
        nxt = torch.multinomial(torch.softmax(logits, dim=-1), 1, generator=generator)[:, 0]
        nxt = torch.where(done, torch.full_like(nxt, eos), nxt)
        logp += torch.where(done, torch.zeros_like(logp), lp.gather(1, nxt[:, None])[:, 0])
        newly = (nxt == eos) & ~done
        lengths[newly] = t
        done |= nxt == eos
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        if bool(done.all()):
            break
    out = []
    for i in range(num_samples):
        n = int(lengths[i])
        out.append(Hypothesis(seqs[i, 1:1 + n].tolist(), float(logp[i]), bool(done[i])))
    return out
