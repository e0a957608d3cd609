"""Generator implementations: a deterministic template stub and a tiny seq2seq model."""

from __future__ import annotations

import zlib
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..data import Example
from ..metrics import tokenize
from . import search
from .harness import DecodingConfig

# (low, high) per-candidate corruption rate for each decoding method.
DEFAULT_NOISE = {
    "beam": (0.05, 0.45),
    "diverse_beam": (0.02, 0.6),
    "top_k": (0.1, 0.6),
    "top_p": (0.08, 0.55),
}


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def junk_tokens(n: int = 24) -> list[str]:
    return [f"zq{i}" for i in range(n)]


class TemplateGenerator:
    """Emit noisy copies of a known reference.

    Each candidate gets its own corruption rate drawn from the method's range;
    tokens are replaced by junk words or dropped at that rate. Sources listed in
    ``memorized`` are corrupted less, which imitates a model scoring its own
    training data.
    """

    def __init__(self, references: Mapping[str, str], memorized: Iterable[str] = (),
                 noise: Mapping[str, tuple[float, float]] | None = None,
                 memorized_scale: float = 0.3, junk: Sequence[str] | None = None):
        self.references = dict(references)
        self.memorized = frozenset(memorized)
        self.noise = dict(DEFAULT_NOISE if noise is None else noise)
        self.memorized_scale = memorized_scale
        self.junk = list(junk or junk_tokens())

    def generate(self, source: str, config: DecodingConfig) -> list[str]:
        if source not in self.references:
            raise KeyError(f"no reference known for source {source[:40]!r}")
        ref = self.references[source].split()
        lo, hi = self.noise[config.method]
        if source in self.memorized:
            lo, hi = lo * self.memorized_scale, hi * self.memorized_scale
        rng = np.random.default_rng([_crc(source), _crc(config.method), config.seed or 0])
        out = []
        for _ in range(config.num_candidates):
            rate = rng.uniform(lo, hi)
            toks = []
            for tok in ref:
                u = rng.random()
                if u < rate:
                    toks.append(self.junk[rng.integers(len(self.junk))])
                elif u < 1.25 * rate:
                    continue
                else:
                    toks.append(tok)
            if not toks:
                toks = [self.junk[rng.integers(len(self.junk))]]
            out.append(" ".join(toks))
        return out


def template_factory(references: Mapping[str, str], **kwargs):
    """Factory for the half-split protocol: the stub memorizes the half it is given."""
    def make(examples: Sequence[Example]) -> TemplateGenerator:
        return TemplateGenerator(references, memorized=[e.source for e in examples], **kwargs)
    return make


PAD, UNK, BOS, EOS = 0, 1, 2, 3


class TinySeq2Seq(nn.Module):
    """GRU encoder-decoder with dot-product attention."""

    def __init__(self, vocab_size: int, dim: int = 64):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=PAD)
        self.encoder = nn.GRU(dim, dim, batch_first=True)
        self.decoder = nn.GRU(dim, dim, batch_first=True)
        self.out = nn.Linear(2 * dim, vocab_size)

    def encode(self, src):
        mem, h = self.encoder(self.embed(src))
        return mem, h, src != PAD

    def decode(self, prefixes, mem, h, src_mask):
        dec, _ = self.decoder(self.embed(prefixes), h)
        att = torch.einsum("btd,bsd->bts", dec, mem)
        att = att.masked_fill(~src_mask[:, None, :], float("-inf"))
        ctx = torch.einsum("bts,bsd->btd", torch.softmax(att, dim=-1), mem)
        return self.out(torch.cat([dec, ctx], dim=-1))


class Seq2SeqGenerator:
    def __init__(self, model: TinySeq2Seq, vocab: list[str], max_source_len: int = 128):
        self.model = model.eval()
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.max_source_len = max_source_len

    def _ids(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in tokenize(text)]

    @classmethod
    def fit(cls, examples: Sequence[Example], epochs: int = 30, dim: int = 64, lr: float = 3e-3,
            batch_size: int = 32, seed: int = 0) -> "Seq2SeqGenerator":
        words = sorted({t for e in examples for t in tokenize(e.source) + tokenize(e.target)})
        vocab = ["<pad>", "<unk>", "<s>", "</s>"] + words
        torch.manual_seed(seed)
        gen = cls(TinySeq2Seq(len(vocab), dim), vocab)
        model = gen.model.train()
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        data = [(gen._ids(e.source)[:gen.max_source_len] or [UNK], gen._ids(e.target) + [EOS])
                for e in examples]
        order_rng = np.random.default_rng(seed)
        for _ in range(epochs):
            for start in range(0, len(data), batch_size):
                batch = [data[i] for i in order_rng.permutation(len(data))[start:start + batch_size]]
                src = nn.utils.rnn.pad_sequence([torch.tensor(s) for s, _ in batch],
                                                batch_first=True, padding_value=PAD)
                tgt = nn.utils.rnn.pad_sequence([torch.tensor(t) for _, t in batch],
                                                batch_first=True, padding_value=PAD)
                inp = torch.cat([torch.full((len(batch), 1), BOS), tgt[:, :-1]], dim=1)
                mem, h, mask = model.encode(src)
                logits = model.decode(inp, mem, h, mask)
                loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1),
                                       ignore_index=PAD)
                opt.zero_grad()
                loss.backward()
                opt.step()
        gen.model.eval()
        return gen

    def _step_fn(self, source: str):
        src = torch.tensor([self._ids(source)[:self.max_source_len] or [UNK]])
        with torch.no_grad():
            mem, h, mask = self.model.encode(src)

        def step(prefixes):
            b = prefixes.shape[0]
            with torch.no_grad():
                logits = self.model.decode(prefixes, mem.expand(b, -1, -1),
                                           h.expand(-1, b, -1).contiguous(), mask.expand(b, -1))
            lp = torch.log_softmax(logits[:, -1], dim=-1)
            lp[:, [PAD, BOS]] = float("-inf")
            if prefixes.shape[1] == 1:
                lp[:, EOS] = float("-inf")
            return lp
        return step

    def generate(self, source: str, config: DecodingConfig) -> list[str]:
        step = self._step_fn(source)
        n = config.num_candidates
        if config.method == "beam":
            hyps = search.beam_search(step, BOS, EOS, config.width, config.max_length, n)
        elif config.method == "diverse_beam":
            hyps = search.diverse_beam_search(step, BOS, EOS, config.width, config.max_length,
                                              config.groups, config.diversity_penalty, n)
        else:
            g = torch.Generator().manual_seed((config.seed * 1_000_003 + _crc(source)) % 2**63)
            hyps = search.sample(step, BOS, EOS, n, config.max_length, g, config.temperature,
                                 top_k=config.k if config.method == "top_k" else None,
                                 top_p=config.p if config.method == "top_p" else None)
        # Beam variants can run short when many hypotheses end early.
        while len(hyps) < n:
            hyps.append(hyps[len(hyps) % max(len(hyps), 1)])
        return [" ".join(self.vocab[i] for i in h.tokens) for h in hyps[:n]]


def seq2seq_factory(**fit_kwargs):
    def make(examples: Sequence[Example]) -> Seq2SeqGenerator:
        return Seq2SeqGenerator.fit(examples, **fit_kwargs)
    return make
