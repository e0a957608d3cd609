"""ROUGE-1/2/L, BLEU and CIDEr-D, written against one shared tokenizer.

All values are stored as fractions (ROUGE and BLEU in [0, 1], CIDEr-D in
[0, 10]); reports multiply by ``DISPLAY_SCALE``.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from .data import ScoredPool
from .errors import DataError, TransferModeError

METRICS = ("rouge1", "rouge2", "rougeL", "bleu", "cider")
DISPLAY_SCALE = 100.0

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into its own tokens, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if n_cand == 0 or n_ref == 0 or overlap == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n(candidate: str, reference: str, n: int = 1) -> float:
    if n not in (1, 2):
        raise ValueError(f"rouge_n supports n in {{1, 2}}, got {n}")
    c = ngrams(tokenize(candidate), n)
    r = ngrams(tokenize(reference), n)
    overlap = sum((c & r).values())
    return _f1(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    c, r = tokenize(candidate), tokenize(reference)
    return _f1(lcs_length(c, r), len(c), len(r))


def _closest_ref_len(hyp_len: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda rl: (abs(rl - hyp_len), rl))


def _brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    if hyp_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def _clipped_counts(hyp: Sequence[str], refs: Sequence[Sequence[str]], max_order: int):
    matches, totals = [], []
    for n in range(1, max_order + 1):
        h = ngrams(hyp, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, n)
        matches.append(sum((h & max_ref).values()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def bleu(candidate: str, references: Sequence[str], max_order: int = 4) -> float:
    """Sentence BLEU with add-one smoothing for zero match counts at orders >= 2."""
    if isinstance(references, str):
        references = [references]
    if not references:
        raise ValueError("bleu needs at least one reference")
    hyp = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    matches, totals = _clipped_counts(hyp, refs, max_order)
    if not hyp or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if m == 0 and n >= 2:
            m, t = 1, t + 1
        log_p += math.log(m / t)
    bp = _brevity_penalty(len(hyp), _closest_ref_len(len(hyp), [len(r) for r in refs]))
    return bp * math.exp(log_p / max_order)


def corpus_bleu(candidates: Sequence[str], references: Sequence[Sequence[str]],
                max_order: int = 4) -> float:
    """Unsmoothed corpus BLEU: n-gram statistics summed over the corpus first."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    tot_m = [0] * max_order
    tot_t = [0] * max_order
    hyp_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if isinstance(refs, str):
            refs = [refs]
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        hyp = tokenize(cand)
        rt = [tokenize(r) for r in refs]
        m, t = _clipped_counts(hyp, rt, max_order)
        tot_m = [a + b for a, b in zip(tot_m, m)]
        tot_t = [a + b for a, b in zip(tot_t, t)]
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), [len(r) for r in rt])
    if min(tot_m) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(tot_m, tot_t)) / max_order
    return _brevity_penalty(hyp_len, ref_len) * math.exp(log_p)


class CiderD:
    """CIDEr-D with document frequencies taken from a fixed reference corpus.

    ``reference_sets`` holds one list of references per evaluated example; an
    n-gram's document frequency counts the examples whose references contain it.
    """

    def __init__(self, reference_sets: Sequence[Sequence[str]], n: int = 4, sigma: float = 6.0):
        if not reference_sets:
            raise ValueError("CIDEr needs a nonempty reference corpus")
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in reference_sets:
            if isinstance(refs, str):
                refs = [refs]
            seen = set()
            for r in refs:
                toks = tokenize(r)
                for k in range(1, n + 1):
                    seen.update(ngrams(toks, k))
            self.df.update(seen)
        self.log_n = math.log(float(len(reference_sets)))

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_n - math.log(max(1.0, self.df[g])))
                 for g, tf in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def score(self, candidate: str, references: Sequence[str]) -> float:
        if isinstance(references, str):
            references = [references]
        if not references:
            raise ValueError("CIDEr needs at least one reference per candidate")
        hyp = tokenize(candidate)
        hv, hn = self._vec(hyp)
        total = 0.0
        for ref in references:
            rt = tokenize(ref)
            rv, rn = self._vec(rt)
            delta = len(hyp) - len(rt)
            val = 0.0
            for k in range(self.n):
                if hn[k] == 0 or rn[k] == 0:
                    continue
                dot = sum(min(x, rv[k][g]) * rv[k][g] for g, x in hv[k].items() if g in rv[k])
                val += dot / (hn[k] * rn[k])
            val *= math.exp(-(delta ** 2) / (2 * self.sigma ** 2))
            total += val / self.n
        return 10.0 * total / len(references)


def cider(pairs: Sequence[tuple[str, Sequence[str]]]) -> list[float]:
    """Score each (candidate, references) pair; the references form the IDF corpus."""
    if not pairs:
        raise ValueError("CIDEr needs a nonempty corpus")
    scorer = CiderD([refs for _, refs in pairs])
    return [scorer.score(c, refs) for c, refs in pairs]


def metric_value(metric: str, candidate: str, reference: str, cider_scorer: CiderD | None = None) -> float:
    if metric == "rouge1":
        return rouge_n(candidate, reference, 1)
    if metric == "rouge2":
        return rouge_n(candidate, reference, 2)
    if metric == "rougeL":
        return rouge_l(candidate, reference)
    if metric == "bleu":
        return bleu(candidate, [reference])
    if metric == "cider":
        if cider_scorer is None:
            raise ValueError("cider scoring needs a reference corpus (pass cider_scorer)")
        return cider_scorer.score(candidate, [reference])
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def check_metrics(metrics: Iterable[str]) -> list[str]:
    metrics = list(metrics)
    if not metrics:
        raise ValueError("metric list is empty")
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ValueError(f"unknown metrics {bad}; expected a subset of {list(METRICS)}")
    return metrics


def score_pool(pool: ScoredPool, metrics: Sequence[str],
               cider_scorer: CiderD | None = None) -> ScoredPool:
    """Fill every candidate's score map for ``metrics`` (existing values are recomputed)."""
    metrics = check_metrics(metrics)
    if pool.transfer_mode:
        raise TransferModeError(
            f"pool {pool.example_id!r} has no reference target; supply references to score it")
    for cand in pool.candidates:
        scores = dict(cand.scores or {})
        for m in metrics:
            scores[m] = metric_value(m, cand.text, pool.target, cider_scorer)
        cand.scores = scores
    return pool


def score_pools(pools: Sequence[ScoredPool], metrics: Sequence[str]) -> list[ScoredPool]:
    """Score a whole split; CIDEr document frequencies come from this split's targets."""
    metrics = check_metrics(metrics)
    scorer = None
    if "cider" in metrics and pools:
        for p in pools:
            if p.transfer_mode:
                raise TransferModeError(f"pool {p.example_id!r} has no reference target")
        scorer = CiderD([[p.target] for p in pools])
    return [score_pool(p, metrics, scorer) for p in pools]


def oracle_select(pool: ScoredPool, metric: str) -> int:
    """Index of the best-scoring candidate; ties go to the lowest index."""
    if not pool.candidates:
        raise DataError(f"pool {pool.example_id!r} is empty")
    return int(np.argmax(pool.score_matrix([metric])[:, 0]))


def gain(new_value: float, base_value: float) -> float:
    """Percent improvement of ``new_value`` over ``base_value``."""
    if base_value <= 0:
        raise ValueError(f"gain needs a positive base value, got {base_value}")
    return 100.0 * (new_value - base_value) / base_value
