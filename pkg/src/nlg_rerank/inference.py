"""Pairwise selection: one bubble pass, a round-robin analysis mode, and self-consistency."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .data import ScoredPool
from .encoder import confidence
from .errors import DataError

log = logging.getLogger(__name__)

TIE_RULE = "exact tie keeps the incumbent (slot a)"


class Comparator(Protocol):
    """Anything that scores ``(source, cand_a, cand_b)`` triples, one score per metric per slot."""

    def score_pairs(self, triples: Sequence[tuple[str, str, str]]) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ComparisonResult:
    index_a: int
    index_b: int
    margins: np.ndarray  # s_a - s_b per metric
    confidence: np.ndarray  # sigmoid(s_a - s_b) per metric
    winner: int

    def to_json(self) -> dict:
        return {"a": self.index_a, "b": self.index_b, "winner": self.winner,
                "margins": [float(x) for x in self.margins]}


def _aggregate(margins: np.ndarray, rule: str | int) -> float:
    if rule == "mean":
        return float(np.mean(margins))
    return float(margins[int(rule)])


def _result(s_a, s_b, ia, ib, rule) -> ComparisonResult:
    s_a, s_b = np.asarray(s_a, dtype=np.float64), np.asarray(s_b, dtype=np.float64)
    margins = s_a - s_b
    winner = ib if _aggregate(margins, rule) < 0 else ia
    return ComparisonResult(ia, ib, margins, confidence(s_a, s_b), winner)


def compare(model: Comparator, source: str, c_a: str, c_b: str, index_a: int = 0, index_b: int = 1,
            rule: str | int = "mean") -> ComparisonResult:
    """Slot a wins iff the aggregated margin is >= 0 (ties keep slot a).

    ``rule`` is ``"mean"`` over metrics or the integer position of a single metric.
    """
    s_a, s_b = model.score_pairs([(source, c_a, c_b)])
    return _result(s_a[0], s_b[0], index_a, index_b, rule)


@dataclass
class Selection:
    example_id: str
    selected_index: int
    order: list[int]
    trace: list[ComparisonResult] = field(default_factory=list)

    def to_json(self, pool: ScoredPool, with_trace: bool = False) -> dict:
        rec = {"example_id": self.example_id, "selected_index": self.selected_index,
               "selected_text": pool.candidates[self.selected_index].text}
        if with_trace:
            rec["trace"] = [c.to_json() for c in self.trace]
        return rec


def bubble_select_many(model: Comparator, pools: Sequence[ScoredPool], rngs: Sequence[np.random.Generator],
                       rule: str | int = "mean") -> list[Selection]:
    """Run one bubble pass per pool, batching step t of every pool into one scoring call.

    Each pool is shuffled with its own generator; the incumbent sits in slot a.
    Results are identical to running the pools one at a time.
    """
    if len(rngs) != len(pools):
        raise ValueError("need one generator per pool")
    sels = []
    for pool, rng in zip(pools, rngs):
        if len(pool) == 0:
            raise DataError(f"pool {pool.example_id!r} is empty")
        order = [int(i) for i in rng.permutation(len(pool))]
        sels.append(Selection(pool.example_id, order[0], order))
    longest = max((len(p) for p in pools), default=0)
    for t in range(1, longest):
        active = [i for i, p in enumerate(pools) if t < len(p)]
        triples = []
        for i in active:
            inc, ch = sels[i].selected_index, sels[i].order[t]
            triples.append((pools[i].source, pools[i].candidates[inc].text, pools[i].candidates[ch].text))
        s_a, s_b = model.score_pairs(triples)
        for row, i in enumerate(active):
            res = _result(s_a[row], s_b[row], sels[i].selected_index, sels[i].order[t], rule)
            sels[i].trace.append(res)
            sels[i].selected_index = res.winner
    return sels


def bubble_select(model: Comparator, pool: ScoredPool, rng: np.random.Generator,
                  rule: str | int = "mean") -> Selection:
    """Shuffle, then keep an incumbent through exactly m - 1 comparisons."""
    return bubble_select_many(model, [pool], [rng], rule)[0]


@dataclass
class RoundRobin:
    ranking: list[int]
    wins: np.ndarray
    mean_margin: np.ndarray
    comparisons: list[ComparisonResult]


def round_robin_rank(model: Comparator, pool: ScoredPool, rule: str | int = "mean") -> RoundRobin:
    """Compare every unordered pair once as (lower index, higher index).

    Ranked by wins, then by the mean aggregated margin in the candidate's favour,
    then by index.
    """
    m = len(pool)
    if m == 0:
        raise DataError(f"pool {pool.example_id!r} is empty")
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    wins = np.zeros(m, dtype=np.int64)
    margin_sum = np.zeros(m)
    comps = []
    if pairs:
        s_a, s_b = model.score_pairs([(pool.source, pool.candidates[i].text, pool.candidates[j].text)
                                      for i, j in pairs])
        for row, (i, j) in enumerate(pairs):
            res = _result(s_a[row], s_b[row], i, j, rule)
            comps.append(res)
            wins[res.winner] += 1
            agg = _aggregate(res.margins, rule)
            margin_sum[i] += agg
            margin_sum[j] -= agg
    mean_margin = margin_sum / max(1, m - 1)
    ranking = sorted(range(m), key=lambda i: (-wins[i], -mean_margin[i], i))
    return RoundRobin(ranking, wins, mean_margin, comps)


@dataclass
class ConsistencyReport:
    rate: float
    n_pairs: int
    n_agree: int
    skipped: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rate": self.rate, "sampled_pairs": self.n_pairs, "agreements": self.n_agree,
                "skipped_pools": self.skipped}


def consistency_rate(model: Comparator, pools: Sequence[ScoredPool], sample_pairs_per_pool: int,
                     rng: np.random.Generator, rule: str | int = "mean") -> ConsistencyReport:
    """Share of sampled pairs whose winner is the same candidate under both slot orders."""
    if not pools:
        raise DataError("consistency_rate needs at least one pool")
    if sample_pairs_per_pool < 1:
        raise ValueError("sample_pairs_per_pool must be >= 1")
    triples, meta, skipped = [], [], []
    for pool in pools:
        if len(pool) < 2:
            log.warning("pool %r has fewer than 2 candidates; skipped", pool.example_id)
            skipped.append(pool.example_id)
            continue
        for _ in range(sample_pairs_per_pool):
            a, b = (int(x) for x in rng.choice(len(pool), size=2, replace=False))
            ta, tb = pool.candidates[a].text, pool.candidates[b].text
            triples += [(pool.source, ta, tb), (pool.source, tb, ta)]
            meta.append((a, b))
    if not meta:
        return ConsistencyReport(float("nan"), 0, 0, skipped)
    s_a, s_b = model.score_pairs(triples)
    agree = 0
    for k, (a, b) in enumerate(meta):
        fwd = _result(s_a[2 * k], s_b[2 * k], a, b, rule)
        bwd = _result(s_a[2 * k + 1], s_b[2 * k + 1], b, a, rule)
        agree += fwd.winner == bwd.winner
    return ConsistencyReport(agree / len(meta), len(meta), agree, skipped)


class OracleComparator:
    """Scores each slot with its true metric vector; orientation-independent and transitive."""

    def __init__(self, pools: Sequence[ScoredPool], metrics: Sequence[str]):
        self.metrics = list(metrics)
        self._table = {}
        for pool in pools:
            mat = pool.score_matrix(self.metrics)
            for cand, row in zip(pool.candidates, mat):
                self._table[(pool.source, cand.text)] = row
        self.calls = 0

    def score_pairs(self, triples):
        self.calls += len(triples)
        s_a = np.array([self._table[(s, a)] for s, a, _ in triples]).reshape(len(triples), -1)
        s_b = np.array([self._table[(s, b)] for s, _, b in triples]).reshape(len(triples), -1)
        return s_a, s_b


class SlotBiasedComparator:
    """Always prefers whatever sits in slot a."""

    def __init__(self, n_metrics: int = 1):
        self.n_metrics = n_metrics

    def score_pairs(self, triples):
        n = len(triples)
        return np.ones((n, self.n_metrics)), np.zeros((n, self.n_metrics))
