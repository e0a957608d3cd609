"""Candidate generation under several decoding methods, plus the half-split protocol."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Protocol, Sequence

from ..data import (
    CandidateRecord,
    Example,
    HalfSplitPlan,
    ScoredPool,
    merge_pools,
    read_pools,
)
from ..errors import ConfigError, DataError, RerankError

log = logging.getLogger(__name__)

DECODING_METHODS = ("beam", "diverse_beam", "top_k", "top_p")
SAMPLING_METHODS = ("top_k", "top_p")


@dataclass(frozen=True)
class DecodingConfig:
    method: str
    num_candidates: int = 15
    beam_width: int | None = None
    diversity_groups: int | None = None
    diversity_penalty: float = 1.0
    k: int = 50
    p: float = 0.9
    temperature: float = 1.0
    seed: int | None = None
    max_length: int = 64

    @property
    def width(self) -> int:
        return self.num_candidates if self.beam_width is None else self.beam_width

    @property
    def groups(self) -> int:
        return self.width if self.diversity_groups is None else self.diversity_groups

    def validate(self) -> "DecodingConfig":
        problems = []
        if self.method not in DECODING_METHODS:
            problems.append(f"unknown decoding method {self.method!r}")
        if self.num_candidates < 1:
            problems.append("num_candidates must be >= 1")
        if self.max_length < 1:
            problems.append("max_length must be >= 1")
        if self.method in ("beam", "diverse_beam") and self.width < self.num_candidates:
            problems.append("beam_width must be >= num_candidates")
        if self.method == "diverse_beam" and (self.groups < 1 or self.width % self.groups):
            problems.append("diversity_groups must divide beam_width")
        if self.method == "top_k" and self.k < 1:
            problems.append("k must be >= 1")
        if self.method == "top_p" and not 0.0 < self.p <= 1.0:
            problems.append("p must be in (0, 1]")
        if self.temperature <= 0:
            problems.append("temperature must be > 0")
        if self.method in SAMPLING_METHODS and self.seed is None:
            problems.append(f"{self.method} sampling requires a seed")
        if problems:
            raise ConfigError(f"invalid decoding config {self.method!r}: " + "; ".join(problems))
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, rec: dict) -> "DecodingConfig":
        try:
            return cls(**rec).validate()
        except TypeError as exc:
            raise ConfigError(f"bad decoding config {rec}: {exc}") from exc


class Generator(Protocol):
    """Anything that maps a source text to ``config.num_candidates`` output texts.

    Implementations must be deterministic given (source, config).
    """

    def generate(self, source: str, config: DecodingConfig) -> list[str]: ...


GeneratorFactory = Callable[[Sequence[Example]], Generator]


class GenerationError(RerankError):
    pass


def generate_candidates(gen: Generator, example: Example, config: DecodingConfig) -> ScoredPool:
    config.validate()
    try:
        texts = gen.generate(example.source, config)
    except Exception as exc:
        raise GenerationError(f"generator failed on example {example.id!r}: {exc}") from exc
    if len(texts) != config.num_candidates:
        raise GenerationError(f"generator returned {len(texts)} candidates for example "
                              f"{example.id!r}, expected {config.num_candidates}")
    return ScoredPool(example.id, example.source, example.target,
                      [CandidateRecord(t, config.method) for t in texts])


def generate_pool(gen: Generator, example: Example, configs: Sequence[DecodingConfig],
                  provenance: str | None = None) -> ScoredPool:
    pool = merge_pools([generate_candidates(gen, example, c) for c in configs])
    pool.provenance = provenance
    return pool


def build_training_pools(gen_factory: GeneratorFactory, train: Sequence[Example],
                         plan: HalfSplitPlan, configs: Sequence[DecodingConfig]) -> list[ScoredPool]:
    """Candidates for each training example come from the generator fit on the other half.

    ``pool.provenance`` names the half the generating model was trained on.
    """
    if not configs:
        raise ConfigError("at least one decoding config is required")
    for c in configs:
        c.validate()
    assignment = plan.assignment()
    for ex in train:
        if ex.id not in assignment:
            raise DataError(f"example id {ex.id!r} is missing from the half-split plan")
    by_id = {ex.id: ex for ex in train}
    pools: dict[str, ScoredPool] = {}
    for trained_on, other in (("half_a", "half_b"), ("half_b", "half_a")):
        members = [by_id[i] for i in (plan.half_a if trained_on == "half_a" else plan.half_b)
                   if i in by_id]
        gen = gen_factory(members)
        for ex in train:
            if assignment[ex.id] == other:
                pools[ex.id] = generate_pool(gen, ex, configs, provenance=trained_on)
    return [pools[ex.id] for ex in train]


def import_external_candidates(path) -> list[ScoredPool]:
    """Load candidates produced elsewhere; pools with an empty target are in transfer mode."""
    pools = read_pools(path)
    n_transfer = sum(p.transfer_mode for p in pools)
    if n_transfer:
        log.info("%d of %d imported pools have no reference (transfer mode)", n_transfer, len(pools))
    return pools
