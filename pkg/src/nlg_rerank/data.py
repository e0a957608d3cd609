"""Examples, candidate pools and their JSONL persistence."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Example:
    id: str
    source: str
    target: str


@dataclass
class CandidateRecord:
    text: str
    method: str
    scores: dict[str, float] | None = None

    def to_json(self) -> dict:
        rec = {"text": self.text, "method": self.method}
        if self.scores is not None:
            rec["scores"] = dict(self.scores)
        return rec


@dataclass
class ScoredPool:
    example_id: str
    source: str
    target: str
    candidates: list[CandidateRecord] = field(default_factory=list)
    # Which generator produced the pool (e.g. "half_a" for the model trained on half A).
    provenance: str | None = None

    @property
    def transfer_mode(self) -> bool:
        return self.target == ""

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def texts(self) -> list[str]:
        return [c.text for c in self.candidates]

    def is_scored(self, metrics: Iterable[str]) -> bool:
        metrics = list(metrics)
        return all(c.scores is not None and all(m in c.scores for m in metrics)
                   for c in self.candidates)

    def score_matrix(self, metrics: Sequence[str]) -> np.ndarray:
        """(m, |metrics|) array of candidate scores; raises if any are missing."""
        if not self.is_scored(metrics):
            raise DataError(f"pool {self.example_id!r} is not scored for {list(metrics)}")
        return np.array([[c.scores[m] for m in metrics] for c in self.candidates],
                        dtype=np.float64).reshape(len(self.candidates), len(metrics))

    def to_json(self) -> dict:
        rec = {
            "example_id": self.example_id,
            "source": self.source,
            "target": self.target,
            "candidates": [c.to_json() for c in self.candidates],
        }
        if self.provenance is not None:
            rec["provenance"] = self.provenance
        return rec


@dataclass
class HalfSplitPlan:
    seed: int
    half_a: list[str]
    half_b: list[str]

    def assignment(self) -> dict[str, str]:
        """Map each example id to ``"half_a"`` or ``"half_b"``."""
        out = {i: "half_a" for i in self.half_a}
        out.update((i, "half_b") for i in self.half_b)
        return out

    def to_json(self) -> dict:
        return {"seed": self.seed, "half_a": list(self.half_a), "half_b": list(self.half_b)}

    @classmethod
    def from_json(cls, rec: dict) -> "HalfSplitPlan":
        return cls(seed=int(rec["seed"]), half_a=list(rec["half_a"]), half_b=list(rec["half_b"]))


def _iter_jsonl(path):
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ParseError(path, line_no, "expected a JSON object")
            yield line_no, rec


def _require_str(rec, key, path, line_no, what="record"):
    val = rec.get(key)
    if not isinstance(val, str):
        raise ParseError(path, line_no, f"{what} is missing string field {key!r}")
    return val


def load_dataset(path, split: str = "train", allow_empty_target: bool = False) -> list[Example]:
    """Read a dataset JSONL file of ``{"id", "source", "target"}`` records."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    examples = []
    seen: dict[str, int] = {}
    for line_no, rec in _iter_jsonl(path):
        ex_id = _require_str(rec, "id", path, line_no)
        source = _require_str(rec, "source", path, line_no)
        target = _require_str(rec, "target", path, line_no)
        if ex_id in seen:
            raise ParseError(path, line_no,
                             f"duplicate id {ex_id!r} (first seen on line {seen[ex_id]})")
        if not source:
            raise ParseError(path, line_no, "empty source")
        if not target and not allow_empty_target:
            raise ParseError(path, line_no, "empty target outside transfer mode")
        seen[ex_id] = line_no
        examples.append(Example(ex_id, source, target))
    return examples


def write_dataset(path, examples: Iterable[Example]) -> None:
    _atomic_write_lines(path, (json.dumps({"id": e.id, "source": e.source, "target": e.target},
                                          ensure_ascii=False) for e in examples))


def make_half_split(examples: Sequence[Example], seed: int) -> HalfSplitPlan:
    """Shuffle ids under ``seed`` and cut them into two halves (the first gets the extra one)."""
    if len(examples) < 2:
        raise DataError("half split needs at least 2 examples")
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        raise DataError("half split needs unique example ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    cut = (len(ids) + 1) // 2
    return HalfSplitPlan(seed=seed, half_a=shuffled[:cut], half_b=shuffled[cut:])


def merge_pools(pools: Sequence[ScoredPool]) -> ScoredPool:
    """Concatenate candidate lists of pools for one example, keeping duplicates."""
    if not pools:
        raise DataError("merge_pools needs at least one pool")
    first = pools[0]
    for p in pools[1:]:
        if p.example_id != first.example_id:
            raise DataError(f"cannot merge pools of {first.example_id!r} and {p.example_id!r}")
        if p.source != first.source or p.target != first.target:
            raise DataError(f"pools for {first.example_id!r} disagree on source/target")
    candidates = [CandidateRecord(c.text, c.method, None if c.scores is None else dict(c.scores))
                  for p in pools for c in p.candidates]
    provs = {p.provenance for p in pools}
    return ScoredPool(first.example_id, first.source, first.target, candidates,
                      provenance=provs.pop() if len(provs) == 1 else None)


def _parse_pool(rec: dict, path, line_no) -> ScoredPool:
    ex_id = _require_str(rec, "example_id", path, line_no)
    source = _require_str(rec, "source", path, line_no)
    target = rec.get("target", "")
    if not isinstance(target, str):
        raise ParseError(path, line_no, "field 'target' must be a string")
    raw = rec.get("candidates")
    if not isinstance(raw, list):
        raise ParseError(path, line_no, "record is missing list field 'candidates'")
    candidates = []
    for j, c in enumerate(raw):
        if not isinstance(c, dict):
            raise ParseError(path, line_no, f"candidate {j} is not an object")
        text = _require_str(c, "text", path, line_no, what=f"candidate {j}")
        method = c.get("method", "external")
        scores = c.get("scores")
        if scores is not None:
            if not isinstance(scores, dict) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
                    for v in scores.values()):
                raise ParseError(path, line_no, f"candidate {j} has non-finite or non-numeric scores")
            scores = {k: float(v) for k, v in scores.items()}
        candidates.append(CandidateRecord(text, str(method), scores))
    prov = rec.get("provenance")
    return ScoredPool(ex_id, source, target, candidates, provenance=prov)


def read_pools(path) -> list[ScoredPool]:
    return [_parse_pool(rec, path, line_no) for line_no, rec in _iter_jsonl(path)]


def write_pools(path, pools: Iterable[ScoredPool]) -> None:
    _atomic_write_lines(path, (json.dumps(p.to_json(), ensure_ascii=False) for p in pools))


def _atomic_write_lines(path, lines: Iterable[str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_text(path, text: str) -> None:
    """Atomic whole-file write."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    os.replace(tmp, path)
