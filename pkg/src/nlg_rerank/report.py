"""Metric tables: method rows by metric columns, gain columns last."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ScoredPool, write_text
from .metrics import DISPLAY_SCALE, gain

CIDER_NOTE = ("cider is corpus-relative: document frequencies come from the references "
              "of the evaluated split")
SCALE_NOTE = f"scores are stored as fractions and shown x{DISPLAY_SCALE:g}"


def _gain(new: float, base: float) -> float:
    return gain(new, base) if base > 0 else float("nan")


@dataclass
class MetricReport:
    """Per-metric mean over one set of examples."""

    name: str
    means: dict[str, float]
    count: int


def selection_report(name: str, pools: Sequence[ScoredPool], chosen: Sequence[int] | Sequence[dict],
                     metrics: Sequence[str]) -> MetricReport:
    """Mean metric of the chosen candidate per pool.

    ``chosen`` holds one index per pool, or one ``{metric: index}`` mapping per pool
    (oracle rows pick a different candidate for each metric).
    """
    if len(chosen) != len(pools):
        raise ValueError(f"{len(chosen)} selections for {len(pools)} pools")
    sums = dict.fromkeys(metrics, 0.0)
    for pool, pick in zip(pools, chosen):
        for m in metrics:
            idx = pick[m] if isinstance(pick, dict) else pick
            sums[m] += pool.candidates[idx].scores[m]
    n = len(pools)
    return MetricReport(name, {m: sums[m] / n if n else float("nan") for m in metrics}, n)


@dataclass
class Table:
    title: str
    metrics: list[str]
    rows: list[MetricReport]
    base: str | None = None
    notes: list[str] = field(default_factory=list)
    gain_row: str | None = None  # "new|base": append one gain row comparing two rows

    def __post_init__(self):
        counts = {r.count for r in self.rows}
        if len(counts) > 1:
            raise ValueError(f"rows cover different example counts: {sorted(counts)}")
        if self.base is not None and self.base not in self.row_names:
            raise ValueError(f"base row {self.base!r} not in table")

    @property
    def row_names(self) -> list[str]:
        return [r.name for r in self.rows]

    def row(self, name: str) -> MetricReport:
        return self.rows[self.row_names.index(name)]

    def gains(self, row: MetricReport) -> dict[str, float]:
        base = self.row(self.base)
        return {m: _gain(row.means[m], base.means[m]) for m in self.metrics}

    def final_gain(self) -> dict[str, float] | None:
        if self.gain_row is None:
            return None
        new, base = self.gain_row.split("|")
        return {m: _gain(self.row(new).means[m], self.row(base).means[m]) for m in self.metrics}

    def check(self) -> None:
        """Recompute every gain cell from this table's own cells."""
        cells = self.to_json()
        for rec in cells["rows"]:
            for m in self.metrics:
                key = f"gain_{m}"
                if key in rec:
                    want = _gain(rec[m], cells["rows"][self.row_names.index(self.base)][m])
                    if not np.isclose(rec[key], want, rtol=0, atol=1e-9, equal_nan=True):
                        raise AssertionError(f"gain cell {rec['name']}/{m} inconsistent")
        if cells.get("gain_row"):
            new, base = self.gain_row.split("|")
            for m in self.metrics:
                want = _gain(self.row(new).means[m] * DISPLAY_SCALE, self.row(base).means[m] * DISPLAY_SCALE)
                if not np.isclose(cells["gain_row"][m], want, rtol=0, atol=1e-9, equal_nan=True):
                    raise AssertionError(f"final gain cell for {m} inconsistent")

    def to_json(self) -> dict:
        rows = []
        for r in self.rows:
            rec = {"name": r.name, "count": r.count}
            rec.update({m: r.means[m] * DISPLAY_SCALE for m in self.metrics})
            if self.base is not None:
                rec.update({f"gain_{m}": g for m, g in self.gains(r).items()})
            rows.append(rec)
        out = {"title": self.title, "metrics": self.metrics, "notes": self.notes, "rows": rows}
        if self.base is not None:
            out["base"] = self.base
        if self.gain_row is not None:
            out["gain_row"] = self.final_gain()
        return out

    def _header(self) -> list[str]:
        cols = ["method"] + list(self.metrics)
        if self.base is not None:
            cols += [f"gain% {m}" for m in self.metrics]
        return cols

    def _cells(self) -> list[list[str]]:
        data = self.to_json()
        out = []
        for rec in data["rows"]:
            line = [rec["name"]] + [f"{rec[m]:.2f}" for m in self.metrics]
            if self.base is not None:
                line += [f"{rec[f'gain_{m}']:.1f}" for m in self.metrics]
            out.append(line)
        if self.gain_row is not None:
            line = ["gain%"] + [f"{data['gain_row'][m]:.1f}" for m in self.metrics]
            if self.base is not None:
                line += [""] * len(self.metrics)
            out.append(line)
        return out

    def to_csv(self) -> str:
        self.check()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for note in self.notes:
            w.writerow([f"# {note}"])
        w.writerow(self._header())
        w.writerows(self._cells())
        return buf.getvalue()

    def to_text(self) -> str:
        self.check()
        grid = [self._header()] + self._cells()
        widths = [max(len(row[i]) for row in grid) for i in range(len(grid[0]))]
        lines = [self.title] + [f"# {n}" for n in self.notes]
        for k, row in enumerate(grid):
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def write(self, stem) -> None:
        stem = Path(stem)
        write_text(stem.with_suffix(".csv"), self.to_csv())
        write_text(stem.with_suffix(".txt"), self.to_text())
        write_text(stem.with_suffix(".json"), json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def default_notes(metrics: Sequence[str]) -> list[str]:
    notes = [SCALE_NOTE]
    if "cider" in metrics:
        notes.append(CIDER_NOTE)
    return notes
