import csv
import io
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from nlg_rerank.data import CandidateRecord, ScoredPool
from nlg_rerank.metrics import gain
from nlg_rerank.report import MetricReport, Table, default_notes, selection_report

M = ["rouge1", "bleu"]


def table(rows, **kw):
    return Table("t", M, [MetricReport(n, dict(zip(M, v)), 3) for n, v in rows], **kw)


def test_gain_cells_follow_formula():
    t = table([("top", (0.4422, 0.1462)), ("all", (0.5770, 0.3004))], base="top", gain_row="all|top")
    rec = t.to_json()["rows"][1]
    assert rec["gain_rouge1"] == pytest.approx(gain(57.70, 44.22), abs=1e-9)
    assert t.final_gain()["bleu"] == pytest.approx(100 * (30.04 - 14.62) / 14.62, abs=1e-9)


def test_display_scale_and_text():
    t = table([("top", (0.5, 0.25)), ("new", (0.6, 0.25))], base="top", notes=default_notes(M))
    text = t.to_text()
    assert "50.00" in text and "20.0" in text and text.count("\n") == len(text.splitlines())
    assert text.splitlines()[1].startswith("# scores")


def test_csv_roundtrip():
    t = table([("top", (0.5, 0.25)), ("new", (0.6, 0.3))], base="top")
    rows = list(csv.reader(io.StringIO(t.to_csv())))
    header = next(r for r in rows if r[0] == "method")
    assert header == ["method", "rouge1", "bleu", "gain% rouge1", "gain% bleu"]
    assert rows[-1] == ["new", "60.00", "30.00", "20.0", "20.0"]


def test_nonpositive_base_shows_nan():
    t = table([("top", (0.0, 0.2)), ("new", (0.1, 0.3))], base="top")
    assert math.isnan(t.gains(t.row("new"))["rouge1"])
    assert "nan" in t.to_text()


def test_tampered_cells_fail_check():
    t = table([("top", (0.5, 0.25)), ("new", (0.6, 0.3))], base="top")
    orig = t.to_json

    def bad():
        out = orig()
        out["rows"][1]["gain_bleu"] += 1.0
        return out

    t.to_json = bad
    with pytest.raises(AssertionError):
        t.check()


def test_unequal_counts_rejected():
    with pytest.raises(ValueError):
        Table("t", M, [MetricReport("a", dict.fromkeys(M, 0.1), 3), MetricReport("b", dict.fromkeys(M, 0.1), 4)])


def test_unknown_base_rejected():
    with pytest.raises(ValueError):
        table([("top", (0.5, 0.25))], base="nope")


def test_selection_report_per_metric_picks():
    cands = [CandidateRecord("a", "beam", {"rouge1": 0.2, "bleu": 0.9}),
             CandidateRecord("b", "beam", {"rouge1": 0.7, "bleu": 0.1})]
    pools = [ScoredPool("p", "s", "r", cands)]
    assert selection_report("x", pools, [{"rouge1": 1, "bleu": 0}], M).means == {"rouge1": 0.7, "bleu": 0.9}
    assert selection_report("x", pools, [0], M).means == {"rouge1": 0.2, "bleu": 0.9}
    with pytest.raises(ValueError):
        selection_report("x", pools, [0, 1], M)


def test_write(tmp_path):
    t = table([("top", (0.5, 0.25)), ("new", (0.6, 0.3))], base="top")
    t.write(tmp_path / "rep")
    assert json.loads((tmp_path / "rep.json").read_text())["base"] == "top"
    assert (tmp_path / "rep.txt").read_text() == t.to_text()
    assert (tmp_path / "rep.csv").read_text() == t.to_csv()


@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(0.01, 1.0)), min_size=1, max_size=6))
def test_self_consistency_property(values):
    t = table([(f"r{i}", v) for i, v in enumerate(values)], base="r0", gain_row=f"r{len(values) - 1}|r0")
    t.check()
    for rec in t.to_json()["rows"]:
        assert rec["gain_rouge1"] == pytest.approx(gain(rec["rouge1"], t.to_json()["rows"][0]["rouge1"]),
                                                   abs=1e-9)
