import json
import shutil

import filelock
import numpy as np
import pytest
import yaml

from nlg_rerank import pipeline
from nlg_rerank.cli import main
from nlg_rerank.data import CandidateRecord, ScoredPool, read_pools, write_pools
from nlg_rerank.errors import ConfigError
from nlg_rerank.metrics import gain

TINY = {
    "output_dir": "out",
    "data": {"synthetic": {"n_train": 24, "n_val": 2, "n_test": 8}},
    "metrics": ["rouge1", "rouge2"],
    "model": {"width": 16, "layers": 1, "heads": 2, "dropout": 0.0, "capacity": 64},
    "train": {"k_pairs": 1, "epochs": 2, "batch_size": 8, "max_learning_rate": 0.01,
              "heldout_fraction": 0.2},
    "seeds": {"data": 0, "model": 0, "shuffle": 0},
}


def write_config(dirpath, doc=None, **updates):
    doc = json.loads(json.dumps(doc or TINY))
    doc.update(updates)
    path = dirpath / "run.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny generate → score → train run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root)
    assert run("generate", "--config", cfg) == 0
    assert run("score", "--config", cfg) == 0
    assert run("train", "--config", cfg) == 0
    assert run("train", "--config", cfg, "--method", "simcls") == 0
    return root, cfg


def copy_run(trained, tmp_path):
    root, _ = trained
    shutil.copytree(root / "out", tmp_path / "out")
    return write_config(tmp_path)


class TestConfig:
    def test_schema_errors_listed_together(self, tmp_path, capsys):
        doc = dict(TINY, metrics=["rouge9"], seeds={"data": 0}, extra=1)
        assert run("generate", "--config", write_config(tmp_path, doc)) == 2
        err = capsys.readouterr().err
        assert "rouge9" in err and "shuffle" in err and "extra" in err
        assert not (tmp_path / "out").exists()

    def test_missing_dataset_path(self, tmp_path, capsys):
        doc = dict(TINY, data={"train": "nope.jsonl"}, inference={"rule": "bleu"})
        assert run("generate", "--config", write_config(tmp_path, doc)) == 2
        err = capsys.readouterr().err
        assert "nope.jsonl" in err and "bleu" in err
        assert not (tmp_path / "out").exists()

    def test_synthetic_and_paths_exclusive(self, tmp_path):
        (tmp_path / "t.jsonl").write_text('{"id": "a", "source": "x", "target": "y"}\n')
        doc = dict(TINY, data={"synthetic": {"n_train": 4}, "train": "t.jsonl"})
        with pytest.raises(ConfigError, match="either"):
            pipeline.build_config(doc, tmp_path)

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("data: [unclosed\n")
        assert run("generate", "--config", path) == 2

    def test_unknown_method_is_usage_error(self, tmp_path):
        assert run("train", "--config", write_config(tmp_path), "--method", "moe") == 2

    def test_unknown_command(self):
        assert run("dance") == 2

    def test_flags_override_config(self, tmp_path):
        cfg = pipeline.load_config(write_config(tmp_path), {"seeds.data": 5, "metrics": ["bleu"],
                                                            "inference.mode": "round_robin"})
        assert cfg.seeds["data"] == 5 and cfg.metrics == ["bleu"] and cfg.inference["mode"] == "round_robin"

    def test_sampling_seed_filled_from_data_seed(self, tmp_path):
        cfg = pipeline.load_config(write_config(tmp_path))
        seeds = {d.method: d.seed for d in cfg.analysis_decoding}
        assert seeds["top_k"] == 0 and seeds["top_p"] == 0
        assert "seed: 0" in cfg.dump()

    def test_relative_paths_follow_config_dir(self, tmp_path):
        sub = tmp_path / "conf"
        sub.mkdir()
        cfg = pipeline.load_config(write_config(sub))
        assert cfg.out == (sub / "out").resolve()


class TestGenerate:
    def test_hundred_examples_give_hundred_pools_of_thirty(self, tmp_path, capsys):
        doc = dict(TINY, data={"synthetic": {"n_train": 100, "n_val": 0, "n_test": 2}})
        cfg = write_config(tmp_path, doc)
        assert run("generate", "--config", cfg) == 0
        counts = json.loads(capsys.readouterr().out)["pool_counts"]
        assert counts["train"] == 100
        pools = read_pools(tmp_path / "out" / "pools" / "train.jsonl")
        assert len(pools) == 100 and {len(p) for p in pools} == {30}
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert set(manifest["half_split"]) == {"seed", "half_a", "half_b"}
        assert manifest["seeds"] == {"data": 0, "model": 0, "shuffle": 0}
        assert (tmp_path / "out" / "config.effective.yaml").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run("generate", "--config", cfg) == 0
        first = {p.name: p.read_bytes() for p in (tmp_path / "out" / "pools").rglob("*.jsonl")}
        assert run("generate", "--config", cfg) == 0
        second = {p.name: p.read_bytes() for p in (tmp_path / "out" / "pools").rglob("*.jsonl")}
        assert first == second and len(first) == 7

    def test_manifest_hashes_files(self, trained):
        root, _ = trained
        manifest = json.loads((root / "out" / "manifest.json").read_text())
        assert "pools/train.jsonl" in manifest["files"] and "data/test.jsonl" in manifest["files"]
        assert manifest["scored_metrics"] == ["rouge1", "rouge2"]

    def test_score_without_pools(self, tmp_path):
        assert run("score", "--config", write_config(tmp_path)) == 3


class TestTrain:
    def test_outputs(self, trained):
        root, _ = trained
        ck = root / "out" / "checkpoints" / "pairreranker"
        assert (ck / "best.pt").exists() and (ck / "train_log.jsonl").exists()
        summary = json.loads((ck / "summary.json").read_text())
        assert len(summary["epoch_losses"]) == 2

    def test_metric_mismatch(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        assert run("train", "--config", cfg, "--metrics", "rouge1,bleu") == 2

    def test_resume_continues_step_count(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        log_path = tmp_path / "out" / "checkpoints" / "pairreranker" / "train_log.jsonl"
        before = [json.loads(x) for x in log_path.read_text().splitlines()]
        doc = json.loads(json.dumps(TINY))
        doc["train"]["epochs"] = 3
        cfg = write_config(tmp_path, doc)
        assert run("train", "--config", cfg, "--resume") == 0
        after = [json.loads(x) for x in log_path.read_text().splitlines()]
        steps = [r["step"] for r in after if "epoch" not in r]
        assert after[: len(before)] == before
        assert steps == list(range(1, len(steps) + 1)) and len(steps) > len(
            [r for r in before if "epoch" not in r])

    def test_missing_pools(self, tmp_path):
        assert run("train", "--config", write_config(tmp_path)) == 3


def external_pools(n, m, seed=0, target=""):
    rng = np.random.default_rng(seed)
    pools = []
    for i in range(n):
        src = " ".join(f"w{x}" for x in rng.integers(0, 20, 5))
        cands = [CandidateRecord(" ".join(f"v{x}" for x in rng.integers(0, 20, 5)), "external")
                 for _ in range(m)]
        pools.append(ScoredPool(f"x{i}", src, target, cands))
    return pools


class TestRerank:
    def test_bubble_selections(self, trained, tmp_path, capsys):
        cfg = copy_run(trained, tmp_path)
        assert run("rerank", "--config", cfg) == 0
        meta = json.loads(capsys.readouterr().out)
        assert meta["mode"] == "bubble" and meta["count"] == 8 and meta["comparisons"] == 8 * 29
        lines = (tmp_path / "out" / "selections" / "pairreranker_bubble.jsonl").read_text().splitlines()
        assert len(lines) == 8

    def test_thousand_imported_pools(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        write_pools(tmp_path / "ext.jsonl", external_pools(1000, 15))
        assert run("import-external", "--config", cfg, tmp_path / "ext.jsonl") == 0
        conf = pipeline.load_config(cfg)
        meta = pipeline.cmd_rerank(conf, pools_path=conf.path("pools", "external.jsonl"), name="ext")
        assert meta["count"] == 1000 and meta["comparisons_per_pool"] == [14] * 1000

    def test_empty_pool_file(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        (tmp_path / "empty.jsonl").write_text("")
        assert run("rerank", "--config", cfg, "--pools", tmp_path / "empty.jsonl", "--name", "e") == 0
        assert (tmp_path / "out" / "selections" / "e.jsonl").read_text() == ""

    def test_long_candidates_warn_not_fail(self, trained, tmp_path, caplog):
        cfg = copy_run(trained, tmp_path)
        pools = external_pools(2, 3)
        pools[0].candidates[1] = CandidateRecord(" ".join(["v1"] * 200), "external")
        write_pools(tmp_path / "long.jsonl", pools)
        conf = pipeline.load_config(cfg)
        with caplog.at_level("WARNING"):
            meta = pipeline.cmd_rerank(conf, pools_path=tmp_path / "long.jsonl", name="long")
        assert meta["truncated_examples"] == 1 and "truncated" in caplog.text

    def test_round_robin(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        assert run("rerank", "--config", cfg, "--mode", "round_robin") == 0
        rec = json.loads((tmp_path / "out" / "selections" / "pairreranker_round_robin.jsonl")
                         .read_text().splitlines()[0])
        assert rec["selected_index"] == rec["ranking"][0] and sorted(rec["ranking"]) == list(range(30))

    def test_pointwise_is_argmax(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        ck = tmp_path / "out" / "checkpoints" / "simcls" / "best.pt"
        assert run("rerank", "--config", cfg, "--mode", "pointwise", "--checkpoint", ck) == 0
        model = pipeline.load_any(ck)
        pools = read_pools(tmp_path / "out" / "pools" / "test.jsonl")
        recs = [json.loads(x) for x in
                (tmp_path / "out" / "selections" / "simcls_pointwise.jsonl").read_text().splitlines()]
        for pool, rec in zip(pools, recs):
            s = model.score_candidates(pool.source, pool.texts)
            assert rec["selected_index"] == int(np.argmax(s))

    def test_mode_checkpoint_mismatch(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        ck = tmp_path / "out" / "checkpoints" / "simcls" / "best.pt"
        assert run("rerank", "--config", cfg, "--checkpoint", ck) == 2
        assert run("rerank", "--config", cfg, "--mode", "pointwise") == 2

    def test_missing_checkpoint(self, tmp_path):
        assert run("rerank", "--config", write_config(tmp_path)) == 3

    def test_locked_output_dir(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        lock = filelock.FileLock(str(tmp_path / "out" / ".lock"))
        with lock:
            assert run("rerank", "--config", cfg) == 4


class TestEvaluate:
    def test_rows_and_gains(self, trained, tmp_path, capsys):
        cfg = copy_run(trained, tmp_path)
        assert run("rerank", "--config", cfg) == 0
        sel = tmp_path / "out" / "selections" / "pairreranker_bubble.jsonl"
        assert run("evaluate", "--config", cfg, "--selections", sel) == 0
        assert "PairReranker (bubble)" in capsys.readouterr().out
        rep = json.loads((tmp_path / "out" / "reports" / "evaluation.json").read_text())
        rows = {r["name"]: r for r in rep["rows"]}
        assert list(rows) == ["top-beam", "random", "PairReranker (bubble)", "oracle"]
        for m in ("rouge1", "rouge2"):
            assert rows["top-beam"][f"gain_{m}"] == 0.0
            assert rows["oracle"][f"gain_{m}"] >= 0.0
            assert rows["oracle"][m] >= rows["PairReranker (bubble)"][m]
        csv_text = (tmp_path / "out" / "reports" / "evaluation.csv").read_text()
        assert "gain% rouge1" in csv_text

    def test_top_beam_selection_has_zero_gain(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        pools = read_pools(tmp_path / "out" / "pools" / "test.jsonl")
        sel = tmp_path / "top.jsonl"
        sel.write_text("".join(json.dumps({"example_id": p.example_id, "selected_index": 0}) + "\n"
                               for p in pools))
        table = pipeline.cmd_evaluate(pipeline.load_config(cfg), [sel])
        assert all(g == 0.0 for g in table.gains(table.row("top")).values())

    def test_transfer_pools_refused(self, trained, tmp_path, capsys):
        cfg = copy_run(trained, tmp_path)
        write_pools(tmp_path / "ext.jsonl", external_pools(3, 4))
        assert run("evaluate", "--config", cfg, "--pools", tmp_path / "ext.jsonl") == 3
        assert "references" in capsys.readouterr().err

    def test_missing_selection(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        sel = tmp_path / "partial.jsonl"
        sel.write_text(json.dumps({"example_id": "nope", "selected_index": 0}) + "\n")
        assert run("evaluate", "--config", cfg, "--selections", sel) == 3


class TestOracleAnalysis:
    def test_merged_dominates(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        table = pipeline.cmd_oracle_analysis(pipeline.load_config(cfg))
        assert table.row_names == ["top-beam", "oracle beam", "oracle diverse_beam", "oracle top_k",
                                   "oracle top_p", "oracle all"]
        merged = table.row("oracle all").means
        for name in table.row_names[:-1]:
            assert all(merged[m] >= table.row(name).means[m] for m in table.metrics)
        top = table.row("top-beam").means
        assert table.final_gain() == {m: gain(merged[m], top[m]) for m in table.metrics}

    def test_single_method_three_rows(self, trained, tmp_path):
        copy_run(trained, tmp_path)
        doc = dict(TINY, analysis_decoding=[{"method": "beam", "num_candidates": 15}])
        table = pipeline.cmd_oracle_analysis(pipeline.load_config(write_config(tmp_path, doc)))
        assert table.row_names == ["top-beam", "oracle beam", "oracle all"]
        assert "gain%" in table.to_text().splitlines()[-1]

    def test_coverage_mismatch(self, trained, tmp_path):
        cfg = copy_run(trained, tmp_path)
        path = tmp_path / "out" / "pools" / "analysis" / "top_k.jsonl"
        write_pools(path, read_pools(path)[:-1])
        assert run("oracle-analysis", "--config", cfg) == 3


class TestConsistency:
    def test_report(self, trained, tmp_path, capsys):
        cfg = copy_run(trained, tmp_path)
        assert run("consistency", "--config", cfg) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["sampled_pairs"] == 8 * 5 and 0.0 <= rep["rate"] <= 1.0
        assert rep["reference_rate_full_scale"] == 0.9
        assert (tmp_path / "out" / "reports" / "consistency.json").exists()
