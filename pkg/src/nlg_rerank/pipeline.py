"""Run configuration and the pipeline commands behind the CLI.

Output layout under ``output_dir``::

    config.effective.yaml  manifest.json  .lock
    data/       datasets actually used (synthetic ones are materialized)
    pools/      {train,val,test}.jsonl, analysis/<method>.jsonl, external.jsonl
    checkpoints/<method>/best.pt, train_log.jsonl, summary.json
    selections/<name>.jsonl, <name>.meta.json
    reports/<name>.{csv,txt,json}
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import filelock
import jsonschema
import numpy as np
import yaml

from . import synthetic
from .baselines import DISPLAY_NAMES, VARIANTS, PointwiseReranker, rank_pointwise, train_pointwise
from .data import (
    SPLITS,
    Example,
    ScoredPool,
    load_dataset,
    make_half_split,
    merge_pools,
    read_pools,
    write_dataset,
    write_json,
    write_pools,
    write_text,
)
from .decoding import DecodingConfig, build_training_pools, generate_candidates, generate_pool
from .decoding import import_external_candidates
from .decoding.generators import seq2seq_factory, template_factory
from .decoding.harness import SAMPLING_METHODS
from .encoder import ModelConfig, PairReranker, Vocab, load_checkpoint
from .errors import ConfigError, DataError, RerankError
from .inference import TIE_RULE, bubble_select_many, consistency_rate, round_robin_rank
from .metrics import check_metrics, oracle_select, score_pools, tokenize
from .report import Table, default_notes, selection_report
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

METHODS = ("pairreranker",) + VARIANTS
MODES = ("bubble", "round_robin", "pointwise")
CONSISTENCY_REFERENCE = 0.9

DEFAULTS = {
    "generator": {"kind": "template", "options": {}},
    "decoding": [{"method": "beam", "num_candidates": 15},
                 {"method": "diverse_beam", "num_candidates": 15}],
    "analysis_decoding": [{"method": "beam", "num_candidates": 15},
                          {"method": "diverse_beam", "num_candidates": 15},
                          {"method": "top_k", "num_candidates": 15},
                          {"method": "top_p", "num_candidates": 15}],
    "model": {},
    "train": {},
    "baselines": {"simcls_lambda": 0.01},
    "inference": {"mode": "bubble", "rule": "mean", "trace": False, "batch_size": 64},
    "consistency": {"pairs_per_pool": 5},
}


def _schema() -> dict:
    text = resources.files("nlg_rerank").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        doc = doc.setdefault(k, {})
    doc[keys[-1]] = value


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @property
    def out(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def metrics(self) -> list[str]:
        return list(self.raw["metrics"])

    @property
    def seeds(self) -> dict[str, int]:
        return dict(self.raw["seeds"])

    @property
    def decoding(self) -> list[DecodingConfig]:
        return [DecodingConfig(**d) for d in self.raw["decoding"]]

    @property
    def analysis_decoding(self) -> list[DecodingConfig]:
        return [DecodingConfig(**d) for d in self.raw["analysis_decoding"]]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(metrics=self.metrics, **self.raw["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seeds["model"], **self.raw["train"])

    @property
    def inference(self) -> dict:
        return dict(self.raw["inference"])

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def build_config(doc: dict, base_dir=".", overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the document and dotted-key overrides; then validate everything.

    All problems are collected and raised together as one ``ConfigError``.
    """
    base_dir = Path(base_dir)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    raw = _merge(DEFAULTS, doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, key, value)
    problems = [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}"
                for e in jsonschema.Draft202012Validator(_schema()).iter_errors(raw)]
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))

    seed_data = raw["seeds"]["data"]
    for group in ("decoding", "analysis_decoding"):
        for d in raw[group]:
            if d["method"] in SAMPLING_METHODS and d.get("seed") is None:
                d["seed"] = seed_data
    data = raw["data"]
    has_paths = [s for s in SPLITS if s in data]
    if "synthetic" in data and has_paths:
        problems.append("data: give either synthetic or dataset paths, not both")
    elif "synthetic" not in data and not has_paths:
        problems.append("data: no datasets configured")
    for split in has_paths:
        p = Path(data[split])
        p = p if p.is_absolute() else (base_dir / p)
        if not p.exists():
            problems.append(f"data/{split}: {p} does not exist")
        data[split] = str(p.resolve())
    out = Path(raw["output_dir"])
    raw["output_dir"] = str((out if out.is_absolute() else base_dir / out).resolve())
    for group in ("decoding", "analysis_decoding"):
        for d in raw[group]:
            try:
                DecodingConfig(**d).validate()
            except ConfigError as exc:
                problems.append(f"{group}: {exc}")
    try:
        check_metrics(raw["metrics"])
        ModelConfig(metrics=raw["metrics"], **raw["model"]).validate()
    except (ConfigError, ValueError) as exc:
        problems.append(f"model: {exc}")
    try:
        TrainConfig(seed=raw["seeds"]["model"], **raw["train"]).validate()
    except ConfigError as exc:
        problems.append(f"train: {exc}")
    rule = raw["inference"]["rule"]
    if rule != "mean" and rule not in raw["metrics"]:
        problems.append(f"inference/rule: {rule!r} is neither 'mean' nor a configured metric")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return RunConfig(raw, base_dir)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return build_config(doc or {}, path.parent, overrides)


@contextlib.contextmanager
def output_lock(cfg: RunConfig):
    """Exclusive use of the output directory; writes the effective config."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(cfg.path(".lock")), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout as exc:
        raise RerankError(f"{cfg.out} is locked by another command") from exc
    try:
        write_text(cfg.path("config.effective.yaml"), cfg.dump())
        yield
    finally:
        lock.release()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(cfg: RunConfig, **entries) -> dict:
    path = cfg.path("manifest.json")
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(entries)
    files = {}
    for sub in ("data", "pools"):
        for p in sorted(cfg.path(sub).rglob("*.jsonl")) if cfg.path(sub).exists() else []:
            files[str(p.relative_to(cfg.out))] = _sha256(p)
    manifest["files"] = files
    write_json(path, manifest)
    return manifest


# ---------------------------------------------------------------- generate / score


def load_splits(cfg: RunConfig) -> dict[str, list[Example]]:
    data = cfg.raw["data"]
    if "synthetic" in data:
        opts = dict(data["synthetic"])
        sizes = {k: opts.pop(k) for k in ("n_train", "n_val", "n_test") if k in opts}
        return synthetic.make_splits(seed=cfg.seeds["data"], **sizes, **opts)
    return {s: load_dataset(data[s], s) for s in SPLITS if s in data}


def _factory(cfg: RunConfig, splits):
    gen = cfg.raw["generator"]
    opts = dict(gen.get("options", {}))
    if gen.get("kind", "template") == "template":
        refs = {e.source: e.target for exs in splits.values() for e in exs}
        return template_factory(refs, **opts)
    opts.setdefault("seed", cfg.seeds["data"])
    return seq2seq_factory(**opts)


def cmd_generate(cfg: RunConfig) -> dict:
    """Training pools via the half-split protocol; other splits from the generator fit on all of train."""
    splits = load_splits(cfg)
    if "train" not in splits:
        raise ConfigError("generate needs a train split")
    factory = _factory(cfg, splits)
    configs = cfg.decoding
    with output_lock(cfg):
        plan = make_half_split(splits["train"], cfg.seeds["data"])
        for name, exs in splits.items():
            write_dataset(cfg.path("data", f"{name}.jsonl"), exs)
        counts = {}
        train_pools = build_training_pools(factory, splits["train"], plan, configs)
        write_pools(cfg.path("pools", "train.jsonl"), train_pools)
        counts["train"] = len(train_pools)
        full = factory(splits["train"])
        for name in ("val", "test"):
            if splits.get(name):
                pools = [generate_pool(full, e, configs, provenance="full_train") for e in splits[name]]
                write_pools(cfg.path("pools", f"{name}.jsonl"), pools)
                counts[name] = len(pools)
        analysis_split = "test" if splits.get("test") else "val"
        if splits.get(analysis_split):
            for dc in cfg.analysis_decoding:
                pools = [generate_candidates(full, e, dc) for e in splits[analysis_split]]
                write_pools(cfg.path("pools", "analysis", f"{dc.method}.jsonl"), pools)
        manifest = _update_manifest(
            cfg, half_split=plan.to_json(), seeds=cfg.seeds, generator=cfg.raw["generator"],
            decoding=[d.to_json() for d in configs],
            analysis_decoding=[d.to_json() for d in cfg.analysis_decoding],
            analysis_split=analysis_split, pool_counts=counts)
    return manifest


def _pool_files(cfg: RunConfig) -> list[Path]:
    root = cfg.path("pools")
    return sorted(root.rglob("*.jsonl")) if root.exists() else []


def cmd_score(cfg: RunConfig) -> dict:
    """Score every pool file that has references; CIDEr statistics per file (one split each)."""
    files = _pool_files(cfg)
    if not files:
        raise DataError(f"no pool files under {cfg.path('pools')}; run generate or import-external first")
    done = {}
    with output_lock(cfg):
        for path in files:
            pools = read_pools(path)
            n_transfer = sum(p.transfer_mode for p in pools)
            if n_transfer == len(pools) and pools:
                log.info("%s has no references (transfer mode); not scored", path)
                continue
            if n_transfer:
                raise DataError(f"{path} mixes pools with and without references")
            write_pools(path, score_pools(pools, cfg.metrics))
            done[str(path.relative_to(cfg.out))] = len(pools)
        _update_manifest(cfg, scored_metrics=cfg.metrics)
    return done


# ---------------------------------------------------------------- train


def _require_scored(pools: Sequence[ScoredPool], metrics, path) -> None:
    for p in pools:
        if not p.is_scored(metrics):
            have = sorted(p.candidates[0].scores or {}) if p.candidates else []
            raise ConfigError(f"{path}: pool {p.example_id!r} is scored for {have}, config asks for "
                              f"{list(metrics)}; rerun score")


def cmd_train(cfg: RunConfig, method: str, resume: bool = False) -> dict:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    path = cfg.path("pools", "train.jsonl")
    if not path.exists():
        raise DataError(f"{path} not found; run generate and score first")
    pools = read_pools(path)
    if not pools:
        raise DataError(f"{path} holds no pools")
    _require_scored(pools, cfg.metrics, path)
    vocab = Vocab.build([t for p in pools for t in [p.source, p.target] + p.texts])
    mc, tc = cfg.model_config, cfg.train_config
    out_dir = cfg.path("checkpoints", method)
    with output_lock(cfg):
        if method == "pairreranker":
            model = PairReranker(mc, vocab, seed=cfg.seeds["model"])
            res = train(model, pools, tc, out_dir=out_dir, resume=resume)
            summary = {"method": method, "best_heldout_pair_acc": res.best_heldout_acc,
                       "epoch_losses": res.epoch_losses, "heldout_pair_acc": res.heldout_acc}
        else:
            if resume:
                log.warning("resume is only supported for pairreranker; training %s from scratch", method)
            model = PointwiseReranker(mc, vocab, method, seed=cfg.seeds["model"])
            res = train_pointwise(model, pools, tc, out_dir=out_dir, lam=cfg.raw["baselines"]["simcls_lambda"])
            summary = {"method": method, "best_heldout_pair_acc": res["best_heldout_acc"],
                       "epoch_losses": res["epoch_losses"], "heldout_pair_acc": res["heldout_acc"]}
        summary["checkpoint"] = str((out_dir / "best.pt").relative_to(cfg.out))
        summary["train_config"] = asdict(tc)
        write_json(out_dir / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- rerank


def load_any(path, metrics: Sequence[str] | None = None):
    ckpt = load_checkpoint(path)
    if ckpt["variant"] == "pairreranker":
        return PairReranker.load(path, metrics)
    return PointwiseReranker.load(path, metrics=metrics)


def _warn_truncation(model, pools: Sequence[ScoredPool]) -> int:
    lim = model.config.limits
    hit = 0
    for p in pools:
        n = sum(len(tokenize(c.text)) > lim.cand_max for c in p.candidates)
        src = len(tokenize(p.source)) > lim.source_max
        if n or src:
            hit += 1
            log.warning("example %s: truncated %s%d candidate(s) to fit the encoder", p.example_id,
                        "the source and " if src else "", n)
    return hit


def _rule(cfg: RunConfig, model) -> str | int:
    rule = cfg.inference["rule"]
    if rule == "mean":
        return rule
    if rule not in model.metrics:
        raise ConfigError(f"inference rule {rule!r} is not one of the checkpoint metrics {model.metrics}")
    return model.metrics.index(rule)


def cmd_rerank(cfg: RunConfig, checkpoint=None, pools_path=None, name: str | None = None,
               mode: str | None = None) -> dict:
    mode = mode or cfg.inference["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if checkpoint is None:
        default = "pairreranker" if mode != "pointwise" else None
        if default is None:
            raise ConfigError("pointwise mode needs --checkpoint (a simcls or summareranker model)")
        checkpoint = cfg.path("checkpoints", default, "best.pt")
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise DataError(f"checkpoint {checkpoint} not found")
    pools_path = Path(pools_path) if pools_path else cfg.path("pools", "test.jsonl")
    if not pools_path.exists():
        raise DataError(f"pool file {pools_path} not found")
    model = load_any(checkpoint)
    variant = getattr(model, "variant", "pairreranker")
    if (variant == "pairreranker") == (mode == "pointwise"):
        raise ConfigError(f"a {variant} checkpoint cannot run in {mode} mode")
    pools = read_pools(pools_path)
    for p in pools:
        if len(p) == 0:
            raise DataError(f"pool {p.example_id!r} is empty")
    truncated = _warn_truncation(model, pools)
    name = name or f"{variant}_{mode}"
    trace = bool(cfg.inference["trace"])
    records, n_comp = [], []
    if mode == "bubble":
        rule = _rule(cfg, model)
        chunk = cfg.inference["batch_size"]
        for start in range(0, len(pools), chunk):
            part = pools[start:start + chunk]
            rngs = [np.random.default_rng([cfg.seeds["shuffle"], start + i]) for i in range(len(part))]
            for pool, sel in zip(part, bubble_select_many(model, part, rngs, rule)):
                records.append(sel.to_json(pool, trace))
                n_comp.append(len(sel.trace))
    elif mode == "round_robin":
        rule = _rule(cfg, model)
        for pool in pools:
            rr = round_robin_rank(model, pool, rule)
            rec = {"example_id": pool.example_id, "selected_index": rr.ranking[0],
                   "selected_text": pool.candidates[rr.ranking[0]].text, "ranking": rr.ranking}
            if trace:
                rec["trace"] = [c.to_json() for c in rr.comparisons]
            records.append(rec)
            n_comp.append(len(rr.comparisons))
    else:
        for pool in pools:
            idx = rank_pointwise(model, pool)
            records.append({"example_id": pool.example_id, "selected_index": idx,
                            "selected_text": pool.candidates[idx].text})
            n_comp.append(0)
    meta = {"name": name, "mode": mode, "variant": variant, "display": DISPLAY_NAMES[variant],
            "checkpoint": str(checkpoint), "pools": str(pools_path), "count": len(records),
            "rule": cfg.inference["rule"], "tie_rule": TIE_RULE if mode != "pointwise" else
            "ties go to the lowest index", "shuffle_seed": cfg.seeds["shuffle"],
            "comparisons": int(sum(n_comp)), "truncated_examples": truncated}
    with output_lock(cfg):
        sel_path = cfg.path("selections", f"{name}.jsonl")
        write_text(sel_path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records))
        write_json(cfg.path("selections", f"{name}.meta.json"), meta)
    meta["comparisons_per_pool"] = n_comp
    return meta


# ---------------------------------------------------------------- evaluate / analysis


def _read_selections(path: Path) -> tuple[dict, dict]:
    meta_path = path.with_name(path.name.removesuffix(".jsonl") + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"name": path.stem}
    picks = {}
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            rec = json.loads(line)
            picks[rec["example_id"]] = int(rec["selected_index"])
    return meta, picks


def _row_name(meta: dict) -> str:
    if "display" in meta:
        return f"{meta['display']} ({meta['mode']})" if meta["variant"] == "pairreranker" else meta["display"]
    return meta["name"]


def cmd_evaluate(cfg: RunConfig, selections: Sequence, pools_path=None, name: str = "evaluation") -> Table:
    pools_path = Path(pools_path) if pools_path else cfg.path("pools", "test.jsonl")
    pools = read_pools(pools_path)
    if not pools:
        raise DataError(f"{pools_path} holds no pools")
    if any(p.transfer_mode for p in pools):
        raise DataError(f"{pools_path} has pools without reference targets; supply references "
                        "(a target per example) to evaluate selections")
    _require_scored(pools, cfg.metrics, pools_path)
    metrics = cfg.metrics
    rng = np.random.default_rng([cfg.seeds["shuffle"], 99])
    rows = [selection_report("top-beam", pools, [0] * len(pools), metrics),
            selection_report("random", pools, [int(rng.integers(len(p))) for p in pools], metrics)]
    notes = default_notes(metrics) + [f"pairwise selection: {TIE_RULE}",
                                      "gain% columns are relative to the top-beam row"]
    for sel in selections:
        meta, picks = _read_selections(Path(sel))
        missing = [p.example_id for p in pools if p.example_id not in picks]
        if missing:
            raise DataError(f"{sel} has no selection for {len(missing)} pool(s), e.g. {missing[0]!r}")
        chosen = []
        for p in pools:
            idx = picks[p.example_id]
            if not 0 <= idx < len(p):
                raise DataError(f"{sel}: index {idx} out of range for pool {p.example_id!r}")
            chosen.append(idx)
        rows.append(selection_report(_row_name(meta), pools, chosen, metrics))
        if meta.get("variant") == "summareranker":
            notes.append("SummaReranker (our setup): one shared head instead of a mixture of experts")
    rows.append(selection_report("oracle", pools, [{m: oracle_select(p, m) for m in metrics} for p in pools],
                                 metrics))
    names = [r.name for r in rows]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate report rows: {names}")
    table = Table(f"Reranking on {pools_path.name}", metrics, rows, base="top-beam", notes=notes)
    with output_lock(cfg):
        table.write(cfg.path("reports", name))
    return table


def cmd_oracle_analysis(cfg: RunConfig, name: str = "oracle_analysis") -> Table:
    methods = [d.method for d in cfg.analysis_decoding]
    by_method = {}
    for m in methods:
        path = cfg.path("pools", "analysis", f"{m}.jsonl")
        if not path.exists():
            raise DataError(f"{path} not found; run generate and score first")
        by_method[m] = read_pools(path)
        _require_scored(by_method[m], cfg.metrics, path)
    ids = {m: [p.example_id for p in pools] for m, pools in by_method.items()}
    first = methods[0]
    for m in methods[1:]:
        if ids[m] != ids[first]:
            raise DataError(f"decoding methods cover different examples: {first} has {len(ids[first])}, "
                            f"{m} has {len(ids[m])} (or a different order)")
    metrics = cfg.metrics
    top_method = "beam" if "beam" in by_method else first
    top_name = "top-beam" if top_method == "beam" else f"top-1 ({top_method})"
    rows = [selection_report(top_name, by_method[top_method], [0] * len(ids[first]), metrics)]
    for m in methods:
        pools = by_method[m]
        rows.append(selection_report(f"oracle {m}", pools,
                                     [{k: oracle_select(p, k) for k in metrics} for p in pools], metrics))
    merged = [merge_pools([by_method[m][i] for m in methods]) for i in range(len(ids[first]))]
    rows.append(selection_report("oracle all", merged,
                                 [{k: oracle_select(p, k) for k in metrics} for p in merged], metrics))
    counts = sorted({len(p) for m in methods for p in by_method[m]})
    notes = default_notes(metrics) + [f"candidates per method: {counts}",
                                      f"gain% row: oracle all vs {top_name}"]
    table = Table("Oracle analysis by decoding method", metrics, rows, notes=notes,
                  gain_row=f"oracle all|{top_name}")
    with output_lock(cfg):
        table.write(cfg.path("reports", name))
    return table


def cmd_consistency(cfg: RunConfig, checkpoint=None, pools_path=None) -> dict:
    checkpoint = Path(checkpoint) if checkpoint else cfg.path("checkpoints", "pairreranker", "best.pt")
    pools_path = Path(pools_path) if pools_path else cfg.path("pools", "test.jsonl")
    model = PairReranker.load(checkpoint)
    pools = read_pools(pools_path)
    rng = np.random.default_rng([cfg.seeds["shuffle"], 7])
    rep = consistency_rate(model, pools, cfg.raw["consistency"]["pairs_per_pool"], rng, _rule(cfg, model))
    out = rep.to_json()
    out.update({"checkpoint": str(checkpoint), "pools": str(pools_path),
                "reference_rate_full_scale": CONSISTENCY_REFERENCE,
                "note": "desk-scale rate is measured and reported; the reference is not asserted"})
    with output_lock(cfg):
        write_json(cfg.path("reports", "consistency.json"), out)
    return out


def cmd_import_external(cfg: RunConfig, path, name: str = "external") -> dict:
    pools = import_external_candidates(path)
    with output_lock(cfg):
        write_pools(cfg.path("pools", f"{name}.jsonl"), pools)
        _update_manifest(cfg, external={"source": str(path), "pools": len(pools)})
    return {"pools": len(pools), "transfer_mode": sum(p.transfer_mode for p in pools)}
