"""Command-line entry point: ``nlg-rerank <command> --config run.yaml [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import ConfigError, DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors, which is also our config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run config (YAML)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-model", type=int)
    p.add_argument("--seed-shuffle", type=int)
    p.add_argument("--metrics", help="comma-separated metric list")
    p.add_argument("--mode", choices=pipeline.MODES)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nlg-rerank", description="Candidate reranking for text generation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("generate", help="build candidate pools"))
    _common(sub.add_parser("score", help="score pools against references"))

    p = sub.add_parser("train", help="train a reranker")
    _common(p)
    p.add_argument("--method", default="pairreranker", choices=pipeline.METHODS)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("rerank", help="select one candidate per pool")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pools")
    p.add_argument("--name")

    p = sub.add_parser("evaluate", help="compare selections against baselines and the oracle")
    _common(p)
    p.add_argument("--selections", nargs="*", default=[])
    p.add_argument("--pools")
    p.add_argument("--name", default="evaluation")

    _common(sub.add_parser("oracle-analysis", help="oracle scores per decoding method"))

    p = sub.add_parser("consistency", help="slot-order self-consistency of a pair model")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pools")

    p = sub.add_parser("import-external", help="import candidates produced elsewhere")
    _common(p)
    p.add_argument("path")
    p.add_argument("--name", default="external")
    return parser


def _overrides(args) -> dict:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()] if args.metrics else None
    return {"output_dir": args.out, "seeds.data": args.seed_data, "seeds.model": args.seed_model,
            "seeds.shuffle": args.seed_shuffle, "metrics": metrics, "inference.mode": args.mode}


def _run(args) -> object:
    cfg = pipeline.load_config(args.config, _overrides(args))
    cmd = args.command
    if cmd == "generate":
        manifest = pipeline.cmd_generate(cfg)
        return {"pool_counts": manifest["pool_counts"], "manifest": str(cfg.path("manifest.json"))}
    if cmd == "score":
        return pipeline.cmd_score(cfg)
    if cmd == "train":
        return pipeline.cmd_train(cfg, args.method, args.resume)
    if cmd == "rerank":
        meta = pipeline.cmd_rerank(cfg, args.checkpoint, args.pools, args.name)
        meta.pop("comparisons_per_pool")
        return meta
    if cmd == "evaluate":
        table = pipeline.cmd_evaluate(cfg, args.selections, args.pools, args.name)
        print(table.to_text(), end="")
        return None
    if cmd == "oracle-analysis":
        print(pipeline.cmd_oracle_analysis(cfg).to_text(), end="")
        return None
    if cmd == "consistency":
        return pipeline.cmd_consistency(cfg, args.checkpoint, args.pools)
    return pipeline.cmd_import_external(cfg, args.path, args.name)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        logging.getLogger("nlg_rerank").debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
