"""Command-line entry point: ``parc <subcommand> --config run.yaml``.

Exit codes: 0 success, 1 config or input error, 2 incomplete run,
3 transport failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CellError, ParcError, TransportError
from .runner import (
    ExperimentConfig,
    _embedding_cache,
    delta_table,
    format_manifest,
    load_config,
    prepare_pool,
    read_report,
    run_experiment,
    sweep,
)
from .vector_store import save_pool

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INCOMPLETE = 2
EXIT_TRANSPORT = 3

log = logging.getLogger("parc")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML or JSON experiment config")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override, e.g. limits.parallelism=4 (repeatable)",
    )
    p.add_argument("--limit", type=int, default=None, metavar="N", help="score only the first N examples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parc", description="Cross-lingual retrieval-augmented prompting experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed-pool", help="embed the sentence pool and write a pool cache file")
    _config_args(p)
    p.add_argument("--out", default=None, help="output path (default: <cache_dir>/pool-embedded.parcpool)")

    p = sub.add_parser("self-predict", help="label an unlabeled pool with the model's own predictions")
    _config_args(p)
    p.add_argument("--out", default=None, help="also copy the labeled pool to this path")

    p = sub.add_parser("run", help="run every (template, k) cell of the config")
    _config_args(p)
    p.add_argument("--dry-run", action="store_true", help="render prompts only; call no backend")

    p = sub.add_parser("sweep", help="run all cells and emit the zero-shot delta table")
    _config_args(p)

    p = sub.add_parser("report", help="pretty-print a run manifest")
    p.add_argument("manifest", help="manifest JSON file written by run/sweep")
    p.add_argument("--deltas", action="store_true", help="also print the delta-vs-zero-shot table")
    p.add_argument("--average", default="macro", choices=["macro", "weighted", "accuracy"])
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.override)
    if args.limit is not None:
        overrides.append(f"limits.max_examples={args.limit}")
    return load_config(args.config, overrides)


def _cmd_embed_pool(args: argparse.Namespace) -> int:
    config = _load(args)
    if not config.pool_path or config.backends.embedding is None:
        print("config needs pool_path and an embedding backend", file=sys.stderr)
        return EXIT_CONFIG
    cache = _embedding_cache(config)
    pool = prepare_pool(config.model_copy(update={"self_predict": None}), cache)
    assert pool is not None and cache is not None
    cache.flush()
    out = Path(args.out) if args.out else config.cache_path / "pool-embedded.parcpool"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pool(pool, out)
    print(f"{out}  entries={pool.size} embedded={pool.embedded_count} checksum={pool.checksum()[:16]}")
    return EXIT_OK


def _cmd_self_predict(args: argparse.Namespace) -> int:
    config = _load(args)
    if config.self_predict is None:
        print("config has no self_predict section", file=sys.stderr)
        return EXIT_CONFIG
    cache = _embedding_cache(config)
    pool = prepare_pool(config, cache)
    assert pool is not None
    if cache is not None:
        cache.flush()
    if args.out:
        save_pool(pool, args.out)
    counts: dict[str, int] = {}
    for e in pool.entries:
        counts[str(e.label)] = counts.get(str(e.label), 0) + 1
    print(json.dumps({"entries": pool.size, "label_counts": counts, "checksum": pool.checksum()}, indent=2))
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    manifest = run_experiment(config, dry_run=args.dry_run)
    print(format_manifest(manifest) if not args.dry_run else f"rendered {sum(len(c.records) for c in manifest.cells)} prompts")
    return EXIT_INCOMPLETE if manifest.incomplete else EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    manifest, summary = sweep(config)
    print(format_manifest(manifest))
    print()
    print(f"{'template':<24}{'k':>3}{'zero-shot':>11}{'value':>8}{'delta':>8}")
    for row in summary.rows:
        print(f"{row.template_id:<24}{row.k:>3}{row.zero_shot:>11.2f}{row.value:>8.2f}{row.delta:>+8.2f}")
    return EXIT_INCOMPLETE if manifest.incomplete else EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    manifest = read_report(args.manifest)
    print(format_manifest(manifest))
    if args.deltas:
        summary = delta_table(manifest, args.average)
        print()
        for row in summary.rows:
            print(f"{row.template_id:<24}k={row.k:<3}{row.delta:+.2f}")
    return EXIT_OK


COMMANDS = {
    "embed-pool": _cmd_embed_pool,
    "self-predict": _cmd_self_predict,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except CellError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT if isinstance(exc.cause, TransportError) else EXIT_INCOMPLETE
    except (ParcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
