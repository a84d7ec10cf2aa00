"""Command-line entry point.

    fedfor run --config exp.cfg [--out DIR] [--workers N] [--override key=value ...]
    fedfor summarize --in DIR

Exit codes: 0 success, 1 a run failed, 2 the configuration is invalid.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, ExperimentConfig, parse_config, parse_pairs, serialize_config
from .harness import run_single
from .metrics import RunHistory, emit_csv, read_csv, summarize
from .server import RoundRecord

log = logging.getLogger("fedfor")

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2
CONFIG_NAME = "config.cfg"
SUMMARY_NAME = "summary.csv"


def metrics_name(method: str, seed: int) -> str:
    return f"metrics_{method}_seed{seed}.csv"


def _run_cell(cfg: ExperimentConfig, method: str, seed: int, out_dir: str) -> RunHistory:
    history = run_single(cfg, method, seed)
    emit_csv(history, Path(out_dir) / metrics_name(method, seed))
    return history


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run every (method, seed) cell and write metrics plus one summary CSV."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(serialize_config(cfg), encoding="utf-8")
    cells = [(m, s) for m in cfg.methods for s in cfg.seeds]
    histories, failed = [], 0
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_cell, cfg, m, s, str(out)) for m, s in cells]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except Exception as exc:  # reported per cell, other cells still finish
                    outcomes.append(exc)
    else:
        outcomes = []
        for m, s in cells:
            try:
                outcomes.append(_run_cell(cfg, m, s, str(out)))
            except Exception as exc:
                outcomes.append(exc)
    for (m, s), result in zip(cells, outcomes):
        if isinstance(result, Exception):
            log.error("run failed: %s", result)
            failed += 1
        else:
            histories.append(result)
            log.info("%s seed %d: best acc %.4f", m, s, max(result.accuracies))
    if histories:
        emit_csv(summarize(histories, cfg.local_epochs, cfg.acc_target), out / SUMMARY_NAME,
                 digest=cfg.digest)
    return EXIT_RUN_FAILED if failed else EXIT_OK


def load_histories(directory) -> list[RunHistory]:
    histories = []
    for path in sorted(Path(directory).glob("metrics_*.csv")):
        digest, rows = read_csv(path)
        if not rows:
            continue
        records = [RoundRecord(round=r["round"], val_acc=r["val_acc"], s2c_floats=r["s2c_floats"],
                               c2s_floats=r["c2s_floats"], participants=(),
                               labelmap_version=r["labelmap_version"]) for r in rows]
        histories.append(RunHistory(rows[0]["method"], rows[0]["seed"], digest or "", records))
    return histories


def summarize_dir(directory) -> Path:
    directory = Path(directory)
    cfg_path = directory / CONFIG_NAME
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} not found")
    cfg = parse_config(cfg_path.read_text(encoding="utf-8"))
    histories = load_histories(directory)
    if not histories:
        raise FileNotFoundError(f"no metrics files in {directory}")
    return emit_csv(summarize(histories, cfg.local_epochs, cfg.acc_target),
                    directory / SUMMARY_NAME, digest=histories[0].digest)


def _overrides(items) -> dict[str, str]:
    text = "\n".join(items or [])
    return parse_pairs(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfor", description="Federated optimization simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the configured method x seed matrix")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--workers", type=int)
    run.add_argument("--override", action="append", metavar="KEY=VALUE")
    summ = sub.add_parser("summarize", help="rebuild summary.csv from per-run metrics")
    summ.add_argument("--in", dest="in_dir", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    if args.command == "summarize":
        try:
            path = summarize_dir(args.in_dir)
        except (OSError, ConfigError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUN_FAILED
        print(path.read_text(encoding="utf-8"), end="")
        return EXIT_OK

    try:
        text = Path(args.config).read_text(encoding="utf-8")
        overrides = _overrides(args.override)
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.workers is not None:
            overrides["workers"] = str(args.workers)
        cfg = parse_config(text, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run_experiment(cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
