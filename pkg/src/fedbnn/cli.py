"""Command-line entry point: ``fedbnn {run,accountant,partition-preview,report}``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, override
from .data import InsufficientData
from .experiment import preview_partition, run_experiment, summarize_round_log, write_artifacts
from .metrics import parse_calibration_csv
from .privacy import AccountantConfig, DpParams, SensitivityBound, accountant_row

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("fedbnn")

ACCOUNTANT_COLUMNS = ["epsilon", "delta", "E", "K", "mode", "rho_per_query", "rho_total", "sigma",
                      "epsilon_roundtrip"]


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("FEDBNN_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load(args):
    cfg = load_config(args.config)
    return override(cfg, seed=args.seed, output_dir=args.output)


def cmd_run(args) -> int:
    cfg = _load(args)
    result = run_experiment(cfg, workers=args.workers)
    summary = write_artifacts(result, cfg.output_dir)
    print(json.dumps({"output_dir": cfg.output_dir,
                      "final_mean_accuracy": summary["final_mean_accuracy"]}))
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_accountant(args) -> int:
    """One CSV row per (epsilon, E, K) combination."""
    if args.mode == "per_example":
        ks = _ints(args.ad_size)
    else:
        ks = [1] if args.queries is None else _ints(args.queries)
    try:
        sens = SensitivityBound(args.sensitivity_sq)
        rows = []
        for eps, E, K in itertools.product(_floats(args.epsilon), _ints(args.rounds), ks):
            r = accountant_row(DpParams(eps, args.delta), AccountantConfig(E, K), sens)
            r["mode"] = args.mode
            rows.append(r)
    except ValueError as e:
        raise UsageError(str(e)) from None
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(ACCOUNTANT_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in ACCOUNTANT_COLUMNS])
    return EXIT_OK


def cmd_partition_preview(args) -> int:
    cfg = _load(args)
    print(json.dumps(preview_partition(cfg).manifest(), indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    summary = summarize_round_log(Path(args.round_log).read_text())
    if args.calibration:
        cal = parse_calibration_csv(Path(args.calibration).read_text())
        summary["ece"] = cal.ece
        summary["mce"] = cal.mce
        summary["calibration_bins"] = [
            {"count": int(c), "accuracy": float(a), "mean_confidence": float(m)}
            for c, a, m in zip(cal.bins.counts, cal.bins.accuracy, cal.bins.confidence)]
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbnn", description="Federated Bayesian networks via "
                                "output sharing on an alignment dataset.")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--output", help="override the output directory")

    r = sub.add_parser("run", help="run an experiment and write its artifacts")
    config_args(r)
    r.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="clients trained concurrently (default: all cores)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("accountant", help="print the privacy accountant table as CSV")
    a.add_argument("--epsilon", required=True, help="target epsilon(s), comma-separated")
    a.add_argument("--delta", type=float, default=1e-5)
    a.add_argument("--rounds", default="100", help="global rounds E, comma-separated")
    a.add_argument("--mode", choices=["per_example", "per_release"], default="per_release",
                   help="per_example: K = |AD| queries per round; per_release: one")
    a.add_argument("--ad-size", default="2000", help="|AD| for per_example mode")
    a.add_argument("--queries", help="explicit K values for per_release mode")
    a.add_argument("--sensitivity-sq", type=float, default=2.0)
    a.set_defaults(func=cmd_accountant)

    pp = sub.add_parser("partition-preview", help="print the client partition manifest")
    config_args(pp)
    pp.set_defaults(func=cmd_partition_preview)

    rep = sub.add_parser("report", help="re-derive a summary from a round log")
    rep.add_argument("round_log")
    rep.add_argument("--calibration", help="calibration CSV to include")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientData as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any failure during a run is a runtime failure
        log.debug("run failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
