"""Command line entry point: ``fedrobust run|sweep|verify``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from fedrobust.harness.config import ConfigError, ExperimentConfig, dump_config, load_config
from fedrobust.harness.engine import final_metrics, run_experiment
from fedrobust.harness.results import emit_results

log = logging.getLogger("fedrobust")


def _run_one(cfg: ExperimentConfig, out: Path, stem: str) -> dict:
    records = run_experiment(cfg)
    csv_path, _ = emit_results(records, out / f"{stem}.csv", cfg.to_dict())
    metrics = final_metrics(records)
    log.info("%s: final test error %s -> %s", stem, metrics["final_test_error"], csv_path)
    return metrics


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    out = Path(args.out)
    metrics = _run_one(cfg, out, "results")
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(f"final_test_error={metrics['final_test_error']}")
    if metrics["final_attack_success"] is not None:
        print(f"final_attack_success={metrics['final_attack_success']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if "=" not in args.vary:
        raise ConfigError("--vary expects section.key=v1,v2,...")
    key, values = args.vary.split("=", 1)
    out = Path(args.out)
    for value in [v for v in values.split(",") if v.strip()]:
        variant = cfg.with_values(**{key.strip(): value.strip()})
        stem = f"{key.strip().replace('.', '_')}={value.strip()}"
        metrics = _run_one(variant, out, stem)
        print(f"{key}={value}\tfinal_test_error={metrics['final_test_error']}")
    return 0


def cmd_verify(args) -> int:
    from fedrobust.acceptance import run_battery

    results = run_battery(quick=args.quick)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrobust", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a single experiment")
    run.add_argument("config", nargs="?", help="INI config (defaults to the standard task)")
    run.add_argument("--out", default="out", help="artifact directory")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="grid over one config key")
    sweep.add_argument("config", nargs="?")
    sweep.add_argument("--vary", required=True, help="section.key=v1,v2,...")
    sweep.add_argument("--out", default="out")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="run the acceptance battery")
    verify.add_argument("--quick", action="store_true", help="skip the training-based criteria")
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
