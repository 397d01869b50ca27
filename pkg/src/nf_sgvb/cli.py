"""Command-line entry point: ``nf-sgvb sweep|single|presets``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .channel import InvalidConfig
from .config import PRESETS, load_config, preset
from .harness import resolve_workers, run_single, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nf-sgvb", description="Near-field channel estimation experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    sw = sub.add_parser("sweep", help="run a Monte-Carlo sweep")
    sw.add_argument("--config", required=True, help="config file")
    sw.add_argument("--trials", type=int, help="override the trial count")
    sw.add_argument("--seed", type=int, help="override the master seed")
    sw.add_argument("--out", help="output directory")
    sw.add_argument("--workers", type=int, default=1, help="worker processes (NF_SGVB_WORKERS overrides)")

    si = sub.add_parser("single", help="run one trial with diagnostics")
    si.add_argument("--config", required=True)
    si.add_argument("--dump-state", action="store_true", help="write the per-iteration trace")
    si.add_argument("--seed", type=int)
    si.add_argument("--out")

    pr = sub.add_parser("presets", help="list or show the built-in presets")
    pr.add_argument("action", choices=["list", "show"])
    pr.add_argument("name", nargs="?")
    return p


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    return cfg.validate()


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "presets":
            if args.action == "list":
                for name in PRESETS:
                    print(name)
                return EXIT_OK
            if not args.name:
                raise InvalidConfig("presets show needs a preset name")
            print(preset(args.name).to_text(), end="")
            return EXIT_OK

        cfg = _load(args)
        if args.command == "sweep":
            result = run_sweep(cfg, workers=resolve_workers(args.workers))
            print(f"wrote {len(result.records)} rows to {result.output_dir}")
            if result.failures:
                print(f"{result.failures} estimator runs failed; see timings.csv", file=sys.stderr)
                return EXIT_PARTIAL
            return EXIT_OK

        report = run_single(cfg, dump_state=args.dump_state)
        for r in report.records:
            status = f"FAILED ({r.error})" if r.failed else f"nmse {r.nmse_channel_db:.2f} dB, iters {r.iterations}"
            print(f"{r.estimator:10s} {status}")
        if report.sgvb is not None:
            res = report.sgvb
            y_norm = float((abs(report.observation.y) ** 2).sum() ** 0.5)
            resid = float((abs(res.state.residual) ** 2).sum() ** 0.5)
            print(f"sgvb residual {resid:.3e} (relative {resid / max(y_norm, 1e-300):.3e}), converged={res.converged}")
        if report.trace_path is not None:
            print(f"trace written to {report.trace_path}")
        return EXIT_PARTIAL if any(r.failed for r in report.records) else EXIT_OK
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
