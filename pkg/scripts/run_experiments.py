"""Run the sample sweeps in scripts/configs and print their summaries.

    python scripts/run_experiments.py                 # every config
    python scripts/run_experiments.py ula_snr --trials 20 --workers 4
"""
import argparse
import sys
from pathlib import Path

from nf_sgvb.config import load_config
from nf_sgvb.harness import resolve_workers, run_sweep

sys.path.insert(0, str(Path(__file__).parent))
from summarize import print_summary  # noqa: E402

CONFIG_DIR = Path(__file__).parent / "configs"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help="config names without .cfg (default: all)")
    ap.add_argument("--trials", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out-root", default=None, help="prefix for every output_dir")
    args = ap.parse_args()

    names = args.names or sorted(p.stem for p in CONFIG_DIR.glob("*.cfg"))
    for name in names:
        cfg = load_config(CONFIG_DIR / f"{name}.cfg")
        if args.trials:
            cfg.trials = args.trials
        out = Path(args.out_root) / name if args.out_root else Path(cfg.output_dir)
        print(f"== {name}: {cfg.sweep.variable} sweep, {len(cfg.sweep.values)} points x {cfg.trials} trials")
        res = run_sweep(cfg, workers=resolve_workers(args.workers), output_dir=out)
        print_summary(out / "results.csv")
        if res.failures:
            print(f"   {res.failures} failed estimator runs, see {out / 'timings.csv'}")


if __name__ == "__main__":
    main()
