"""Run an experiment config and emit every figure panel from its traces.

    python scripts/run_and_plot.py scripts/configs/ufm10.yaml --out figures/ufm10
"""
import argparse
import glob
import sys

from implicit_etf.experiment import default_output_dir, load_config, run_experiment
from implicit_etf.plots import PANELS, emit_plots


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("config")
    parser.add_argument("--out", default=None, help="figure directory (default: <experiment>/figures)")
    parser.add_argument("--skip-run", action="store_true", help="only re-plot existing traces")
    args = parser.parse_args()

    config = load_config(args.config)
    config.output_dir = default_output_dir(config.output_dir)
    if not args.skip_run:
        summary = run_experiment(config)
        for rid, message in summary.failures:
            print(f"run {rid} failed: {message}", file=sys.stderr)
    traces = [p for p in sorted(glob.glob(str(config.root / "runs" / "*.csv"))) if not p.endswith(".margins.csv")]
    out = args.out or str(config.root / "figures")
    for path in emit_plots(traces, PANELS, out):
        print(path)


if __name__ == "__main__":
    main()
