"""Command-line entry point: ``implicit-etf {run,plot,validate}``.

Exit codes: 0 success, 1 config error, 2 run failure, 3 validation failure.
The output directory is taken from ``--output-dir``, then the
``IMPLICIT_ETF_OUTPUT_DIR`` environment variable, then the config file.
"""
import argparse
import dataclasses
import glob
import logging
import os
import sys

from .experiment import OUTPUT_DIR_ENV, PRESETS, ConfigError, config_from_dict, load_config, run_experiment
from .plots import PANELS, SchemaError, emit_plots
from .ufm import MODES
from .validate import MUTATIONS, validate_suite

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_VALIDATION = 0, 1, 2, 3


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser():
    parser = argparse.ArgumentParser(prog="implicit-etf", description="Nearest-ETF guided UFM training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (mode, seed) pair of an experiment")
    run.add_argument("config", nargs="?", help="YAML experiment config (defaults apply if omitted)")
    run.add_argument("--name")
    run.add_argument("--preset", choices=[*PRESETS, "custom"])
    run.add_argument("--modes", type=_str_list, help=f"comma-separated subset of {','.join(MODES)}")
    run.add_argument("--seeds", type=_int_list, help="comma-separated seed list")
    run.add_argument("--seed", type=int, help="run a single seed (overrides --seeds)")
    run.add_argument("--iterations", type=int)
    run.add_argument("--learning-rate", type=float)
    run.add_argument("--log-every", type=int)
    run.add_argument("--checkpoints", type=_int_list)
    run.add_argument("--output-dir")
    run.add_argument("--workers", type=int)
    run.add_argument("--record-timing", action="store_true", default=None)

    plot = sub.add_parser("plot", help="emit figure panels from run CSVs")
    plot.add_argument("csv", nargs="+", help="trace CSV paths or glob patterns")
    plot.add_argument("--panels", type=_str_list, default=tuple(PANELS), help=f"subset of {','.join(PANELS)}")
    plot.add_argument("--out", default="figures")
    plot.add_argument("--format", default="png", choices=["png", "pdf", "svg"])

    val = sub.add_parser("validate", help="run the oracle battery")
    val.add_argument("--mutate", choices=MUTATIONS, help="inject a known defect; the battery should fail")
    return parser


def resolve_config(args, environ=None):
    """Merge file values, then the environment, then CLI flags."""
    environ = os.environ if environ is None else environ
    config = load_config(args.config) if args.config else config_from_dict({})
    top = {}
    for key in ("name", "preset", "modes", "seeds", "checkpoints", "workers", "record_timing"):
        value = getattr(args, key)
        if value is not None:
            top[key] = value
    if args.seed is not None:
        top["seeds"] = (args.seed,)
    if args.output_dir is not None:
        top["output_dir"] = args.output_dir
    elif environ.get(OUTPUT_DIR_ENV):
        top["output_dir"] = environ[OUTPUT_DIR_ENV]
    train = {}
    for key in ("iterations", "learning_rate", "log_every"):
        value = getattr(args, key)
        if value is not None:
            train[key] = value
    config = dataclasses.replace(config, **top, train=dataclasses.replace(config.train, **train))
    return config.validate()


def _run(args):
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = run_experiment(config)
    for path in summary.csv_paths:
        print(path)
    if summary.summary_path:
        print(f"summary: {summary.summary_path}")
    for rid, message in summary.failures:
        print(f"run {rid} failed: {message}", file=sys.stderr)
    return EXIT_OK if summary.ok else EXIT_RUN


def _plot(args):
    paths = []
    for pattern in args.csv:
        matches = sorted(glob.glob(pattern))
        paths.extend(matches if matches else [pattern])
    # sidecar margin files share the run directory but are not traces
    paths = [p for p in paths if not p.endswith(".margins.csv")]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        print(f"no such CSV: {missing[0]}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        written = emit_plots(paths, args.panels, args.out, args.format)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in written:
        print(path)
    return EXIT_OK


def _validate(args):
    report = validate_suite(mutation=args.mutate)
    n_fail = sum(not c.passed for c in report.checks)
    total = sum(c.seconds for c in report.checks)
    print(f"{len(report.checks) - n_fail}/{len(report.checks)} checks passed in {total:.2f}s")
    return EXIT_OK if report.ok else EXIT_VALIDATION


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which would read as a run failure
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": _run, "plot": _plot, "validate": _validate}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
