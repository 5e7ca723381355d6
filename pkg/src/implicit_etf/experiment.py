"""Multi-seed UFM experiments: configs, per-run CSV traces and checkpoint summaries.

Layout of an experiment directory ``<output_dir>/<name>/``::

    config.yaml                    effective (merged) configuration
    runs/<run_id>.csv              one MetricsRow per logging interval
    runs/<run_id>.margins.csv      per-sample cosine margins at the last step
    summary.csv                    median/min/max across seeds at each checkpoint

For full-batch UFM one iteration is one pass over the data, so "iteration"
and "epoch" coincide.
"""
import csv
import dataclasses
import logging
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .ufm import MODES, TrainConfig, evaluate, make_ufm, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "IMPLICIT_ETF_OUTPUT_DIR"

PRESETS = {
    "ufm10": (512, 10, 1000),
    "ufm100": (1024, 100, 5000),
    "ufm200": (1024, 200, 5000),
    "ufm1000": (1024, 1000, 10000),
}

METRIC_COLUMNS = (
    "nc1",
    "nc2",
    "nc3",
    "nc4_agreement",
    "equinorm_gap",
    "mean_cosine_margin",
)
CSV_COLUMNS = (
    "run_id",
    "seed",
    "mode",
    "iteration",
    "loss",
    "train_top1",
    *METRIC_COLUMNS,
    "inner_solve_iterations",
    "inner_solve_time",
)
MARGIN_COLUMNS = ("sample", "label", "margin")
SUMMARY_COLUMNS = ("mode", "checkpoint", "iteration", "metric", "median", "min", "max", "n_runs")
SUMMARY_METRICS = ("loss", "train_top1", *METRIC_COLUMNS)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    seed: int
    mode: str
    iteration: int
    loss: float
    train_top1: float
    nc1: float
    nc2: float
    nc3: float
    nc4_agreement: float
    equinorm_gap: float
    mean_cosine_margin: float
    inner_solve_iterations: int
    inner_solve_time: Optional[float]  # None unless timing is recorded

    def as_csv(self):
        out = []
        for name in CSV_COLUMNS:
            value = getattr(self, name)
            if value is None:
                out.append("")
            elif isinstance(value, float):
                out.append(repr(value))  # shortest exact round-trip form
            else:
                out.append(str(value))
        return out


@dataclass
class ExperimentConfig:
    name: str = "ufm10"
    preset: str = "ufm10"
    d: Optional[int] = None
    C: Optional[int] = None
    N: Optional[int] = None
    modes: tuple = MODES
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    workers: int = 1
    checkpoints: tuple = (500, 2000)
    record_timing: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def dims(self):
        if self.preset == "custom":
            return self.d, self.C, self.N
        return PRESETS[self.preset]

    @property
    def root(self):
        return Path(self.output_dir) / self.name

    def validate(self):
        if self.preset not in PRESETS and self.preset != "custom":
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)} or 'custom'")
        if self.preset == "custom":
            if None in (self.d, self.C, self.N):
                raise ConfigError("preset 'custom' needs d, C and N")
        elif any(v is not None for v in (self.d, self.C, self.N)):
            raise ConfigError(f"d, C and N are fixed by preset {self.preset!r}; use preset: custom")
        d, C, N = self.dims
        if not (isinstance(d, int) and isinstance(C, int) and isinstance(N, int)):
            raise ConfigError("d, C and N must be integers")
        if C < 2 or d < C or N < C:
            raise ConfigError(f"need N >= C >= 2 and d >= C, got d={d}, C={C}, N={N}")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}, got {list(self.modes)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        t = self.train
        if t.iterations < 1 or t.log_every < 1:
            raise ConfigError("train.iterations and train.log_every must be positive")
        if t.learning_rate < 0 or t.tau <= 0 or t.delta < 0:
            raise ConfigError("need learning_rate >= 0, tau > 0 and delta >= 0")
        if t.init_scheme not in ("canonical", "haar_random"):
            raise ConfigError(f"unknown init_scheme {t.init_scheme!r}")
        if t.fixed_direction not in ("canonical", "haar_random"):
            raise ConfigError(f"unknown fixed_direction {t.fixed_direction!r}")
        return self

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["modes"] = list(self.modes)
        out["seeds"] = list(self.seeds)
        out["checkpoints"] = list(self.checkpoints)
        out["schema_version"] = SCHEMA_VERSION
        return out


def config_from_dict(data):
    """Build an ``ExperimentConfig`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = dict(data)
    data.pop("schema_version", None)
    train_data = data.pop("train", None) or {}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"train"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    train_known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(train_data) - train_known)
    if unknown:
        raise ConfigError(f"unknown train keys: {unknown}")
    for key in ("modes", "seeds", "checkpoints"):
        if key in data:
            data[key] = tuple(data[key])
    try:
        config = ExperimentConfig(**data, train=TrainConfig(**train_data))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return config.validate()


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return config_from_dict(data)


def run_id(config, mode, seed):
    return f"{config.name}-{mode}-s{seed}"


def _rows_for(rid, seed, mode, trace, record_timing):
    rows = []
    for r in trace:
        m = r.metrics
        rows.append(
            MetricsRow(
                run_id=rid,
                seed=seed,
                mode=mode,
                iteration=r.iteration,
                loss=float(r.loss),
                train_top1=float(r.train_top1),
                nc1=float(m.nc1) if m else math.nan,
                nc2=float(m.nc2) if m else math.nan,
                nc3=float(m.nc3) if m else math.nan,
                nc4_agreement=float(m.nc4_agreement) if m else math.nan,
                equinorm_gap=float(m.equinorm_gap) if m else math.nan,
                mean_cosine_margin=float(m.mean_cosine_margin) if m else math.nan,
                inner_solve_iterations=int(r.inner_solve_iterations),
                inner_solve_time=float(r.inner_solve_time) if record_timing else None,
            )
        )
    return rows


def write_rows(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())


def run_single(config, mode, seed):
    """Train one (mode, seed) pair and write its CSVs. Returns the trace CSV path."""
    d, C, N = config.dims
    tc = dataclasses.replace(config.train, seed=seed)
    rid = run_id(config, mode, seed)
    model = make_ufm(d, C, N, mode, seed=seed, fixed_direction=tc.fixed_direction)
    result = train(model, tc)
    runs = config.root / "runs"
    path = runs / f"{rid}.csv"
    write_rows(path, _rows_for(rid, seed, mode, result.trace, config.record_timing))
    # end-of-training margins: final features against the last step's classifier
    last = result.trace[-1]
    final = dataclasses.replace(result.model, classifier=last.classifier, bias=last.bias)
    _, _, metrics = evaluate(final, tc, keep_margins=True)
    with open(runs / f"{rid}.margins.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MARGIN_COLUMNS)
        for i, (label, margin) in enumerate(zip(final.labels, metrics.cosine_margins)):
            writer.writerow([i, int(label), repr(float(margin))])
    return str(path)


def _run_job(args):
    config, mode, seed = args
    try:
        return mode, seed, run_single(config, mode, seed), None
    except Exception as exc:  # sibling runs must not be aborted
        log.exception("run %s failed", run_id(config, mode, seed))
        return mode, seed, None, f"{type(exc).__name__}: {exc}"


@dataclass
class ExperimentSummary:
    csv_paths: list
    summary_path: Optional[str]
    failures: list  # (run_id, message)

    @property
    def ok(self):
        return not self.failures


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _value(text):
    return math.nan if text == "" else float(text)


def summarise(csv_paths, checkpoints):
    """Median, min and max across runs of every metric at each checkpoint.

    A checkpoint beyond a run's last logged iteration uses that run's last row.
    Rows are returned sorted by (mode, checkpoint, metric).
    """
    by_mode = {}
    for path in csv_paths:
        rows = read_rows(path)
        if rows:
            by_mode.setdefault(rows[0]["mode"], []).append(rows)
    out = []
    for mode in sorted(by_mode):
        for cp in sorted(checkpoints):
            picked = []
            for rows in by_mode[mode]:
                eligible = [r for r in rows if int(r["iteration"]) <= cp]
                picked.append(eligible[-1] if eligible else rows[0])
            iteration = max(int(r["iteration"]) for r in picked)
            for metric in SUMMARY_METRICS:
                values = [_value(r[metric]) for r in picked]
                values = [v for v in values if not math.isnan(v)]
                if not values:
                    continue
                out.append(
                    {
                        "mode": mode,
                        "checkpoint": cp,
                        "iteration": iteration,
                        "metric": metric,
                        "median": statistics.median(values),
                        "min": min(values),
                        "max": max(values),
                        "n_runs": len(values),
                    }
                )
    return out


def write_summary(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in SUMMARY_COLUMNS)])


def run_experiment(config, workers=None):
    """Run every (mode, seed) pair, then write the checkpoint summary."""
    config.validate()
    root = config.root
    (root / "runs").mkdir(parents=True, exist_ok=True)
    with open(root / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
    jobs = [(config, mode, seed) for mode in config.modes for seed in config.seeds]
    n_workers = min(workers or config.workers, len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]
    paths = [p for _, _, p, err in results if err is None]
    failures = [(run_id(config, m, s), err) for m, s, _, err in results if err is not None]
    summary_path = None
    if paths:
        summary_path = str(root / "summary.csv")
        write_summary(summary_path, summarise(paths, config.checkpoints))
    return ExperimentSummary(paths, summary_path, failures)


def default_output_dir(fallback="runs"):
    return os.environ.get(OUTPUT_DIR_ENV, fallback)
