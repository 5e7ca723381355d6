"""Static figure panels from run CSVs: one curve per mode, median line with a min/max band."""
import csv
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import MARGIN_COLUMNS  # noqa: E402

# panel name -> (CSV column, axis label, log scale)
PANELS = {
    "loss": ("loss", "cross-entropy", True),
    "margin": ("mean_cosine_margin", "mean cosine margin", False),
    "margin_distribution": ("margin", "cosine margin", False),
    "nc1": ("nc1", "NC1", True),
    "nc3": ("nc3", "NC3", True),
    "equinorm": ("equinorm_gap", "equinorm gap", True),
}


class SchemaError(ValueError):
    """A CSV lacks a column the requested panel needs."""


def _read(path, required):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise SchemaError(f"{path}: missing column {column!r}")
        return list(reader)


def _band(curves):
    """Median/min/max over runs, aligned on the shared x grid."""
    xs = sorted(set().union(*(c.keys() for c in curves)))
    stacked = np.array([[c.get(x, np.nan) for x in xs] for c in curves], dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # columns that are NaN in every run
        return (
            np.array(xs),
            np.nanmedian(stacked, axis=0),
            np.nanmin(stacked, axis=0),
            np.nanmax(stacked, axis=0),
        )


def _margin_path(path):
    path = Path(path)
    return path.with_name(path.name[: -len(".csv")] + ".margins.csv")


def _trace_curves(csv_paths, column):
    curves = {}
    for path in csv_paths:
        rows = _read(path, ("mode", "iteration", column))
        if not rows:
            continue
        curve = {int(r["iteration"]): float(r[column]) if r[column] != "" else np.nan for r in rows}
        curves.setdefault(rows[0]["mode"], []).append(curve)
    return curves


def _margin_curves(csv_paths):
    curves = {}
    for path in csv_paths:
        mode_rows = _read(path, ("mode",))
        if not mode_rows:
            continue
        rows = _read(_margin_path(path), MARGIN_COLUMNS)
        # sorted per run, as in a distribution-over-examples plot
        margins = np.sort([float(r["margin"]) for r in rows])
        curves.setdefault(mode_rows[0]["mode"], []).append(dict(enumerate(margins)))
    return curves


def emit_plots(csv_paths, panels, out_dir, fmt="png"):
    """Write one image per requested panel and return their paths.

    ``csv_paths`` are per-run trace CSVs; the margin-distribution panel also
    reads each run's ``.margins.csv`` sidecar.
    """
    panels = list(panels)
    unknown = [p for p in panels if p not in PANELS]
    if unknown:
        raise ValueError(f"unknown panels {unknown}; choose from {sorted(PANELS)}")
    if not panels:
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for panel in panels:
        column, label, log_scale = PANELS[panel]
        if panel == "margin_distribution":
            curves, xlabel = _margin_curves(csv_paths), "training examples (sorted)"
        else:
            curves, xlabel = _trace_curves(csv_paths, column), "iteration"
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode in sorted(curves):
            x, med, lo, hi = _band(curves[mode])
            (line,) = ax.plot(x, med, label=mode)
            ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.25, linewidth=0)
        if log_scale and curves and all(np.nanmin(_band(c)[2]) > 0 for c in curves.values()):
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(label)
        if curves:
            ax.legend()
        fig.tight_layout()
        path = out_dir / f"{panel}.{fmt}"
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))
    return written
