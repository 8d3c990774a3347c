"""Aggregation of per-cell metrics into summary tables, CSV and plots.

Summary statistics are quantized to 6 significant digits at construction so
the emitted CSV is an exact serialization of the rows. Improvements are the
exact float64 difference of the stored vanilla and scheme means.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = [
    "scheme",
    "count",
    "mean_error",
    "std_error",
    "mean_improvement",
    "std_improvement",
    "pseudo_label_acc",
    "mean_added",
]

SCHEME_ORDER = {"vanilla": 0, "basic": 1, "rejection": 2}


@dataclass(frozen=True)
class MetricsRow:
    """One summary line per (scheme, count): Table-1 style statistics."""

    scheme: str
    count: int
    mean_error: float
    std_error: float
    mean_improvement: float | None
    std_improvement: float | None
    pseudo_label_acc: float | None
    mean_added: float


def q6(x):
    """Quantize to 6 significant decimal digits (the reporting resolution)."""
    if x is None:
        return None
    return float(f"{float(x):.6g}")


def _fmt(x) -> str:
    if x is None:
        return ""
    s = f"{x:.6g}"
    # improvements are exact differences of quantized means and may need a
    # couple of extra digits to stay lossless
    if float(s) != x:
        s = repr(x)
    return s


def _sample_std(values) -> float:
    # n-1 standard deviation; 0 by convention for a single observation
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def load_cell_metrics(run_dir) -> list[dict]:
    cells_dir = Path(run_dir) / "cells"
    if not cells_dir.is_dir():
        raise FileNotFoundError(f"no cells directory under {run_dir}")
    out = []
    for path in sorted(cells_dir.glob("*/metrics.json")):
        out.append(json.loads(path.read_text()))
    if not out:
        raise FileNotFoundError(f"no completed cell metrics under {run_dir}")
    return out


def summarize(run_dir) -> list[MetricsRow]:
    """Aggregate completed cells into one row per (scheme, count).

    Best error per cell is its minimum test error over all recorded rounds;
    rows report mean and sample std across seeds. Improvement is vanilla mean
    minus scheme mean at the same count, with its std over per-seed paired
    differences; it is absent when the vanilla cells are missing.
    """
    cells = load_cell_metrics(run_dir)
    by_group: dict = {}
    for cell in cells:
        by_group.setdefault((cell["scheme"], cell["count"]), []).append(cell)

    vanilla_errors = {
        count: {c["seed_index"]: c["best_error"] for c in group}
        for (scheme, count), group in by_group.items()
        if scheme == "vanilla"
    }

    rows = []
    for (scheme, count), group in sorted(
        by_group.items(), key=lambda kv: (kv[0][1], SCHEME_ORDER.get(kv[0][0], 9))
    ):
        errors = {c["seed_index"]: c["best_error"] for c in group}
        mean_error = q6(np.mean(list(errors.values())))
        std_error = q6(_sample_std(list(errors.values())))

        if scheme == "vanilla":
            mean_impr, std_impr = 0.0, 0.0
        elif count in vanilla_errors:
            van = vanilla_errors[count]
            van_mean = q6(np.mean(list(van.values())))
            # exact difference of the stored (quantized) means
            mean_impr = van_mean - mean_error
            shared = sorted(set(van) & set(errors))
            diffs = [van[s] - errors[s] for s in shared]
            std_impr = q6(_sample_std(diffs)) if diffs else None
        else:
            mean_impr, std_impr = None, None

        accs = [
            c["pseudo_label_accuracy"]
            for c in group
            if c.get("pseudo_label_accuracy") is not None
        ]
        added = [c.get("added_per_round", 0.0) for c in group]
        rows.append(
            MetricsRow(
                scheme=scheme,
                count=count,
                mean_error=mean_error,
                std_error=std_error,
                mean_improvement=mean_impr,
                std_improvement=std_impr,
                pseudo_label_acc=q6(np.mean(accs)) if accs else None,
                mean_added=q6(np.mean(added)),
            )
        )
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.scheme,
                    row.count,
                    _fmt(row.mean_error),
                    _fmt(row.std_error),
                    _fmt(row.mean_improvement),
                    _fmt(row.std_improvement),
                    _fmt(row.pseudo_label_acc),
                    _fmt(row.mean_added),
                ]
            )


def read_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {reader.fieldnames}")
        for rec in reader:
            rows.append(
                MetricsRow(
                    scheme=rec["scheme"],
                    count=int(rec["count"]),
                    mean_error=float(rec["mean_error"]),
                    std_error=float(rec["std_error"]),
                    mean_improvement=float(rec["mean_improvement"])
                    if rec["mean_improvement"]
                    else None,
                    std_improvement=float(rec["std_improvement"])
                    if rec["std_improvement"]
                    else None,
                    pseudo_label_acc=float(rec["pseudo_label_acc"])
                    if rec["pseudo_label_acc"]
                    else None,
                    mean_added=float(rec["mean_added"]),
                )
            )
    return rows


def pseudo_label_accuracy(records, shadow_labels: dict) -> float | None:
    """Fraction of real-source added records whose final label matches the
    shadow truth. Generated-source records are excluded; None when no
    real-source records exist."""
    real = [r for r in records if _get(r, "source") == "real"]
    if not real:
        return None
    missing = [r for r in real if _get(r, "example_id") not in shadow_labels]
    if missing:
        raise KeyError(
            f"no shadow label for ids {[_get(r, 'example_id') for r in missing][:5]}"
        )
    hits = sum(
        1 for r in real if shadow_labels[_get(r, "example_id")] == _get(r, "label")
    )
    return hits / len(real)


def _get(record, name):
    if isinstance(record, dict):
        return record[name]
    return getattr(record, name)


def error_series(run_dir) -> dict:
    """Per (scheme, count): round-indexed test error means and stds.

    Returns {(scheme, count): {"x": [...], "mean": [...], "std": [...],
    "n_seeds": int}} where x runs over the recorded rounds in order (the
    final retrain is the last point).
    """
    cells = load_cell_metrics(run_dir)
    by_group: dict = {}
    for cell in cells:
        key = (cell["scheme"], cell["count"])
        errors = [r["test_error"] for r in cell["rounds"]]
        by_group.setdefault(key, []).append(errors)

    out = {}
    for key, series in by_group.items():
        if len({len(s) for s in series}) != 1:
            raise ValueError(f"inconsistent round counts across seeds for {key}")
        arr = np.asarray(series, dtype=np.float64)
        out[key] = {
            "x": list(range(arr.shape[1])),
            "mean": arr.mean(axis=0).tolist(),
            "std": arr.std(axis=0, ddof=1).tolist() if len(series) > 1 else None,
            "n_seeds": len(series),
        }
    return out


def plot_error_vs_round(run_dir, out_path):
    """Mean test error vs round per (scheme, count), with a +-1 std band when
    several seeds exist. Writes a raster or vector file per the extension."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = error_series(run_dir)
    if not series:
        raise ValueError(f"no round records under {run_dir}")

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (scheme, count), data in sorted(
        series.items(), key=lambda kv: (kv[0][1], SCHEME_ORDER.get(kv[0][0], 9))
    ):
        x, mean = data["x"], data["mean"]
        if len(x) == 1:
            ax.axhline(mean[0], linestyle="--", alpha=0.7,
                       label=f"{scheme} (count {count})")
            continue
        line, = ax.plot(x, mean, marker="o", label=f"{scheme} (count {count})")
        if data["std"] is not None:
            lo = np.asarray(mean) - np.asarray(data["std"])
            hi = np.asarray(mean) + np.asarray(data["std"])
            ax.fill_between(x, lo, hi, alpha=0.2, color=line.get_color())
    ax.set_xlabel("self-training round (last point = final retrain)")
    ax.set_ylabel("test error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)
