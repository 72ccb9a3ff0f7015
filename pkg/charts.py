from __future__ import annotations

# charts.py
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from metrics import INSTANCE_KS, read_metrics_csv  # noqa: E402
from observability import emit_event  # noqa: E402

# Fixed hashsalt and no Date metadata: SVG bytes are stable across runs.
plt.rcParams.update(
    {
        "svg.hashsalt": "metalabel",
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "legend.frameon": False,
    }
)
_SVG_META = {"Date": None}


def trailing_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Mean over the last ``window`` finite values at each position (shorter at the start)."""
    finite = np.isfinite(values)
    sums = np.cumsum(np.where(finite, values, 0.0))
    counts = np.cumsum(finite)
    lag_sums = np.concatenate([np.zeros(window), sums[:-window]]) if len(values) > window else np.zeros_like(sums)
    lag_counts = np.concatenate([np.zeros(window), counts[:-window]]) if len(values) > window else np.zeros_like(counts)
    n = counts - lag_counts
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, (sums - lag_sums) / np.maximum(n, 1), np.nan)


def _series(rows: list[dict[str, str]], column: str) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray], int | None]:
    by_k: dict[int, dict[int, float]] = defaultdict(dict)
    first_test = None
    for row in rows:
        batch, k = int(row["batch"]), int(row["k"])
        by_k[k][batch] = float(row[column]) if row[column] else np.nan
        if row["split"] == "test" and (first_test is None or batch < first_test):
            first_test = batch
    xs, ys = {}, {}
    for k, points in by_k.items():
        batches = np.array(sorted(points))
        xs[k] = batches
        ys[k] = np.array([points[b] for b in batches])
    return xs, ys, first_test


def plot_instance_curves(metrics_csv: Path, out_svg: Path, column: str, ylabel: str, window: int = 500) -> Path:
    rows = read_metrics_csv(metrics_csv)
    xs, ys, first_test = _series(rows, column)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for k in INSTANCE_KS:
        if k in xs:
            ax.plot(xs[k], 100.0 * trailing_mean(ys[k], window), label=f"instans {k}", linewidth=1.2)
    if first_test is not None:
        ax.axvline(first_test, color="0.5", linestyle="--", linewidth=0.8)
    ax.set_xlabel("episodbatch")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 100)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return Path(out_svg)


def plot_probe(probe_csvs: list[Path], out_svg: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for path in sorted(probe_csvs):
        with Path(path).open("r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        steps = [int(r["step"]) for r in rows]
        pct = [float(r["request_pct"]) for r in rows]
        ax.plot(steps, pct, marker="o", linewidth=1.2, label=f"prefix {rows[0]['prefix_len']}")
    ax.set_xlabel("tidssteg")
    ax.set_ylabel("etikettförfrågningar (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return Path(out_svg)


def emit_charts(run_dir: Path, window: int = 500) -> list[Path]:
    """Write the SVG charts that the CSVs in ``run_dir`` support."""
    run_dir = Path(run_dir)
    written: list[Path] = []
    metrics_csv = run_dir / "metrics.csv"
    if metrics_csv.exists():
        written.append(plot_instance_curves(metrics_csv, run_dir / "requests.svg", "request_rate", "etikettförfrågningar (%)", window))
        written.append(plot_instance_curves(metrics_csv, run_dir / "accuracy.svg", "accuracy", "träffsäkerhet (%)", window))
    probes = sorted(run_dir.glob("probe_*.csv"))
    if probes:
        written.append(plot_probe(probes, run_dir / "probe.svg"))
    emit_event("charts_written", run_dir=str(run_dir), files=[p.name for p in written])
    return written
