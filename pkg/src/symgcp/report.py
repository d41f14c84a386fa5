"""Render figures from run output directories, next to the CSV files.

Figures are derived purely from the delimited outputs (trace.csv, scores.csv,
summary.csv), so a report can be regenerated at any time without refitting.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import io as sio  # noqa: E402
from .runner import read_summary  # noqa: E402


def _trace_dirs(run_dir: Path):
    return sorted(d for d in run_dir.glob("init_*") if (d / "trace.csv").is_file())


def _plot_trace(ax, trace, label=None, color=None):
    wall = np.array([r.wall_seconds for r in trace.records])
    obj = np.array([r.objective for r in trace.records])
    good = np.array([r.kind != "bad-epoch" for r in trace.records])
    line, = ax.plot(wall[good], obj[good], label=label, color=color, lw=1.2)
    if np.any(~good):
        ax.plot(
            wall[~good], obj[~good], "x", color=line.get_color(), ms=4,
            label=None,
        )
    return line


def render_loss_curves(run_dir, out_path=None):
    """Objective (or its estimate) against wall-clock time, one line per init."""
    run_dir = Path(run_dir)
    dirs = _trace_dirs(run_dir)
    if not dirs:
        raise FileNotFoundError(f"no init_*/trace.csv under {run_dir}")
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    all_obj = []
    for d in dirs:
        trace = sio.read_trace_csv(d / "trace.csv")
        _plot_trace(ax, trace, label=d.name)
        all_obj.extend(r.objective for r in trace.records)
    if all(v > 0 for v in all_obj if np.isfinite(v)):
        ax.set_yscale("log")
    ax.set_xlabel("wall time (s)")
    ax.set_ylabel("objective")
    ax.set_title(run_dir.name or str(run_dir))
    if len(dirs) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else run_dir / "loss_curves.png"
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_score_histogram(run_dir, out_path=None):
    """Histogram of per-init cosine scores with the best-objective init marked."""
    run_dir = Path(run_dir)
    scores_file = run_dir / "scores.csv"
    if not scores_file.is_file():
        raise FileNotFoundError(f"{scores_file} not found; run 'evaluate' first")
    import csv

    rows = list(csv.DictReader(scores_file.open()))
    scores = np.array([float(r["cosine_score"]) for r in rows])
    best = [float(r["cosine_score"]) for r in rows if int(r["is_best"])]
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    ax.hist(scores[np.isfinite(scores)], bins=20, color="tab:blue", alpha=0.75)
    for b in best:
        ax.axvline(b, color="tab:red", lw=1.5, label=f"best init: {b:.4f}")
    ax.set_xlabel("cosine similarity score")
    ax.set_ylabel("initializations")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else run_dir / "score_hist.png"
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_comparison(run_dirs, labels=None, out_path=None):
    """Overlay the best-init objective trajectories of several runs."""
    run_dirs = [Path(d) for d in run_dirs]
    labels = labels or [d.name or str(d) for d in run_dirs]
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    positive = True
    for d, label in zip(run_dirs, labels):
        rows = read_summary(d)
        best = [r for r in rows if r["is_best"]]
        index = best[0]["init"] if best else rows[0]["init"]
        trace = sio.read_trace_csv(d / f"init_{index:03d}" / "trace.csv")
        _plot_trace(ax, trace, label=label)
        positive &= all(r.objective > 0 for r in trace.records)
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("wall time (s)")
    ax.set_ylabel("objective")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else run_dirs[0] / "comparison.png"
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_run(run_dir, out_dir=None):
    """Render every figure that the directory's CSVs support."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [render_loss_curves(run_dir, out_dir / "loss_curves.png")]
    if (run_dir / "scores.csv").is_file():
        written.append(render_score_histogram(run_dir, out_dir / "score_hist.png"))
    return written
