"""SVG figures for run directories: learning curves, evaluation returns, coverage and distance maps."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    out = {}
    for key in rows[0]:
        try:
            out[key] = np.array([float(r[key]) for r in rows])
        except ValueError:
            out[key] = np.array([r[key] for r in rows])
    return out


def plot_learning_curves(metrics_csv, path) -> Path:
    cols = _read_columns(metrics_csv)
    keys = [k for k in ("loss_objective", "loss_vq", "loss_kl", "loss_q", "codebook_perplexity", "coverage")
            if k in cols and np.isfinite(cols[k]).any()]
    fig, axes = plt.subplots(len(keys), 1, figsize=(6, 1.8 * max(len(keys), 1)), sharex=True, squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        for stage in np.unique(cols["stage"]):
            sel = cols["stage"] == stage
            ax.plot(cols["step"][sel], cols[key][sel], lw=1, label=f"stage {int(stage)}")
        ax.set_ylabel(key.replace("loss_", ""), fontsize=8)
    axes[0, 0].legend(fontsize=7)
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_eval_returns(eval_csv, path) -> Path:
    cols = _read_columns(eval_csv)
    fig, ax = plt.subplots(figsize=(5, 3))
    if cols:
        steps = np.unique(cols["step"])
        mean = np.array([cols["return"][cols["step"] == s].mean() for s in steps])
        lo = np.array([cols["return"][cols["step"] == s].min() for s in steps])
        hi = np.array([cols["return"][cols["step"] == s].max() for s in steps])
        ax.plot(steps, mean, marker="o", ms=3)
        ax.fill_between(steps, lo, hi, alpha=0.25)
    ax.set_xlabel("frame")
    ax.set_ylabel("greedy return")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_heatmap(matrix: np.ndarray, path, title: str = "", cmap: str = "viridis") -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(matrix, cmap=cmap)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title, fontsize=9)
    ax.set_xticks(range(matrix.shape[1]))
    ax.set_yticks(range(matrix.shape[0]))
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_run(run_dir, layout=None) -> list[Path]:
    """Render every figure whose source CSV exists in ``run_dir``."""
    run_dir = Path(run_dir)
    made = []
    if (run_dir / "metrics.csv").exists():
        made.append(plot_learning_curves(run_dir / "metrics.csv", run_dir / "learning_curves.svg"))
    if (run_dir / "eval.csv").exists():
        made.append(plot_eval_returns(run_dir / "eval.csv", run_dir / "eval_returns.svg"))
    if layout is not None and (run_dir / "trajectory.csv").exists():
        from .metrics import coverage
        rec = coverage(run_dir / "trajectory.csv", layout)
        made.append(plot_heatmap(np.log1p(rec.counts), run_dir / "coverage.svg",
                                 f"visits (log1p), coverage {rec.fraction:.2f}", "magma"))
    if (run_dir / "distance_map.csv").exists():
        from .metrics import read_matrix_csv
        made.append(plot_heatmap(read_matrix_csv(run_dir / "distance_map.csv"), run_dir / "distance_map.svg",
                                 "embedding distance to anchor"))
    return made
