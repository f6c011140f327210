"""Static figures for evaluation reports (PNG and SVG, headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("png", "svg")


def _save(fig, stem, formats=FORMATS) -> list[Path]:
    stem = Path(stem)
    paths = []
    for fmt in formats:
        p = stem.with_suffix("." + fmt)
        fig.savefig(p, dpi=120, bbox_inches="tight")
        paths.append(p)
    plt.close(fig)
    return paths


def plot_cdf(grid, curves: dict, stem, formats=FORMATS) -> list[Path]:
    """Error CDFs, one line per method."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, F in curves.items():
        ax.step(grid, F, where="post", label=name)
    ax.set_xlabel("positioning error (m)")
    ax.set_ylabel("empirical CDF")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    return _save(fig, stem, formats)


def plot_box(samples: dict, stem, formats=FORMATS) -> list[Path]:
    """Per-run RMSE spread for each method."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    names = list(samples)
    ax.boxplot([np.asarray(samples[n], dtype=float) for n in names])
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("RMSE (m)")
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, stem, formats)


def plot_roc(fpr, tpr, auc: float, stem, formats=FORMATS) -> list[Path]:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, label=f"AUC = {auc:.3f}")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_aspect("equal")
    ax.legend(loc="lower right")
    return _save(fig, stem, formats)


def plot_trajectory(groundtruth_xy, estimates: dict, beacons_xy, stem,
                    formats=FORMATS) -> list[Path]:
    """Ground truth, one estimated track per method and the beacon positions."""
    gt = np.asarray(groundtruth_xy, dtype=float)
    fig, ax = plt.subplots(figsize=(4, 6))
    ax.plot(gt[:, 0], gt[:, 1], color="k", lw=2, label="groundtruth")
    for name, est in estimates.items():
        est = np.asarray(est, dtype=float)
        ax.plot(est[:, 0], est[:, 1], lw=0.9, label=name)
    b = np.asarray(beacons_xy, dtype=float).reshape(-1, 2)
    ax.scatter(b[:, 0], b[:, 1], marker="^", color="tab:red", zorder=3, label="beacons")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize="small")
    return _save(fig, stem, formats)
