"""Figures for the CLI report commands.

Everything renders with the Agg backend straight to files; nothing here
opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .entropy import EntropyCurve  # noqa: E402
from .harness import FitResult  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_entropy_curves(curves: Mapping[str, EntropyCurve], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, curve in curves.items():
            x, y = np.array(curve.samples).T
            line, = ax.plot(x, y, label=f"{name} (mean {curve.mean_constant:.4f})")
            ax.axhline(curve.mean_constant, color=line.get_color(), ls=":", lw=0.8)
        ax.set_xlabel("log2 c  (n = c k 2^b)")
        ax.set_ylabel("entropy per row [bits]")
        ax.legend()
        return _save(fig, path)


def plot_error_curves(checkpoints: np.ndarray, k: int, errors: Mapping[str, np.ndarray], path) -> Path:
    """``sqrt(k) * RMSE / n`` against ``n / k`` for each estimator."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, y in errors.items():
            ax.plot(np.asarray(checkpoints) / k, y, label=name)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("n / k")
        ax.set_ylabel("sqrt(k) RMSE / n")
        ax.set_title(f"k = {k}")
        ax.legend(fontsize=8)
        return _save(fig, path)


def plot_fit(fit: FitResult, path, label: str = "") -> Path:
    x, y = np.array(fit.points).T
    xs = np.linspace(0.0, x.max() * 1.05, 200)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, y, "o", label="measured")
        ax.plot(xs, fit.c0 + fit.c1 * xs + fit.c2 * xs ** 2, "-", lw=1,
                label=f"c0={fit.c0:.5f} c1={fit.c1:.3f} c2={fit.c2:.3f}")
        ax.set_xlabel("1 / k")
        ax.set_ylabel(label or "flat-region value")
        ax.legend()
        return _save(fig, path)


def plot_comparison(ns: Sequence[float], ratios: Mapping[str, Sequence[float]], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, r in ratios.items():
            ax.plot(ns, r, marker=".", label=name)
        ax.axhline(1.0, color="k", lw=0.6)
        ax.axhline(np.sqrt(1.5), color="k", lw=0.6, ls="--")
        ax.set_xscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel("HLL SE / FM85 SE")
        ax.legend()
        return _save(fig, path)
