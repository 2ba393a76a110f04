"""Figures written next to the bench and noise-lab reports."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STRATEGY_STYLE = {
    "single": dict(color="#c0392b", marker="o", label="single prompt"),
    "avg": dict(color="#2980b9", marker="s", label="mean of N"),
    "mad_approx": dict(color="#7f8c8d", marker="^", ls="--", label="mean - a*0.8*sigma"),
    "mad_exact": dict(color="#27ae60", marker="D", label="mean - a*MAD"),
}


def _style():
    plt.rcParams.update({
        "font.size": 10,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
        "savefig.bbox": "tight",
    })


def plot_noise_sweep(rows: Sequence, path, alpha: float = 1.0, mu=None) -> Path:
    """False-exit rate against sigma, one panel per prompt count."""
    _style()
    sel = [r for r in rows if math.isclose(r.alpha, alpha) and (mu is None or math.isclose(r.mu, mu))]
    if mu is None and sel:
        mu = max(r.mu for r in sel)
        sel = [r for r in sel if math.isclose(r.mu, mu)]
    ns = sorted({r.n for r in sel})
    fig, axes = plt.subplots(1, max(len(ns), 1), figsize=(3.2 * max(len(ns), 1), 3.0), sharey=True, squeeze=False)
    for ax, n in zip(axes[0], ns):
        series = defaultdict(list)
        for r in sel:
            if r.n == n:
                series[r.strategy].append((r.sigma, r.empirical, r.analytic))
        for strat, pts in series.items():
            pts.sort()
            xs = [p[0] for p in pts]
            # Zero rates cannot sit on a log axis; draw them at a floor.
            ys = [max(p[1], 1e-7) for p in pts]
            ax.plot(xs, ys, **STRATEGY_STYLE.get(strat, {"label": strat}))
            if strat in ("single", "avg") and all(p[2] is not None for p in pts):
                ax.plot(xs, [max(p[2], 1e-7) for p in pts], color=STRATEGY_STYLE[strat]["color"], lw=0.8, alpha=0.5)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_title(f"N = {n}")
        ax.set_xlabel("noise sigma")
    axes[0][0].set_ylabel("false-exit rate")
    axes[0][-1].legend(fontsize=7, frameon=False)
    fig.suptitle(f"mu = {mu}, alpha = {alpha}", fontsize=10)
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_bench(rows: Sequence[tuple[str, object]], path) -> Path:
    """Accuracy and average tokens per method, side by side."""
    _style()
    names = [n for n, _ in rows]
    acc = [100 * m.accuracy for _, m in rows]
    tok = [m.avg_tokens for _, m in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    a1.bar(names, acc, color="#2980b9")
    a1.set_ylabel("accuracy (%)")
    a1.set_ylim(0, 100)
    a2.bar(names, tok, color="#e67e22")
    a2.set_ylabel("avg tokens")
    for _, m in rows:
        if m.compression_rate is not None:
            a2.axhline(m.baseline_avg_tokens, color="k", lw=0.8, ls=":")
            break
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_confidence_histogram(confidences: Sequence[float], path, lam: float = 0.95) -> Path:
    """Distribution of trial-answer confidences with the exit threshold marked."""
    _style()
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.hist(list(confidences), bins=20, range=(0, 1), color="#8e44ad")
    ax.axvline(lam, color="k", ls="--", lw=0.8)
    ax.set_xlabel("trial-answer confidence")
    ax.set_ylabel("attempts")
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
