"""Matplotlib figures written as byte-stable SVG files."""

import math

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.figure import Figure

STYLE = {
    "svg.hashsalt": "spectron",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
}

COLORS = {
    "spectron": "tab:blue",
    "ortho_only": "tab:red",
    "specnorm_only": "tab:green",
    "naive_momentum": "tab:orange",
    "adaptive_moments": "tab:purple",
}


def save_svg(fig, path):
    with matplotlib.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _finite(xs, ys):
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    keep = np.isfinite(xs) & np.isfinite(ys)
    return xs[keep], ys[keep]


def loss_figure(series, title="training loss"):
    """``series`` maps a label to ``(steps, losses)``."""
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot()
        for label, (steps, losses) in series.items():
            x, y = _finite(steps, losses)
            ax.plot(x, y, label=label, color=COLORS.get(label.split("@")[0]))
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy (nats)")
        ax.set_title(title)
        if series:
            ax.legend(fontsize=7)
        fig.tight_layout()
    return fig


def trace_figure(series):
    """Three panels of ||dW||_2, |dy|_rms and ||W||_2 against step.

    ``series`` maps a variant to a dict with keys ``step``, ``dw_spec``,
    ``dy_rms`` and ``w_spec``. Log scale on the y axes.
    """
    panels = (("dw_spec", "||ΔW||₂"), ("dy_rms", "|Δy|_rms"), ("w_spec", "||W||₂"))
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(12, 3.6))
        axes = fig.subplots(1, 3)
        for ax, (key, label) in zip(axes, panels):
            for variant, cols in series.items():
                x, y = _finite(cols["step"], cols[key])
                keep = y > 0
                ax.plot(x[keep], y[keep], label=variant, color=COLORS.get(variant))
            ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.set_title(label)
        axes[0].legend(fontsize=7)
        fig.tight_layout()
    return fig


def isoflop_figure(budget, samples, curve_fn, n_opt=None, title=None):
    """Scatter of ``(N, loss)`` at one budget with a fitted curve ``loss = curve_fn(N)``."""
    n = np.array([s[0] for s in samples], dtype=float)
    loss = np.array([s[1] for s in samples], dtype=float)
    grid = np.geomspace(n.min(), n.max(), 200)
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(5, 4))
        ax = fig.add_subplot()
        ax.scatter(n, loss, s=14, color="tab:blue", label="runs", zorder=3)
        ax.plot(grid, curve_fn(grid), color="tab:red", label="fit")
        if n_opt is not None and math.isfinite(n_opt):
            ax.axvline(n_opt, color="gray", linestyle="--", linewidth=0.8, label=f"N_opt = {n_opt:.3g}")
        ax.set_xscale("log")
        ax.set_xlabel("parameters N")
        ax.set_ylabel("loss")
        ax.set_title(title or f"C = {budget:.3g} FLOPs")
        ax.legend(fontsize=7)
        fig.tight_layout()
    return fig
