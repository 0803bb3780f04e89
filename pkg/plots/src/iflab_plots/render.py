"""Figure rendering: four kinds, each a pure function of one CSV.

Output is deterministic: fixed style parameters, a fixed SVG hash salt,
and no embedded dates, so re-rendering the same CSV reproduces identical
bytes in both formats.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

from .schemas import (
    MissingInput,
    SchemaError,
    load_correction_summary,
    load_divergence,
    load_fading,
)

KINDS = ("divergence", "fading", "correction", "steps")

CSV_FOR_KIND = {
    "divergence": "divergence.csv",
    "fading": "fading.csv",
    "correction": "correction_summary.csv",
    "steps": "correction_summary.csv",
}

_STYLE = {
    "figure.figsize": (5.2, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": "small",
    "svg.hashsalt": "iflab-plots",
}


@dataclass(frozen=True)
class FigureSpec:
    """What to draw: one CSV, one kind, one output base path."""

    kind: str
    csv_path: str
    out_path: str  # .png or .svg; the sibling format is written too
    title: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")
        root, ext = os.path.splitext(self.out_path)
        if ext not in (".png", ".svg"):
            raise SchemaError(f"output must end in .png or .svg, got {self.out_path!r}")

    @property
    def out_paths(self) -> tuple[str, str]:
        root, _ = os.path.splitext(self.out_path)
        return (root + ".png", root + ".svg")


def spec_for_run(kind: str, run_dir: str, out_path: str, title: str = "") -> FigureSpec:
    spec = FigureSpec(kind=kind, csv_path=os.path.join(run_dir, CSV_FOR_KIND.get(kind, "")),
                      out_path=out_path, title=title)
    if not os.path.exists(spec.csv_path):
        raise MissingInput(f"{spec.csv_path} does not exist (kind {kind!r} needs it)")
    return spec


def aggregate_fading(table) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Per (method, t): mean R over repeats with a 95% t-interval.

    A single repeat yields a zero-width interval, so the band collapses
    onto the mean line rather than vanishing or erroring.
    """
    cells: dict[str, dict[float, list[float]]] = {}
    for method, t, r in zip(table["method"], table["t"], table["R"]):
        cells.setdefault(method, {}).setdefault(t, []).append(r)
    out = {}
    for method, by_t in cells.items():
        ts = np.array(sorted(by_t))
        mean = np.empty_like(ts)
        lo = np.empty_like(ts)
        hi = np.empty_like(ts)
        for i, t in enumerate(ts):
            vals = np.array(by_t[t])
            m = float(vals.mean())
            if len(vals) >= 2 and vals.std(ddof=1) > 0:
                half = stats.t.ppf(0.975, len(vals) - 1) * vals.std(ddof=1) / np.sqrt(len(vals))
            else:
                half = 0.0
            mean[i], lo[i], hi[i] = m, m - half, m + half
        out[method] = (ts, mean, lo, hi)
    return out


def draw_divergence(table):
    """One line per eps, log-scale y (zero-divergence rows cannot render there
    and are dropped, which removes the eps=0 series entirely)."""
    fig, ax = plt.subplots()
    by_eps: dict[float, list[tuple[float, float]]] = {}
    for eps, int_lr, div in zip(table["eps"], table["int_lr"], table["div_norm"]):
        by_eps.setdefault(eps, []).append((int_lr, div))
    drawn = 0
    for eps in sorted(by_eps):
        pts = np.array(sorted(by_eps[eps]))
        keep = pts[:, 1] > 0
        if keep.any():
            ax.semilogy(pts[keep, 0], pts[keep, 1], label=f"eps={eps:g}")
            drawn += 1
    if drawn == 0:
        raise SchemaError("divergence CSV has no positive divergence values to draw")
    ax.set_xlabel("integrated learning rate")
    ax.set_ylabel("parameter divergence")
    ax.legend()
    return fig


def draw_fading(table):
    """Mean R(t) per method with the 95% confidence band shaded."""
    fig, ax = plt.subplots()
    agg = aggregate_fading(table)
    if not agg:
        raise SchemaError("fading CSV has no data rows")
    for method in sorted(agg):
        ts, mean, lo, hi = agg[method]
        ax.plot(ts, mean, label=method)
        ax.fill_between(ts, lo, hi, alpha=0.25, linewidth=0)
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel("correlation R(t)")
    ax.legend()
    return fig


def _by_method(table, column):
    out: dict[str, list[tuple[float, float]]] = {}
    for i, method in enumerate(table["method"]):
        val = table[column][i]
        if np.isfinite(val):
            out.setdefault(method, []).append((table["eps"][i], val))
    return out


def draw_correction(table):
    """Success rate (solid) and retention (dashed) against eps, per method."""
    fig, ax = plt.subplots()
    success = _by_method(table, "success_rate")
    retention = _by_method(table, "mean_retention")
    if not success:
        raise SchemaError("correction summary CSV has no data rows")
    for method in sorted(success):
        pts = np.array(sorted(success[method]))
        line, = ax.plot(pts[:, 0], pts[:, 1], marker="o", label=f"{method} success")
        if method in retention:
            rts = np.array(sorted(retention[method]))
            ax.plot(rts[:, 0], rts[:, 1], marker="x", linestyle="--",
                    color=line.get_color(), label=f"{method} retention")
    ax.set_xlabel("eps (fraction of batch)")
    ax.set_ylabel("rate")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    return fig


def draw_steps(table):
    """Mean (solid) and median (dashed) fine-tuning steps against eps."""
    fig, ax = plt.subplots()
    means = _by_method(table, "mean_steps")
    medians = _by_method(table, "median_steps")
    if not means and not medians:
        raise SchemaError("correction summary CSV has no finite step counts to draw")
    for method in sorted(means):
        pts = np.array(sorted(means[method]))
        line, = ax.plot(pts[:, 0], pts[:, 1], marker="o", label=f"{method} mean")
        if method in medians:
            mds = np.array(sorted(medians[method]))
            ax.plot(mds[:, 0], mds[:, 1], marker="x", linestyle="--",
                    color=line.get_color(), label=f"{method} median")
    ax.set_xlabel("eps (fraction of batch)")
    ax.set_ylabel("steps to correction (among successes)")
    ax.legend()
    return fig


_LOADERS = {
    "divergence": load_divergence,
    "fading": load_fading,
    "correction": load_correction_summary,
    "steps": load_correction_summary,
}

_DRAWERS = {
    "divergence": draw_divergence,
    "fading": draw_fading,
    "correction": draw_correction,
    "steps": draw_steps,
}


def render(spec: FigureSpec) -> tuple[str, str]:
    """Draw the figure and write both image formats; returns (png, svg)."""
    table = _LOADERS[spec.kind](spec.csv_path)
    with plt.rc_context(_STYLE):
        fig = _DRAWERS[spec.kind](table)
        if spec.title:
            fig.axes[0].set_title(spec.title)
        png, svg = spec.out_paths
        fig.savefig(png, bbox_inches="tight")
        fig.savefig(svg, bbox_inches="tight", metadata={"Date": None})
        plt.close(fig)
    return png, svg
