"""Matplotlib figures for robustness curves and image panels.

Figures are built on bare ``Figure`` objects (no pyplot state), so rendering is
safe from worker threads. SVG output is made deterministic by a fixed hash salt
and stripped date metadata.
"""

import re

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.figure import Figure

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
    "svg.hashsalt": "segrobust",
    "svg.fonttype": "none",
}

MARKERS = ["o", "s", "^", "D", "v", "P", "X", "*"]


def slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-") or "model"


def _save(fig, path):
    fmt = str(path).rsplit(".", 1)[-1].lower()
    metadata = {"Date": None} if fmt == "svg" else {"Software": None} if fmt == "png" else None
    with matplotlib.rc_context(RC):
        fig.savefig(path, format=fmt, metadata=metadata, dpi=120)


def curve_chart(curves, path, title="", xlabel="x"):
    """Line chart, one line and one legend entry per model curve.

    Each line is tagged ``curve-<slug>`` and each legend handle
    ``legend-<slug>`` in the SVG so the structure can be checked.
    """
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(5.0, 3.4))
        ax = fig.add_subplot(1, 1, 1)
        for i, c in enumerate(curves):
            xs = [p[0] for p in c.points]
            ms = [p[1] for p in c.points]
            sd = [p[2] for p in c.points]
            (line,) = ax.plot(xs, ms, marker=MARKERS[i % len(MARKERS)], label=c.label)
            line.set_gid(f"curve-{slug(c.label)}")
            if any(s > 0 for s in sd):
                lo = np.array(ms) - np.array(sd)
                hi = np.array(ms) + np.array(sd)
                ax.fill_between(xs, lo, hi, alpha=0.15, color=line.get_color(), linewidth=0)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("Dice score")
        ax.set_ylim(0.0, 1.02)
        ax.grid(True, alpha=0.3)
        if title:
            ax.set_title(title)
        leg = ax.legend(loc="lower left", frameon=False)
        for handle, c in zip(leg.legend_handles, curves):
            handle.set_gid(f"legend-{slug(c.label)}")
        fig.tight_layout()
        _save(fig, path)


def _show(ax, img, title, cmap="gray", vmin=None, vmax=None):
    ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
    ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])


def saliency_figure(image, mask, rows, path):
    """Image and mask on top, then per model: signed saliency and overlay.

    ``rows`` is a list of ``(label, saliency, overlay_raster)``.
    """
    n = len(rows)
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(2.0 * max(n, 2), 4.2))
        ax = fig.add_subplot(2, max(n, 2) * 2, 1)
        _show(ax, image, "image")
        ax = fig.add_subplot(2, max(n, 2) * 2, 2)
        _show(ax, mask, "mask", vmin=0, vmax=1)
        for i, (label, sal, overlay) in enumerate(rows):
            lim = float(np.abs(sal).max()) or 1.0
            ax = fig.add_subplot(2, max(n, 2) * 2, max(n, 2) * 2 + 2 * i + 1)
            _show(ax, sal, f"{label}\ngradient", vmin=-lim, vmax=lim)
            ax = fig.add_subplot(2, max(n, 2) * 2, max(n, 2) * 2 + 2 * i + 2)
            _show(ax, overlay, f"{label}\noverlay", vmin=0, vmax=255)
        fig.tight_layout()
        _save(fig, path)


def shrink_figure(mask, levels, rows, path):
    """Ground-truth mask, then predicted masks per attack level, one row per model.

    ``rows`` is a list of ``(label, [binary mask per level])``.
    """
    cols = len(levels) + 1
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(1.3 * cols, 1.4 * len(rows) + 0.3))
        for r, (label, preds) in enumerate(rows):
            ax = fig.add_subplot(len(rows), cols, r * cols + 1)
            _show(ax, mask, f"{label}\nmask", vmin=0, vmax=1)
            for c, (lv, pred) in enumerate(zip(levels, preds)):
                ax = fig.add_subplot(len(rows), cols, r * cols + c + 2)
                _show(ax, pred, f"v={lv:g}", vmin=0, vmax=1)
        fig.tight_layout()
        _save(fig, path)


def prediction_figure(image, mask, rows, path):
    """Per model: input image, predicted mask, real mask."""
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(4.2, 1.4 * len(rows) + 0.3))
        for r, (label, pred) in enumerate(rows):
            for c, (img, title, kw) in enumerate(
                [(image, f"{label}\nimage", {}), (pred, "predicted", {"vmin": 0, "vmax": 1}), (mask, "real", {"vmin": 0, "vmax": 1})]
            ):
                ax = fig.add_subplot(len(rows), 3, r * 3 + c + 1)
                _show(ax, img, title, **kw)
        fig.tight_layout()
        _save(fig, path)
