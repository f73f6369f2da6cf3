"""Figure rendering for reports: PR curves, threshold sweeps, selection overlays.

All figures are written as SVG with a fixed hash salt and no embedded
date so identical runs produce byte-identical files.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "ctxrescore"

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}

TARGET_COLOR = "#e6b800"
SELECTED_COLOR = "#cc2222"
UNSELECTED_COLOR = "#2255cc"


def save_pr_curve(curve, class_name: str, path) -> None:
    """One class's precision-recall curve with its AP in the title."""
    fig, ax = plt.subplots(figsize=(4.0, 3.2))
    if curve.recall.size:
        ax.plot(curve.recall, curve.precision, drawstyle="steps-post", color="#336699")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{class_name}  AP={curve.ap:.4f}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_sweep_chart(rows: Sequence[Mapping], path) -> None:
    """mAP against the context precision target, one line per method."""
    methods = sorted({r["method"] for r in rows})
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    for method in methods:
        pts = sorted((r["precision_target"], r["map"]) for r in rows if r["method"] == method)
        ax.plot([p for p, _ in pts], [v for _, v in pts], marker="o", label=method)
    ax.set_xlabel("context precision target")
    ax.set_ylabel("mAP")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def _draw_box(ax, bbox, color, dashed=False, label=None):
    x, y, w, h = bbox
    ax.add_patch(
        Rectangle(
            (x, y),
            w,
            h,
            fill=False,
            edgecolor=color,
            linewidth=1.6,
            linestyle="--" if dashed else "-",
        )
    )
    if label:
        ax.text(x, y - 0.5, label, color=color, fontsize=7, va="bottom")


def save_selection_overlay(trace: Mapping, width: float, height: float, path) -> None:
    """Draw one trace: target box solid, selected contexts solid, the rest dashed."""
    fig, ax = plt.subplots(figsize=(4.8, 4.8 * height / width))
    ax.set_xlim(0, width)
    ax.set_ylim(height, 0)  # image coordinates: origin top-left
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    for ctx in trace["contexts"]:
        color = SELECTED_COLOR if ctx["selected"] else UNSELECTED_COLOR
        _draw_box(ax, ctx["bbox"], color, dashed=not ctx["selected"], label=ctx["class"])
    _draw_box(ax, trace["target_bbox"], TARGET_COLOR, label=trace["target_class"])
    ax.set_title(
        f"{trace['image_id']}  target={trace['target_class']}  side={trace['side']}",
        fontsize=8,
    )
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
