"""Figure rendering for the reporting commands.

Every function writes a PNG next to the tidy CSV it visualizes and returns
the path.  The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .flow import FlowField
from .model import EpochStats


def save_area_curves_figure(
    path,
    pred_area_myo,
    pred_area_bp,
    gt_area_myo,
    gt_area_bp,
    title: str = "",
) -> Path:
    """Predicted vs. ground-truth area per frame, ring on top, pool below."""
    frames = np.arange(len(pred_area_myo))
    fig, (ax_myo, ax_bp) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax_myo.plot(frames, gt_area_myo, "k-", label="ground truth")
    ax_myo.plot(frames, pred_area_myo, "C1o-", markersize=3, label="predicted")
    ax_myo.set_ylabel("ring area (px$^2$)")
    ax_myo.legend(loc="best", fontsize=8)
    ax_bp.plot(frames, gt_area_bp, "k-", label="ground truth")
    ax_bp.plot(frames, pred_area_bp, "C0o-", markersize=3, label="predicted")
    ax_bp.set_ylabel("pool area (px$^2$)")
    ax_bp.set_xlabel("frame")
    if title:
        ax_myo.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_loss_curve_figure(path, history: list[EpochStats], title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([h.epoch for h in history], [h.mean_loss for h in history], "C0o-")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_flow_figure(path, frame: np.ndarray, flow: FlowField, step: int = 4) -> Path:
    """Frame with a subsampled quiver of the displacement field on top."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(frame, cmap="gray", interpolation="nearest")
    h, w = flow.shape
    ys, xs = np.mgrid[0:h:step, 0:w:step]
    ax.quiver(
        xs,
        ys,
        flow.u[::step, ::step],
        flow.v[::step, ::step],
        color="red",
        angles="xy",
        scale_units="xy",
        scale=0.25,
        width=0.004,
    )
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_corruption_figure(path, rows: list[dict], corrupted_idx: int) -> Path:
    """Per-frame ring Dice of both models around a corrupted frame."""
    frames = [r["frame"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(frames, [r["dice_myo_ofnet"] for r in rows], "C0o-", label="aggregating")
    ax.plot(frames, [r["dice_myo_unet"] for r in rows], "C1s-", label="per-frame")
    ax.axvline(corrupted_idx, color="red", linestyle="--", linewidth=1, label="corrupted frame")
    ax.set_xlabel("frame")
    ax.set_ylabel("ring Dice")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
