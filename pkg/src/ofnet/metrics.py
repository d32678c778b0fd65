"""Segmentation quality metrics: Dice overlap, contour extraction via
marching squares, average perpendicular distance between contours, per-frame
area curves, and a scale-free temporal smoothness score for those curves.

All functions are pure; masks are integer arrays with classes
{0 background, 1 muscle ring, 2 pool}.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class ContourError(ValueError):
    """A mask does not contain the boundary asked for."""


@dataclass
class Contour:
    """Closed polyline in sub-pixel (x, y) coordinates; the closing edge from
    the last point back to the first is implied, not duplicated."""

    points: np.ndarray
    region: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 3:
            raise ValueError(f"contour needs at least 3 (x, y) points, got {self.points.shape}")

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points, np.roll(self.points, -1, axis=0)


# ---------------------------------------------------------------------------
# overlap and areas
# ---------------------------------------------------------------------------


def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Dice overlap ``2|A&B| / (|A|+|B|)``; two empty masks agree vacuously (1)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = pred == cls
    b = gt == cls
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def area_curve(masks: Sequence[np.ndarray], cls: int, pixel_spacing: float = 1.0) -> list[float]:
    """Per-frame area of one class, in pixels (times spacing squared)."""
    if len(masks) == 0:
        raise ValueError("area_curve needs at least one mask")
    scale = pixel_spacing * pixel_spacing
    return [float((np.asarray(m) == cls).sum()) * scale for m in masks]


def temporal_smoothness(curve: Sequence[float]) -> float:
    """Mean squared second difference of a curve, normalized by its squared
    mean so the score is invariant under uniform scaling."""
    c = np.asarray(curve, dtype=np.float64)
    if c.ndim != 1 or len(c) < 3:
        raise ValueError("temporal_smoothness needs a 1-D curve of length >= 3")
    second = c[2:] - 2.0 * c[1:-1] + c[:-2]
    raw = float(np.mean(second**2))
    mean = float(np.mean(c))
    if mean == 0.0:
        return 0.0 if raw == 0.0 else math.inf
    return raw / (mean * mean)


# ---------------------------------------------------------------------------
# marching squares
# ---------------------------------------------------------------------------

# Undirected edge pairs per cell case; corners are coded tl=8, tr=4, br=2,
# bl=1 with "inside" meaning value > 0.5.  Saddles (5, 10) are resolved with
# the cell-center average, which on binary masks keeps diagonal neighbors
# disconnected (4-connectivity semantics).
_CASE_SEGMENTS: dict[int, list[tuple[str, str]]] = {
    0: [],
    1: [("L", "B")],
    2: [("B", "R")],
    3: [("L", "R")],
    4: [("T", "R")],
    6: [("T", "B")],
    7: [("L", "T")],
    8: [("T", "L")],
    9: [("T", "B")],
    11: [("T", "R")],
    12: [("L", "R")],
    13: [("B", "R")],
    14: [("L", "B")],
    15: [],
}


def _edge_point(f: np.ndarray, r: int, c: int, edge: str) -> tuple[float, float]:
    if edge == "T":
        a, b = f[r, c], f[r, c + 1]
        return (c + (0.5 - a) / (b - a), float(r))
    if edge == "B":
        a, b = f[r + 1, c], f[r + 1, c + 1]
        return (c + (0.5 - a) / (b - a), float(r + 1))
    if edge == "L":
        a, b = f[r, c], f[r + 1, c]
        return (float(c), r + (0.5 - a) / (b - a))
    a, b = f[r, c + 1], f[r + 1, c + 1]
    return (float(c + 1), r + (0.5 - a) / (b - a))


def marching_squares(binary: np.ndarray) -> list[np.ndarray]:
    """Closed 0.5-level contours of a binary mask as (P, 2) xy point arrays.

    The mask is zero-padded first so regions touching the border still close,
    and coordinates are reported relative to pixel centers of the original
    mask (padding removed).
    """
    f = np.pad(np.asarray(binary, dtype=np.float64), 1)
    h, w = f.shape
    inside = f > 0.5
    adjacency: dict[tuple[float, float], list[tuple[float, float]]] = {}

    cells_r, cells_c = np.nonzero(
        inside[:-1, :-1] | inside[:-1, 1:] | inside[1:, :-1] | inside[1:, 1:]
    )
    for r, c in zip(cells_r, cells_c):
        case = (
            8 * inside[r, c] + 4 * inside[r, c + 1] + 2 * inside[r + 1, c + 1] + inside[r + 1, c]
        )
        if case == 0 or case == 15:
            continue
        if case in (5, 10):
            center_in = (f[r, c] + f[r, c + 1] + f[r + 1, c] + f[r + 1, c + 1]) / 4.0 > 0.5
            if case == 5:
                segs = [("T", "L"), ("B", "R")] if center_in else [("T", "R"), ("L", "B")]
            else:
                segs = [("T", "R"), ("L", "B")] if center_in else [("T", "L"), ("B", "R")]
        else:
            segs = _CASE_SEGMENTS[case]
        for e1, e2 in segs:
            p1 = _edge_point(f, r, c, e1)
            p2 = _edge_point(f, r, c, e2)
            adjacency.setdefault(p1, []).append(p2)
            adjacency.setdefault(p2, []).append(p1)

    loops: list[np.ndarray] = []
    visited: set[tuple[float, float]] = set()
    for start in adjacency:
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        prev, current = None, start
        while True:
            neighbors = adjacency[current]
            nxt = neighbors[0] if neighbors[0] != prev else neighbors[-1]
            if nxt == start:
                break
            loop.append(nxt)
            visited.add(nxt)
            prev, current = current, nxt
        # shift out of padded coordinates
        loops.append(np.asarray(loop, dtype=np.float64) - 1.0)
    return loops


def _loop_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def extract_contours(mask: np.ndarray) -> tuple[Contour, Contour]:
    """Inner (pool/ring) and outer (ring/background) boundaries of a mask.

    Both are the largest closed 0.5-level contour of the respective binary
    mask; a missing class or a mask with no closed boundary raises
    ContourError naming the boundary that failed.
    """
    mask = np.asarray(mask)
    if not np.any(mask == 1):
        raise ContourError("epicardial boundary: mask has no ring (class 1) pixels")
    endo = _largest_contour(mask == 2, "endocardial boundary (pool)", "endocardium")
    epi = _largest_contour(mask >= 1, "epicardial boundary (ring exterior)", "epicardium")
    return endo, epi


def _largest_contour(binary: np.ndarray, description: str, region: str) -> Contour:
    if not np.any(binary):
        raise ContourError(f"{description}: mask has no pixels of the required class")
    loops = marching_squares(binary)
    if not loops:
        raise ContourError(f"{description}: no closed contour found")
    best = max(loops, key=_loop_area)
    if len(best) < 3:
        raise ContourError(f"{description}: degenerate contour with {len(best)} points")
    return Contour(points=best, region=region)


# ---------------------------------------------------------------------------
# contour distance
# ---------------------------------------------------------------------------


def _min_distance_to_segments(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """For each point, the distance to the nearest of the given segments."""
    d = seg_b - seg_a
    length2 = (d**2).sum(axis=1)
    length2 = np.where(length2 == 0.0, 1.0, length2)
    # t has shape (P, S): projection parameter of each point on each segment
    diff = points[:, None, :] - seg_a[None, :, :]
    t = np.clip((diff * d[None, :, :]).sum(axis=2) / length2[None, :], 0.0, 1.0)
    proj = seg_a[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.sqrt(((points[:, None, :] - proj) ** 2).sum(axis=2))
    return dist.min(axis=1)


def apd(a: Contour, b: Contour, pixel_spacing: float = 1.0) -> float:
    """Symmetrized mean distance from each contour's points to the nearest
    segment of the other, in pixels (times spacing)."""
    a_pts, a_from, a_to = a.points, *a.segments()
    b_pts, b_from, b_to = b.points, *b.segments()
    ab = float(_min_distance_to_segments(a_pts, b_from, b_to).mean())
    ba = float(_min_distance_to_segments(b_pts, a_from, a_to).mean())
    return 0.5 * (ab + ba) * pixel_spacing


# ---------------------------------------------------------------------------
# sequence-level report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("frame", "dice_myo", "dice_bp", "apd_endo", "apd_epi", "area_myo", "area_bp")


@dataclass
class MetricsReport:
    """Per-frame metrics of one predicted sequence against its ground truth."""

    preset: str
    pixel_spacing: float
    dice_myo: list[float]
    dice_bp: list[float]
    apd_endo: list[float]
    apd_epi: list[float]
    area_myo: list[float]
    area_bp: list[float]
    gt_area_myo: list[float]
    gt_area_bp: list[float]

    @property
    def n_frames(self) -> int:
        return len(self.dice_myo)

    def summary(self) -> dict:
        def stats(values):
            arr = np.asarray(values, dtype=np.float64)
            finite = arr[np.isfinite(arr)]
            if len(finite) == 0:
                return {"mean": None, "std": None}
            return {"mean": float(finite.mean()), "std": float(finite.std())}

        return {
            "preset": self.preset,
            "n_frames": self.n_frames,
            "pixel_spacing": self.pixel_spacing,
            "dice_myo": stats(self.dice_myo),
            "dice_bp": stats(self.dice_bp),
            "apd_endo": stats(self.apd_endo),
            "apd_epi": stats(self.apd_epi),
            "smoothness_area_bp": temporal_smoothness(self.area_bp),
            "smoothness_area_myo": temporal_smoothness(self.area_myo),
            "smoothness_gt_area_bp": temporal_smoothness(self.gt_area_bp),
            "smoothness_gt_area_myo": temporal_smoothness(self.gt_area_myo),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for t in range(self.n_frames):
                writer.writerow(
                    [
                        t,
                        _fmt(self.dice_myo[t]),
                        _fmt(self.dice_bp[t]),
                        _fmt(self.apd_endo[t]),
                        _fmt(self.apd_epi[t]),
                        _fmt(self.area_myo[t]),
                        _fmt(self.area_bp[t]),
                    ]
                )

    def write_summary_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _fmt(value: float) -> str:
    return repr(float(value))


def evaluate_sequence(
    pred_labels: Sequence[np.ndarray],
    gt_labels: Sequence[np.ndarray],
    preset: str = "custom",
    pixel_spacing: float = 1.0,
) -> MetricsReport:
    """Frame-by-frame comparison of predicted masks against ground truth.

    Frames where a predicted boundary cannot be extracted get NaN distance
    entries rather than failing the whole sequence.
    """
    if len(pred_labels) != len(gt_labels):
        raise ValueError(f"{len(pred_labels)} predictions vs {len(gt_labels)} ground-truth masks")
    dice_myo, dice_bp, apd_endo, apd_epi = [], [], [], []
    for pred, gt in zip(pred_labels, gt_labels):
        dice_myo.append(dice(pred, gt, 1))
        dice_bp.append(dice(pred, gt, 2))
        try:
            endo_p, epi_p = extract_contours(pred)
            endo_g, epi_g = extract_contours(gt)
            apd_endo.append(apd(endo_p, endo_g, pixel_spacing))
            apd_epi.append(apd(epi_p, epi_g, pixel_spacing))
        except ContourError:
            apd_endo.append(math.nan)
            apd_epi.append(math.nan)
    return MetricsReport(
        preset=preset,
        pixel_spacing=pixel_spacing,
        dice_myo=dice_myo,
        dice_bp=dice_bp,
        apd_endo=apd_endo,
        apd_epi=apd_epi,
        area_myo=area_curve(pred_labels, 1, pixel_spacing),
        area_bp=area_curve(pred_labels, 2, pixel_spacing),
        gt_area_myo=area_curve(gt_labels, 1, pixel_spacing),
        gt_area_bp=area_curve(gt_labels, 2, pixel_spacing),
    )
