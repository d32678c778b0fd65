"""Dense optical flow between two frames.

The estimator is Horn-Schunck: the brightness-constancy residual
``Ix*u + Iy*v + It`` is minimized jointly with a quadratic smoothness penalty
via per-pixel Jacobi updates, wrapped in a coarse-to-fine pyramid so that
displacements beyond a pixel or two remain recoverable.  Fields follow the
forward-motion convention: ``estimate_flow(a, b)`` returns, at each pixel of
``a``, the displacement that content moves by to reach its position in ``b``.

All computations here are plain numpy on float64 arrays; flow fields never
participate in the gradient tape (they are computed once per frame pair and
treated as constants downstream).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import NumericalError, ShapeError, Tensor

FLO_MAGIC = "FLO-TXT v1"


@dataclass
class FlowParams:
    """Solver knobs; defaults are tuned for intensities in [0, 255]."""

    alpha: float = 15.0
    max_iters: int = 200
    tol: float = 1e-4
    pyramid_levels: int = 3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass
class FlowField:
    """Per-pixel displacement field; u is horizontal (x), v vertical (y)."""

    u: np.ndarray
    v: np.ndarray
    from_frame: int = -1
    to_frame: int = -1

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError(
                f"flow components must be matching 2-D arrays, got {self.u.shape} and {self.v.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def _as_image(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a single-channel 2-D image, got shape {arr.shape}")
    return arr.astype(np.float64, copy=False)


def image_gradients(frame_a, frame_b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spatial and temporal derivatives of a frame pair.

    Ix and Iy are central differences averaged over both frames with
    replicate padding at the borders; It is the plain frame difference.
    """
    a = _as_image(frame_a, "frame_a")
    b = _as_image(frame_b, "frame_b")
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    mean = 0.5 * (a + b)
    padded = np.pad(mean, 1, mode="edge")
    ix = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    iy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    it = b - a
    return ix, iy, it


def _neighbor_average(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 1, mode="edge")
    return 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])


def _downsample2(img: np.ndarray) -> np.ndarray:
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    return img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _resize_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Center-aligned bilinear resize with replicated edges."""
    h_out, w_out = shape
    h_in, w_in = arr.shape
    if (h_in, w_in) == (h_out, w_out):
        return arr.copy()
    ys = (np.arange(h_out) + 0.5) * (h_in / h_out) - 0.5
    xs = (np.arange(w_out) + 0.5) * (w_in / w_out) - 0.5
    ys = np.clip(ys, 0.0, h_in - 1.0)
    xs = np.clip(xs, 0.0, w_in - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - fx) + arr[np.ix_(y0, x1)] * fx
    bottom = arr[np.ix_(y1, x0)] * (1 - fx) + arr[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def _sample_clamped(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample with coordinates clamped to the image (replicate)."""
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def flow_energy(
    frame_a, frame_b, u: np.ndarray, v: np.ndarray, alpha: float
) -> float:
    """Objective the solver descends at a single level with zero init:
    squared constraint residual plus ``alpha`` times the quadratic smoothness
    of the field (each 4-neighbor difference counted once)."""
    ix, iy, it = image_gradients(frame_a, frame_b)
    residual = ix * u + iy * v + it
    smooth = (
        np.sum(np.diff(u, axis=0) ** 2)
        + np.sum(np.diff(u, axis=1) ** 2)
        + np.sum(np.diff(v, axis=0) ** 2)
        + np.sum(np.diff(v, axis=1) ** 2)
    )
    return float(np.sum(residual**2) + (alpha / 4.0) * smooth)


def _solve_level(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    u0: np.ndarray,
    v0: np.ndarray,
    params: FlowParams,
    level: int,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Jacobi iteration at one pyramid level, linearized around (u0, v0).

    ``frame_b`` is first warped by the incoming estimate so the constraint is
    evaluated near the current solution; the returned energies are the values
    of the linearized objective after each iteration (non-increasing).
    """
    h, w = frame_a.shape
    if np.any(u0) or np.any(v0):
        grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
        frame_b_w = _sample_clamped(frame_b, grid_x + u0, grid_y + v0)
    else:
        frame_b_w = frame_b
    ix, iy, it = image_gradients(frame_a, frame_b_w)
    denom = params.alpha + ix**2 + iy**2

    u, v = u0.copy(), v0.copy()
    energies: list[float] = []

    def linearized_energy(uu, vv):
        residual = ix * (uu - u0) + iy * (vv - v0) + it
        smooth = (
            np.sum(np.diff(uu, axis=0) ** 2)
            + np.sum(np.diff(uu, axis=1) ** 2)
            + np.sum(np.diff(vv, axis=0) ** 2)
            + np.sum(np.diff(vv, axis=1) ** 2)
        )
        return float(np.sum(residual**2) + (params.alpha / 4.0) * smooth)

    energies.append(linearized_energy(u, v))
    for iteration in range(params.max_iters):
        u_bar = _neighbor_average(u)
        v_bar = _neighbor_average(v)
        t = (ix * (u_bar - u0) + iy * (v_bar - v0) + it) / denom
        u_new = u_bar - ix * t
        v_new = v_bar - iy * t
        if not (np.isfinite(u_new).all() and np.isfinite(v_new).all()):
            raise NumericalError(
                f"flow update diverged at pyramid level {level}, iteration {iteration}"
            )
        delta = 0.5 * (np.mean(np.abs(u_new - u)) + np.mean(np.abs(v_new - v)))
        u, v = u_new, v_new
        energies.append(linearized_energy(u, v))
        if delta < params.tol:
            break
    return u, v, energies


def estimate_flow(frame_from, frame_to, params: FlowParams | None = None) -> FlowField:
    """Estimate the forward-motion field from ``frame_from`` to ``frame_to``.

    Coarse-to-fine: the field found on a downsampled pair seeds the next finer
    level (rescaled), where only the residual motion is solved for.  Identical
    frames return an exactly zero field.
    """
    params = params or FlowParams()
    a = _as_image(frame_from, "frame_from")
    b = _as_image(frame_to, "frame_to")
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")

    pyramid_a, pyramid_b = [a], [b]
    for _ in range(params.pyramid_levels - 1):
        if min(pyramid_a[-1].shape) < 8:
            break
        pyramid_a.append(_downsample2(pyramid_a[-1]))
        pyramid_b.append(_downsample2(pyramid_b[-1]))

    u = np.zeros_like(pyramid_a[-1])
    v = np.zeros_like(pyramid_a[-1])
    for level in range(len(pyramid_a) - 1, -1, -1):
        la, lb = pyramid_a[level], pyramid_b[level]
        if u.shape != la.shape:
            scale_x = la.shape[1] / u.shape[1]
            scale_y = la.shape[0] / u.shape[0]
            u = _resize_bilinear(u, la.shape) * scale_x
            v = _resize_bilinear(v, la.shape) * scale_y
        u, v, _ = _solve_level(la, lb, u, v, params, level)
    return FlowField(u=u, v=v)


def resample_flow(flow: FlowField, shape: tuple[int, int]) -> FlowField:
    """Resize a flow field to a new spatial extent, rescaling displacements."""
    h, w = shape
    scale_x = w / flow.shape[1]
    scale_y = h / flow.shape[0]
    return FlowField(
        u=_resize_bilinear(flow.u, shape) * scale_x,
        v=_resize_bilinear(flow.v, shape) * scale_y,
        from_frame=flow.from_frame,
        to_frame=flow.to_frame,
    )


# ---------------------------------------------------------------------------
# text dumps (golden files, plotting)
# ---------------------------------------------------------------------------


def save_flow_text(path, flow: FlowField) -> None:
    """Write ``FLO-TXT v1 H W`` then one ``u v`` pair per line, row-major."""
    h, w = flow.shape
    lines = [f"{FLO_MAGIC} {h} {w}"]
    lines.extend(
        f"{u:.17g} {v:.17g}" for u, v in zip(flow.u.reshape(-1), flow.v.reshape(-1))
    )
    Path(path).write_text("\n".join(lines) + "\n")


def save_scalar_map_text(path, values: np.ndarray) -> None:
    """Dump a single-channel map through the same format (second column 0)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"scalar map must be 2-D, got {values.shape}")
    save_flow_text(path, FlowField(u=values, v=np.zeros_like(values)))


def load_flow_text(path) -> FlowField:
    path = Path(path)
    lines = path.read_text().splitlines()
    header = lines[0].split()
    if " ".join(header[:2]) != FLO_MAGIC or len(header) != 4:
        raise ValueError(f"{path.name}: bad flow header {lines[0]!r}")
    h, w = int(header[2]), int(header[3])
    if len(lines) - 1 != h * w:
        raise ValueError(f"{path.name}: expected {h * w} flow lines, found {len(lines) - 1}")
    pairs = np.array([[float(t) for t in line.split()] for line in lines[1:]])
    return FlowField(u=pairs[:, 0].reshape(h, w), v=pairs[:, 1].reshape(h, w))
