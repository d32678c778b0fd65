"""Temporal feature aggregation.

Feature maps of neighboring frames are motion-compensated toward the target
frame with a bilinear warp along a precomputed flow field, weighted per pixel
by the cosine similarity of their channel-softmaxed activations against the
target frame's, normalized to unit sum over the window, and summed.  The
whole path is differentiable with respect to the feature maps, so gradients
from the segmentation loss reach the feature extractor through every window
member; flow fields are constants.

Warp-field convention: the field used to pull frame j's features into frame
i's geometry is the forward-motion field estimated *from frame i to frame j*
(at each target pixel it points to where that content sits in frame j).  The
FlowCache hides this behind ``get(source=j, target=i)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flow import FlowField, FlowParams, estimate_flow
from .layers import softmax_channels
from .phantom import normalize_intensity
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor


@dataclass
class AggregationConfig:
    """Temporal window: frames [i-k, i+k] clamped to the sequence."""

    k: int = 2
    boundary: str = "clamp"

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.boundary != "clamp":
            raise ValueError("only the clamped window boundary is supported")

    def window(self, i: int, n: int) -> range:
        if not 0 <= i < n:
            raise IndexError(f"frame index {i} outside sequence of length {n}")
        return range(max(0, i - self.k), min(n - 1, i + self.k) + 1)


@dataclass
class WeightMap:
    """Per-pixel similarity weights of one window member against the target."""

    values: Tensor
    source: int = -1
    target: int = -1


def warp_bilinear(feature: Tensor, flow: FlowField) -> Tensor:
    """Resample a (N, C, H, W) feature map along a flow field.

    ``out[..., y, x]`` is the bilinear sample of the feature at
    ``(x + u(y, x), y + v(y, x))``; samples falling outside the map are zero.
    Differentiable w.r.t. the feature (the backward pass scatters gradients
    through the same four corner weights).
    """
    if feature.ndim != 4:
        raise ShapeError(f"warp_bilinear expects a 4-D feature map, got {feature.shape}")
    n, c, h, w = feature.shape
    if flow.shape != (h, w):
        raise ShapeError(
            f"flow extent {flow.shape} does not match feature extent {(h, w)}; "
            "resample the flow first"
        )
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = grid_x + flow.u
    ys = grid_y + flow.v
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    corners = []
    for (yc, xc, wgt) in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x0 + 1, fx * (1 - fy)),
        (y0 + 1, x0, (1 - fx) * fy),
        (y0 + 1, x0 + 1, fx * fy),
    ):
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        yq = np.where(valid, yc, 0)
        xq = np.where(valid, xc, 0)
        corners.append((yq, xq, wgt * valid))

    out = np.zeros((n, c, h, w), dtype=DEFAULT_DTYPE)
    for yq, xq, wgt in corners:
        out += feature.data[:, :, yq, xq] * wgt

    def backward_fn(g):
        if not feature.requires_grad:
            return
        grad = np.zeros((n * c, h * w), dtype=DEFAULT_DTYPE)
        g_flat = g.reshape(n * c, h * w)
        rows = np.arange(n * c)[:, None]
        for yq, xq, wgt in corners:
            idx = (yq * w + xq).reshape(-1)[None, :]
            np.add.at(grad, (rows, idx), g_flat * wgt.reshape(-1)[None, :])
        feature._accumulate(grad.reshape(n, c, h, w))

    return Tensor._from_op(out, (feature,), backward_fn, "warp_bilinear")


def cosine_weight(warped: Tensor, reference: Tensor) -> WeightMap:
    """Per-pixel cosine similarity between the channel vectors of two maps.

    Both operands are expected to be channel-softmaxed already, which rules
    out zero-norm vectors.  Built from differentiable primitives, so the
    weights carry gradients back into both maps.
    """
    if warped.shape != reference.shape:
        raise ShapeError(f"shape mismatch: {warped.shape} vs {reference.shape}")
    if warped.ndim != 4:
        raise ShapeError(f"cosine_weight expects 4-D maps, got {warped.shape}")
    dot = (warped * reference).sum(axis=1, keepdims=True)
    norm_w = (warped * warped).sum(axis=1, keepdims=True).sqrt()
    norm_r = (reference * reference).sum(axis=1, keepdims=True).sqrt()
    return WeightMap(values=dot / (norm_w * norm_r))


def aggregate(
    features_window: Sequence[Tensor], weights_window: Sequence[WeightMap]
) -> Tensor:
    """Weighted sum of warped window features, weights normalized per pixel.

    Raw cosine weights are normalized to unit sum over the window at every
    pixel before the channel-broadcast product, so the aggregated map keeps
    the magnitude of a single feature map regardless of window size.
    """
    if len(features_window) == 0:
        raise ValueError("aggregate needs a non-empty window")
    if len(features_window) != len(weights_window):
        raise ValueError(
            f"{len(features_window)} feature maps but {len(weights_window)} weight maps"
        )
    shape = features_window[0].shape
    for f in features_window:
        if f.shape != shape:
            raise ShapeError(f"window features disagree in shape: {f.shape} vs {shape}")
    for wm in weights_window:
        if wm.values.shape != (shape[0], 1, shape[2], shape[3]):
            raise ShapeError(
                f"weight map shape {wm.values.shape} does not match features {shape}"
            )
        # softmax-positive channel vectors cannot produce negative cosines
        assert wm.values.data.min() >= -1e-12, "negative similarity weight"

    total = weights_window[0].values
    for wm in weights_window[1:]:
        total = total + wm.values
    out = (weights_window[0].values / total) * features_window[0]
    for f, wm in zip(features_window[1:], weights_window[1:]):
        out = out + (wm.values / total) * f
    return out


class FlowCache:
    """Write-once cache of warp fields keyed by (source, target) frame pair.

    Fields are not derived from each other by negation; each ordered pair is
    solved independently (the estimator is not exactly antisymmetric).  Every
    frame is rescaled to the full [0, 255] range before estimation, so the
    solver sees comparable intensities even when one frame's contrast sagged.
    """

    def __init__(self, frames: Sequence[np.ndarray], params: FlowParams | None = None):
        self._frames = [normalize_intensity(f) for f in frames]
        self._params = params or FlowParams()
        self._fields: dict[tuple[int, int], FlowField] = {}

    def __len__(self) -> int:
        return len(self._fields)

    def get(self, source: int, target: int) -> FlowField:
        """Field that pulls frame ``source`` into frame ``target`` geometry."""
        key = (source, target)
        if key not in self._fields:
            fld = estimate_flow(self._frames[target], self._frames[source], self._params)
            fld.from_frame = source
            fld.to_frame = target
            self._fields[key] = fld
        return self._fields[key]

    def prefill(self, k: int) -> None:
        """Compute every field an aggregation pass with half-window k uses."""
        n = len(self._frames)
        cfg = AggregationConfig(k=k)
        for i in range(n):
            for j in cfg.window(i, n):
                if j != i:
                    self.get(j, i)


def aggregate_window(
    frames,
    features: Sequence[Tensor],
    i: int,
    cfg: AggregationConfig,
    flow_cache: FlowCache | None = None,
    flow_params: FlowParams | None = None,
) -> Tensor:
    """Aggregate the feature maps of the clamped window around frame ``i``.

    Composition order: fetch the cached warp field for each neighbor, warp
    its feature map toward frame i, compute the softmax-cosine weight against
    frame i's map, then form the normalized weighted sum.  ``frames`` holds
    the raw intensity frames the flow runs on (any sequence of 2-D arrays, or
    an object exposing ``.frames``).
    """
    raw_frames = getattr(frames, "frames", frames)
    n = len(features)
    if len(raw_frames) != n:
        raise ValueError(f"{len(raw_frames)} frames but {n} feature maps")
    window = cfg.window(i, n)
    if flow_cache is None:
        flow_cache = FlowCache(raw_frames, flow_params)

    reference = softmax_channels(features[i])
    warped_maps: list[Tensor] = []
    weight_maps: list[WeightMap] = []
    for j in window:
        if j == i:
            warped = features[i]
        else:
            warped = warp_bilinear(features[j], flow_cache.get(j, i))
        weight = cosine_weight(softmax_channels(warped), reference)
        weight.source, weight.target = j, i
        warped_maps.append(warped)
        weight_maps.append(weight)
    return aggregate(warped_maps, weight_maps)
