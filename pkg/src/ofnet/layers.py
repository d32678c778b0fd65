"""Layer primitives over Tensor: convolution (with dilation), batch
normalization, pooling, nearest-neighbor upsampling, channel softmax, the
pixel-wise cross-entropy loss, and the SGD update rule.

Convolution is the hot path, so it goes through an im2col matmul; every other
operation is a handful of vectorized numpy calls with a hand-written backward
closure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DEFAULT_DTYPE, NumericalError, ShapeError, Tensor

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "upsample", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer, validated at construction."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.dilation > 1 and self.kind != "conv":
            raise ValueError("dilation > 1 is only valid for conv layers")

    @property
    def effective_kernel(self) -> int:
        """Receptive extent of the kernel once dilation gaps are counted."""
        return self.kernel_size + (self.kernel_size - 1) * (self.dilation - 1)


def effective_kernel_extent(kernel_size: int, dilation: int) -> int:
    return kernel_size + (kernel_size - 1) * (dilation - 1)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of a (N, C, H, W) tensor with (O, C, k, k) kernels.

    Dilation > 1 spreads the kernel taps apart, enlarging the receptive field
    without adding parameters; combined with stride 1 and matching padding it
    preserves the spatial extent.  Differentiable w.r.t. input, weight, bias.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N, C, H, W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (O, C, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {in_ch}")
    if bias.shape != (out_ch,):
        raise ShapeError(f"conv2d bias must have shape ({out_ch},), got {bias.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1, padding >= 0")

    eff_h = effective_kernel_extent(kh, dilation)
    eff_w = effective_kernel_extent(kw, dilation)
    hp, wp = h + 2 * padding, w + 2 * padding
    out_h = (hp - eff_h) // stride + 1
    out_w = (wp - eff_w) // stride + 1
    if hp < eff_h or wp < eff_w:
        raise ShapeError(
            f"conv2d kernel (effective {eff_h}x{eff_w}) larger than padded input {hp}x{wp}"
        )

    if padding:
        x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        x_pad = x.data
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, (eff_h, eff_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation]
    # (N, C, OH, OW, kh, kw) -> (N*OH*OW, C*kh*kw); the copy feeds BLAS
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * out_h * out_w, c * kh * kw
    )
    w_mat = weight.data.reshape(out_ch, c * kh * kw)
    out = (cols @ w_mat.T).reshape(n, out_h, out_w, out_ch).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * out_h * out_w, out_ch)
        bias._accumulate(g.sum(axis=(0, 2, 3)))
        weight._accumulate((g_mat.T @ cols).reshape(out_ch, c, kh, kw))
        if x.requires_grad:
            g_cols = (g_mat @ w_mat).reshape(n, out_h, out_w, c, kh, kw)
            g_pad = np.zeros((n, c, hp, wp), dtype=DEFAULT_DTYPE)
            for i in range(kh):
                for j in range(kw):
                    g_pad[
                        :,
                        :,
                        i * dilation : i * dilation + stride * out_h : stride,
                        j * dilation : j * dilation + stride * out_w : stride,
                    ] += g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                g_pad = g_pad[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(g_pad)

    return Tensor._from_op(out, (x, weight, bias), backward_fn, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batchnorm at eval time."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "RunningStats":
        return cls(
            mean=np.zeros(channels, dtype=DEFAULT_DTYPE),
            var=np.ones(channels, dtype=DEFAULT_DTYPE),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: RunningStats,
    training: bool,
) -> Tensor:
    """Per-channel normalization of a (N, C, H, W) tensor.

    Training mode normalizes with the batch statistics and folds them into the
    running estimates; eval mode uses the running estimates only.  A variance
    floor of ``eps`` keeps constant inputs finite.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-D, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")

    gamma_b = gamma.data[None, :, None, None]
    eps = running_stats.eps

    if training:
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = running_stats.momentum
        running_stats.mean[...] = (1.0 - mom) * running_stats.mean + mom * mean
        running_stats.var[...] = (1.0 - mom) * running_stats.var + mom * var
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma_b * x_hat + beta.data[None, :, None, None]

        def backward_fn(g):
            g_hat = g * gamma_b
            gamma._accumulate((g * x_hat).sum(axis=axes))
            beta._accumulate(g.sum(axis=axes))
            if x.requires_grad:
                inv = inv_std[None, :, None, None]
                sum_g = g_hat.sum(axis=axes, keepdims=True)
                sum_gx = (g_hat * x_hat).sum(axis=axes, keepdims=True)
                x._accumulate(inv / m * (m * g_hat - sum_g - x_hat * sum_gx))

        return Tensor._from_op(out, (x, gamma, beta), backward_fn, "batchnorm")

    inv_std = 1.0 / np.sqrt(running_stats.var + eps)
    scale = gamma_b * inv_std[None, :, None, None]
    x_hat = (x.data - running_stats.mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma_b * x_hat + beta.data[None, :, None, None]

    def backward_fn(g):
        gamma._accumulate((g * x_hat).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(g * scale)

    return Tensor._from_op(out, (x, gamma, beta), backward_fn, "batchnorm")


# ---------------------------------------------------------------------------
# activations, pooling, resampling
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward_fn(g):
        x._accumulate(g * mask)

    return Tensor._from_op(out, (x,), backward_fn, "relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Ties route the gradient to the first maximal element in row-major window
    order, which keeps backward deterministic.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    )
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not x.requires_grad:
            return
        g_win = np.zeros((n, c, h2, w2, 4), dtype=DEFAULT_DTYPE)
        np.put_along_axis(g_win, arg[..., None], g[..., None], axis=-1)
        x._accumulate(
            g_win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        )

    return Tensor._from_op(out, (x,), backward_fn, "maxpool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling; backward sums each 2x2 block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2 input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._from_op(out, (x,), backward_fn, "upsample2")


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis of a (N, C, H, W) tensor."""
    if x.ndim != 4:
        raise ShapeError(f"softmax_channels input must be 4-D, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("softmax_channels needs at least one channel")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            x._accumulate(out * (g - dot))

    return Tensor._from_op(out, (x,), backward_fn, "softmax_channels")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel-wise negative log-likelihood of the true class.

    ``logits`` has shape (N, C, H, W); ``labels`` holds integer class ids of
    shape (N, H, W) or (H, W).
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy_loss logits must be 4-D, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits spatial shape {(n, h, w)}"
        )
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c - 1}], found range "
                         f"[{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    idx_n, idx_h, idx_w = np.indices(labels.shape)
    picked = log_probs[idx_n, labels, idx_h, idx_w]
    count = labels.size
    loss = -picked.sum() / count

    def backward_fn(g):
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[idx_n, labels, idx_h, idx_w] -= 1.0
            logits._accumulate(probs * (float(g) / count))

    return Tensor._from_op(np.asarray(loss), (logits,), backward_fn, "cross_entropy_loss")


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def sgd_step(params, lr: float):
    """In-place SGD update ``p <- p - lr * p.grad``; clears gradients after."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
            if not np.isfinite(p.data).all():
                raise NumericalError("sgd_step produced non-finite parameters")
            p.grad = None
    return params


def exponential_lr(base_lr: float, decay_rate: float, epoch: int) -> float:
    """Exponentially decayed learning rate ``base_lr * decay_rate ** epoch``."""
    if base_lr <= 0 or decay_rate <= 0:
        raise ValueError("base_lr and decay_rate must be positive")
    return base_lr * decay_rate**epoch


def he_normal(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    """Fan-in scaled normal init for a conv kernel (out_ch, in_ch, k, k)."""
    fan_in = in_ch * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
