"""U-shaped segmentation networks and training.

Three variants share one parameter layout (identical shapes, identical seeded
init) and differ only in how the forward pass composes:

* ``unet``             - every frame segmented independently.
* ``ofnet_maxpool``    - the first encoder stage's feature maps are warped,
                         weighted and aggregated over a temporal window before
                         the rest of the network runs.
* ``ofnet_dilated``    - like ``ofnet_maxpool``, but the configured deep
                         encoder stages skip their max-pool and use dilation-2
                         convolutions instead, keeping full resolution.

Frames enter the networks scaled to [0, 1]; the flow estimator runs on the
raw [0, 255] frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .aggregation import AggregationConfig, FlowCache, aggregate_window
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .flow import FlowParams
from .layers import (
    LayerSpec,
    RunningStats,
    batchnorm,
    conv2d,
    cross_entropy_loss,
    effective_kernel_extent,
    exponential_lr,
    he_normal,
    maxpool2,
    relu,
    sgd_step,
    softmax_channels,
    upsample2,
)
from .phantom import CineSequence, augment_rotate
from .tensor import NumericalError, Tensor, concat_batch, concat_channels, no_grad, take_batch

VARIANTS = ("unet", "ofnet_maxpool", "ofnet_dilated")


@dataclass
class NetworkConfig:
    base_channels: int = 8
    depth: int = 3
    dilated_stages: tuple[int, ...] | None = None
    use_resblocks: bool = True
    num_classes: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dilated_stages is not None:
            self.dilated_stages = tuple(sorted(set(int(s) for s in self.dilated_stages)))
            bad = [s for s in self.dilated_stages if not 1 <= s < self.depth]
            if bad:
                raise ValueError(
                    f"dilated_stages {bad} outside the valid encoder stages 1..{self.depth - 1}"
                )

    def resolved_dilated_stages(self) -> tuple[int, ...]:
        """Stage indices that trade their max-pool for dilation-2 convs.

        Defaults to the two deepest encoder stages when unset.
        """
        if self.dilated_stages is not None:
            return self.dilated_stages
        return tuple(range(max(1, self.depth - 2), self.depth))

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**s for s in range(self.depth)]


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    lr_decay: float = 0.95
    batch_size: int = 10
    epochs: int = 30
    k: int = 2
    seed: int = 0
    augment_rotation_deg: float = 30.0
    augment_copies: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.lr_decay <= 0:
            raise ValueError("base_lr and lr_decay must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.augment_rotation_deg < 0 or self.augment_copies < 0:
            raise ValueError("augmentation settings must be >= 0")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class Conv:
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int = 3, dilation: int = 1, init_scale: float = 1.0):
        self.spec = LayerSpec("conv", in_ch, out_ch, kernel, dilation, 1)
        self.dilation = dilation
        self.padding = effective_kernel_extent(kernel, dilation) // 2
        self.weight = Tensor(
            init_scale * he_normal(rng, out_ch, in_ch, kernel), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, 1, self.dilation, self.padding)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight, True
        yield f"{prefix}.bias", self.bias, True


class BatchNorm:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = RunningStats.create(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.stats, training)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma, True
        yield f"{prefix}.beta", self.beta, True
        yield f"{prefix}.running_mean", self.stats.mean, False
        yield f"{prefix}.running_var", self.stats.var, False


class ConvBlock:
    """conv -> batchnorm -> relu, with an identity skip where channels match."""

    def __init__(self, rng, in_ch: int, out_ch: int, dilation: int, residual: bool):
        self.conv = Conv(rng, in_ch, out_ch, 3, dilation)
        self.bn = BatchNorm(out_ch)
        self.residual = residual and in_ch == out_ch

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.bn(self.conv(x), training)
        if self.residual:
            y = y + x
        return relu(y)

    def named_tensors(self, prefix: str):
        yield from self.conv.named_tensors(f"{prefix}.conv")
        yield from self.bn.named_tensors(f"{prefix}.bn")


class Stage:
    """Two conv blocks; the first changes the channel count."""

    def __init__(self, rng, in_ch: int, out_ch: int, dilation: int, residual: bool):
        self.blocks = [
            ConvBlock(rng, in_ch, out_ch, dilation, residual),
            ConvBlock(rng, out_ch, out_ch, dilation, residual),
        ]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for block in self.blocks:
            x = block(x, training)
        return x

    def named_tensors(self, prefix: str):
        for i, block in enumerate(self.blocks):
            yield from block.named_tensors(f"{prefix}.b{i}")


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


class SegmentationNet:
    def __init__(self, cfg: NetworkConfig, variant: str, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.cfg = cfg
        self.variant = variant
        self.dilated_stages = (
            cfg.resolved_dilated_stages() if variant == "ofnet_dilated" else ()
        )
        rng = np.random.default_rng(seed)
        chans = cfg.stage_channels()
        res = cfg.use_resblocks

        # feature extractor: first encoder stage, full resolution
        self.feature_stage = Stage(rng, cfg.in_channels, chans[0], 1, res)
        # remaining encoder stages; stage s is preceded by a max-pool unless dilated
        self.encoder: list[Stage] = []
        self.pooled: list[bool] = []
        for s in range(1, cfg.depth):
            dilation = 2 if s in self.dilated_stages else 1
            self.encoder.append(Stage(rng, chans[s - 1], chans[s], dilation, res))
            self.pooled.append(s not in self.dilated_stages)
        # decoder mirrors the encoder; stage named by the skip level it restores
        self.decoder: list[Stage] = []
        for s in range(cfg.depth - 2, -1, -1):
            self.decoder.append(Stage(rng, chans[s + 1] + chans[s], chans[s], 1, res))
        # damped classifier init keeps the untrained output near uniform
        self.head = Conv(rng, chans[0], cfg.num_classes, kernel=1, init_scale=0.1)

    # -- parameter registry ---------------------------------------------------

    def _named_tensors(self):
        yield from self.feature_stage.named_tensors("feature")
        for i, stage in enumerate(self.encoder):
            yield from stage.named_tensors(f"enc{i + 1}")
        for i, stage in enumerate(self.decoder):
            yield from stage.named_tensors(f"dec{self.cfg.depth - 2 - i}")
        yield from self.head.named_tensors("head")

    def parameters(self) -> list[Tensor]:
        return [t for _, t, is_param in self._named_tensors() if is_param]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, tensor, is_param in self._named_tensors():
            out[name] = (tensor.data if is_param else tensor).copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {name: (t, is_param) for name, t, is_param in self._named_tensors()}
        extra = [n for n in state if n not in expected]
        if extra:
            raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
        for name, (target, is_param) in expected.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            dest = target.data if is_param else target
            if arr.shape != dest.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {arr.shape}, model expects {dest.shape}"
                )
            dest[...] = arr

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward passes ---------------------------------------------------------

    def extract_features(self, x: Tensor, training: bool = False) -> Tensor:
        return self.feature_stage(x, training)

    def segment_from_features(self, feats: Tensor, training: bool = False) -> Tensor:
        skips = [feats]
        h = feats
        for stage, pooled in zip(self.encoder, self.pooled):
            if pooled:
                h = maxpool2(h)
            h = stage(h, training)
            skips.append(h)
        for i, stage in enumerate(self.decoder):
            s = self.cfg.depth - 2 - i
            if self.pooled[s]:
                h = upsample2(h)
            h = concat_channels([h, skips[s]])
            h = stage(h, training)
        return self.head(h)

    def forward_frame(self, x: Tensor, training: bool = False) -> Tensor:
        """Per-frame logits; the composition the plain per-frame variant uses."""
        return self.segment_from_features(self.extract_features(x, training), training)


def build_network(cfg: NetworkConfig, variant: str, seed: int = 0) -> SegmentationNet:
    return SegmentationNet(cfg, variant, seed)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _frame_tensor(frame: np.ndarray) -> Tensor:
    arr = np.asarray(frame, dtype=np.float64) / 255.0
    return Tensor(arr[None, None])


def forward_unet(model: SegmentationNet, frame) -> np.ndarray:
    """Class probabilities (num_classes, H, W) for a single raw frame."""
    with no_grad():
        logits = model.forward_frame(_frame_tensor(frame), training=False)
        return softmax_channels(logits).data[0]


def forward_ofnet(
    model: SegmentationNet,
    sequence: CineSequence,
    cfg: TrainConfig,
    flow_params: FlowParams | None = None,
    flow_cache: FlowCache | None = None,
) -> np.ndarray:
    """Per-frame class probabilities (n, num_classes, H, W) for a sequence.

    Feature maps are extracted for every frame once, then each frame is
    segmented from its aggregated window.
    """
    frames = sequence.frames
    cache = flow_cache if flow_cache is not None else FlowCache(frames, flow_params)
    agg_cfg = AggregationConfig(k=cfg.k)
    n = len(frames)
    with no_grad():
        stacked = Tensor(np.stack(frames)[:, None] / 255.0)
        feats_all = model.extract_features(stacked, training=False)
        feats = [take_batch(feats_all, i) for i in range(n)]
        fused = [aggregate_window(frames, feats, i, agg_cfg, cache) for i in range(n)]
        logits = model.segment_from_features(concat_batch(fused), training=False)
        return softmax_channels(logits).data


def predict_sequence(
    model: SegmentationNet,
    sequence: CineSequence,
    cfg: TrainConfig | None = None,
    flow_params: FlowParams | None = None,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Predicted label masks (argmax) and probabilities for one sequence,
    honoring the model variant's forward semantics."""
    cfg = cfg or TrainConfig()
    if model.variant == "unet":
        probs = np.stack([forward_unet(model, f) for f in sequence.frames])
    else:
        probs = forward_ofnet(model, sequence, cfg, flow_params)
    masks = [p.argmax(axis=0).astype(np.uint8) for p in probs]
    return masks, probs


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float


def _rotate_sequence(seq: CineSequence, angle_bound: float, seed: int) -> CineSequence:
    """Whole-sequence rotation by one shared angle, keeping motion coherent."""
    frames, labels = [], []
    for f, m in zip(seq.frames, seq.labels):
        rf, rm = augment_rotate(f, m, angle_bound, seed)
        frames.append(rf)
        labels.append(rm)
    return CineSequence(
        frames=frames,
        labels=labels,
        n_frames=seq.n_frames,
        pixel_spacing=seq.pixel_spacing,
        preset=seq.preset,
        config=seq.config,
    )


def _unet_batch_step(model, work, batch) -> float:
    frames = np.stack([work[si].frames[t] for si, t in batch])[:, None] / 255.0
    labels = np.stack([work[si].labels[t] for si, t in batch]).astype(np.int64)
    logits = model.forward_frame(Tensor(frames), training=True)
    loss = cross_entropy_loss(logits, labels)
    loss.backward()
    return loss.item()


def _ofnet_batch_step(model, work, caches, batch, k: int) -> float:
    """One aggregating-variant step, batched like the per-frame path.

    All window frames of the mini-batch go through the feature extractor as
    one batch and all aggregated maps through the segmentation path as one
    batch, so batchnorm sees the same mixed-population statistics in both
    training paths (and at eval time through the running estimates).
    """
    agg_cfg = AggregationConfig(k=k)
    slot: dict[tuple[int, int], int] = {}
    for si, t in batch:
        for j in agg_cfg.window(t, work[si].n_frames):
            slot.setdefault((si, j), len(slot))
    frames = np.stack([work[si].frames[j] for si, j in slot])[:, None] / 255.0
    feats = model.extract_features(Tensor(frames), training=True)

    fused_maps = []
    labels = []
    for si, t in batch:
        seq = work[si]
        window_feats: list[Tensor | None] = [None] * seq.n_frames
        for j in agg_cfg.window(t, seq.n_frames):
            window_feats[j] = take_batch(feats, slot[(si, j)])
        fused_maps.append(aggregate_window(seq.frames, window_feats, t, agg_cfg, caches[si]))
        labels.append(seq.labels[t])
    logits = model.segment_from_features(concat_batch(fused_maps), training=True)
    loss = cross_entropy_loss(logits, np.stack(labels).astype(np.int64))
    loss.backward()
    return loss.item()


def train(
    model: SegmentationNet,
    dataset: Sequence[CineSequence],
    cfg: TrainConfig,
    checkpoint_path=None,
    flow_params: FlowParams | None = None,
) -> tuple[SegmentationNet, list[EpochStats]]:
    """SGD over shuffled mini-batches of (sequence, frame) items.

    Augmented copies (whole-sequence rotations) are materialized up front so
    the flow fields of aggregating variants can be computed once per sequence
    and reused across epochs.  Every random draw comes from ``cfg.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)

    work = list(dataset)
    for _ in range(cfg.augment_copies):
        for seq in dataset:
            work.append(_rotate_sequence(seq, cfg.augment_rotation_deg, int(rng.integers(2**31))))

    caches = None
    if model.variant != "unet":
        caches = [FlowCache(seq.frames, flow_params) for seq in work]
        for cache in caches:
            cache.prefill(cfg.k)

    items = [(si, t) for si, seq in enumerate(work) for t in range(seq.n_frames)]
    params = model.parameters()
    model.zero_grad()
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = exponential_lr(cfg.base_lr, cfg.lr_decay, epoch)
        order = rng.permutation(len(items))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            try:
                if model.variant == "unet":
                    value = _unet_batch_step(model, work, batch)
                else:
                    value = _ofnet_batch_step(model, work, caches, batch, cfg.k)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            sgd_step(params, lr)
            losses.append(value)
        history.append(EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)), lr=lr))
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return model, history


def write_loss_csv(path, history: Iterable[EpochStats]) -> None:
    lines = ["epoch,mean_loss,lr"]
    lines.extend(f"{h.epoch},{h.mean_loss!r},{h.lr!r}" for h in history)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
