"""Synthetic beating-annulus cine sequences with exact ground truth.

Each sequence is one cycle of a contracting/relaxing ring: a bright circular
pool (class 2) enclosed by a mid-gray muscle ring (class 1) on a dark, noisy,
optionally textured background (class 0).  The inner radius and wall
thickness follow cosine laws over the cycle and the center can wobble, so
adjacent frames carry genuine motion for the flow estimator to find.  Labels
are derived from the same analytic geometry as the intensities, which makes
the segmentation task exactly solvable.

Three config presets mimic increasing-to-decreasing difficulty levels:
``apex`` (small thin ring), ``middle`` (large clear ring), ``base`` (large
ring with weak contrast and heavier noise).
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CORRUPTION_MODES = ("contrast_drop", "noise_burst")


@dataclass
class PhantomConfig:
    size: int = 64
    n_frames: int = 16
    r_inner_ed: float = 14.0
    r_inner_es: float = 9.0
    wall_thickness_ed: float = 5.0
    wall_thickness_es: float = 7.0
    center_drift: float = 1.5
    noise_sigma: float = 8.0
    intensity_jitter: float = 0.0
    background_texture: bool = True
    structure_texture: float = 10.0
    seed: int = 0
    preset: str = "custom"
    bg_intensity: float = 40.0
    myo_intensity: float = 110.0
    bp_intensity: float = 230.0
    pixel_spacing: float = 1.0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if not self.r_inner_es < self.r_inner_ed:
            raise ValueError("end-systolic inner radius must be below end-diastolic")
        if min(self.wall_thickness_ed, self.wall_thickness_es) < 1.0:
            raise ValueError("wall thickness must be >= 1 pixel to keep the pool enclosed")
        max_outer = max(
            self.r_inner_ed + self.wall_thickness_ed,
            self.r_inner_es + self.wall_thickness_es,
        )
        if max_outer + self.center_drift + 2.0 > self.size / 2.0:
            raise ValueError(
                f"geometry overflow: outer radius {max_outer:.1f} plus drift "
                f"{self.center_drift:.1f} does not fit a {self.size}x{self.size} image"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.intensity_jitter < 0.5:
            raise ValueError("intensity_jitter must lie in [0, 0.5)")
        if self.structure_texture < 0:
            raise ValueError("structure_texture must be >= 0")


PRESETS: dict[str, dict] = {
    # small, thin ring: hardest to segment, analogous to the top of the structure
    "apex": dict(
        r_inner_ed=6.0,
        r_inner_es=3.5,
        wall_thickness_ed=3.0,
        wall_thickness_es=4.0,
        noise_sigma=8.0,
        myo_intensity=110.0,
    ),
    # large clear ring: the easy mid-level case
    "middle": dict(
        r_inner_ed=14.0,
        r_inner_es=9.0,
        wall_thickness_ed=5.0,
        wall_thickness_es=7.0,
        noise_sigma=8.0,
        myo_intensity=110.0,
    ),
    # weak ring/background contrast plus heavier noise
    "base": dict(
        r_inner_ed=15.0,
        r_inner_es=10.0,
        wall_thickness_ed=4.0,
        wall_thickness_es=6.0,
        noise_sigma=12.0,
        myo_intensity=80.0,
    ),
}


def preset_config(name: str, **overrides) -> PhantomConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    params = dict(PRESETS[name])
    params.update(overrides)
    return PhantomConfig(preset=name, **params)


@dataclass
class CineSequence:
    """Ordered frames of one cycle plus per-frame 3-class label masks."""

    frames: list[np.ndarray]
    labels: list[np.ndarray]
    n_frames: int
    pixel_spacing: float = 1.0
    preset: str = "custom"
    config: dict | None = None

    def __post_init__(self):
        if len(self.frames) != self.n_frames or len(self.labels) != self.n_frames:
            raise ValueError("frames/labels length must equal n_frames")
        for t, (f, m) in enumerate(zip(self.frames, self.labels)):
            if f.shape != m.shape:
                raise ValueError(f"frame {t}: image and label shapes differ")

    @property
    def size(self) -> int:
        return self.frames[0].shape[0]

    def copy(self) -> "CineSequence":
        return CineSequence(
            frames=[f.copy() for f in self.frames],
            labels=[m.copy() for m in self.labels],
            n_frames=self.n_frames,
            pixel_spacing=self.pixel_spacing,
            preset=self.preset,
            config=copy.deepcopy(self.config),
        )


# ---------------------------------------------------------------------------
# analytic geometry
# ---------------------------------------------------------------------------


def inner_radius(cfg: PhantomConfig, t: float) -> float:
    """Inner radius over the cycle; maximal at t=0 and periodic in n_frames."""
    mid = 0.5 * (cfg.r_inner_ed + cfg.r_inner_es)
    amp = 0.5 * (cfg.r_inner_ed - cfg.r_inner_es)
    return mid + amp * np.cos(2.0 * np.pi * t / cfg.n_frames)


def wall_thickness(cfg: PhantomConfig, t: float) -> float:
    """Ring thickness over the cycle; the wall thickens as the pool shrinks."""
    mid = 0.5 * (cfg.wall_thickness_ed + cfg.wall_thickness_es)
    amp = 0.5 * (cfg.wall_thickness_es - cfg.wall_thickness_ed)
    return mid - amp * np.cos(2.0 * np.pi * t / cfg.n_frames)


def ring_center(cfg: PhantomConfig, t: float) -> tuple[float, float]:
    """Cyclic center wobble of amplitude ``center_drift`` starting at rest."""
    c = (cfg.size - 1) / 2.0
    phase = 2.0 * np.pi * t / cfg.n_frames
    dx = 0.5 * cfg.center_drift * np.sin(phase)
    dy = 0.5 * cfg.center_drift * (1.0 - np.cos(phase))
    return c + dx, c + dy


def analytic_pool_area(cfg: PhantomConfig, t: float) -> float:
    return float(np.pi * inner_radius(cfg, t) ** 2)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _background_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth, seeded intensity modulation from a few cosine waves."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    tex = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.cos(2 * np.pi * (fx * x + fy * y) / size + phase)
    return tex * (10.0 / 3.0)


def generate_phantom(cfg: PhantomConfig) -> CineSequence:
    """Deterministic sequence of intensity frames and exact label masks."""
    rng = np.random.default_rng(cfg.seed)
    texture = _background_texture(cfg.size, rng) if cfg.background_texture else 0.0
    phase_myo, phase_bp = rng.uniform(0.0, 2.0 * np.pi, size=2)
    y, x = np.mgrid[0 : cfg.size, 0 : cfg.size].astype(np.float64)

    frames: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for t in range(cfg.n_frames):
        r_in = inner_radius(cfg, t)
        r_out = r_in + wall_thickness(cfg, t)
        cx, cy = ring_center(cfg, t)
        dist = np.hypot(x - cx, y - cy)
        label = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
        label[dist <= r_out] = 1
        label[dist <= r_in] = 2

        image = np.full((cfg.size, cfg.size), cfg.bg_intensity, dtype=np.float64)
        image += np.where(label == 0, texture, 0.0)
        image[label == 1] = cfg.myo_intensity
        image[label == 2] = cfg.bp_intensity
        if cfg.structure_texture > 0:
            # texture pinned to material coordinates (normalized radius and
            # angle), so it deforms with the ring and keeps the flow problem
            # well-posed inside otherwise uniform regions
            theta = np.arctan2(y - cy, x - cx)
            wall = np.maximum(r_out - r_in, 1e-6)
            radial = np.clip((dist - r_in) / wall, 0.0, 1.0)
            myo_tex = np.cos(2.0 * np.pi * 1.5 * radial + 4.0 * theta + phase_myo)
            bp_tex = np.cos(2.0 * np.pi * 1.5 * dist / np.maximum(r_in, 1e-6) + 2.0 * theta + phase_bp)
            image += cfg.structure_texture * np.where(label == 1, myo_tex, 0.0)
            image += cfg.structure_texture * np.where(label == 2, bp_tex, 0.0)
        if cfg.intensity_jitter > 0:
            # per-frame contrast wobble about the background level, emulating
            # acquisition-dependent intensity fluctuation across the cycle
            gain = 1.0 + rng.normal(0.0, cfg.intensity_jitter)
            gain = float(np.clip(gain, 0.5, 1.5))
            image = cfg.bg_intensity + gain * (image - cfg.bg_intensity)
        if cfg.noise_sigma > 0:
            image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
        image = np.clip(np.rint(image), 0, 255)

        frames.append(image)
        labels.append(label)
    return CineSequence(
        frames=frames,
        labels=labels,
        n_frames=cfg.n_frames,
        pixel_spacing=cfg.pixel_spacing,
        preset=cfg.preset,
        config=asdict(cfg),
    )


def corrupt_frame(seq: CineSequence, idx: int, mode: str, seed: int = 0) -> CineSequence:
    """Copy of the sequence with one degraded frame (labels untouched).

    ``contrast_drop`` rescales the frame around its mean by 0.3;
    ``noise_burst`` adds noise at five times the generating sigma.
    """
    if not 0 <= idx < seq.n_frames:
        raise IndexError(f"frame index {idx} outside sequence of length {seq.n_frames}")
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}; choose from {CORRUPTION_MODES}")
    out = seq.copy()
    frame = out.frames[idx]
    if mode == "contrast_drop":
        mean = frame.mean()
        frame = mean + 0.3 * (frame - mean)
    else:
        base_sigma = (seq.config or {}).get("noise_sigma", 8.0)
        rng = np.random.default_rng(seed)
        frame = frame + rng.normal(0.0, 5.0 * base_sigma, frame.shape)
    out.frames[idx] = np.clip(np.rint(frame), 0, 255)
    return out


# ---------------------------------------------------------------------------
# preprocessing / augmentation
# ---------------------------------------------------------------------------


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Linear rescale of the value range to [0, 255]; constant maps to zero."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) * (255.0 / (hi - lo))


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image extent {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top : top + size, left : left + size].copy()


def _rotate(image: np.ndarray, angle_rad: float, order: str) -> np.ndarray:
    """Rotate about the image center; bilinear or nearest, zero fill outside."""
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cos_a, sin_a = np.cos(angle_rad), np.sin(angle_rad)
    # inverse mapping: output pixel pulls from the source rotated by -angle
    xs = cos_a * (x - cx) + sin_a * (y - cy) + cx
    ys = -sin_a * (x - cx) + cos_a * (y - cy) + cy
    if order == "nearest":
        xi = np.rint(xs).astype(int)
        yi = np.rint(ys).astype(int)
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.zeros_like(image)
        out[valid] = image[yi[valid], xi[valid]]
        return out
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(image.shape, dtype=np.float64)
    for (yc, xc, wgt) in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x0 + 1, fx * (1 - fy)),
        (y0 + 1, x0, (1 - fx) * fy),
        (y0 + 1, x0 + 1, fx * fy),
    ):
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        out[valid] += image[yc[valid], xc[valid]] * wgt[valid]
    return out


def augment_rotate(
    image: np.ndarray, label: np.ndarray, angle_deg: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate an image/label pair by an angle drawn from [-angle_deg, +angle_deg].

    The image is resampled bilinearly (then requantized), the label with
    nearest neighbor so class ids stay in {0, 1, 2}.
    """
    if angle_deg < 0:
        raise ValueError("angle_deg bound must be >= 0")
    angle = np.random.default_rng(seed).uniform(-angle_deg, angle_deg)
    if angle == 0.0:
        return np.asarray(image, dtype=np.float64).copy(), np.asarray(label).copy()
    rad = np.deg2rad(angle)
    rot_image = np.clip(np.rint(_rotate(np.asarray(image, dtype=np.float64), rad, "bilinear")), 0, 255)
    rot_label = _rotate(np.asarray(label), rad, "nearest").astype(label.dtype)
    return rot_image, rot_label


# ---------------------------------------------------------------------------
# sequence I/O: 8-bit binary PGM frames plus a JSON manifest
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    data = np.rint(arr).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    match = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not match:
        raise ValueError(f"{path.name}: not a binary PGM file")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval > 255:
        raise ValueError(f"{path.name}: only 8-bit PGM supported (maxval {maxval})")
    pixels = raw[match.end() :]
    if len(pixels) != w * h:
        raise ValueError(f"{path.name}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def save_sequence(seq: CineSequence, directory) -> None:
    """Write ``frame_%03d.pgm`` / ``label_%03d.pgm`` plus ``sequence.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in range(seq.n_frames):
        write_pgm(directory / f"frame_{t:03d}.pgm", seq.frames[t])
        write_pgm(directory / f"label_{t:03d}.pgm", seq.labels[t])
    manifest = {
        "n_frames": seq.n_frames,
        "size": seq.size,
        "pixel_spacing": seq.pixel_spacing,
        "preset": seq.preset,
        "config": seq.config,
    }
    (directory / "sequence.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_sequence(directory) -> CineSequence:
    directory = Path(directory)
    manifest_path = directory / "sequence.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no sequence.json manifest in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
        n = int(manifest["n_frames"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{manifest_path}: malformed sequence manifest ({exc})") from None
    frames, labels = [], []
    for t in range(n):
        frame_path = directory / f"frame_{t:03d}.pgm"
        label_path = directory / f"label_{t:03d}.pgm"
        if not frame_path.exists():
            raise FileNotFoundError(f"missing image for frame {t}: {frame_path.name}")
        if not label_path.exists():
            raise FileNotFoundError(f"missing label for frame {t}: {label_path.name}")
        frames.append(read_pgm(frame_path).astype(np.float64))
        labels.append(read_pgm(label_path))
    return CineSequence(
        frames=frames,
        labels=labels,
        n_frames=n,
        pixel_spacing=float(manifest.get("pixel_spacing", 1.0)),
        preset=manifest.get("preset", "custom"),
        config=manifest.get("config"),
    )
