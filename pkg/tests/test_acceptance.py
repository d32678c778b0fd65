"""Acceptance suite.

Each criterion runs at its stated tolerance and prints one PASS line when it
holds (run with ``pytest -s`` to see the lines live).  Criterion 5 trains the
per-frame baseline and the dilated aggregating variant end to end through the
CLI on a mixed-difficulty phantom corpus; its module-scoped fixture is shared
by the three required outcomes.
"""

import json
import math
import shutil
import time

import numpy as np
import pytest

from ofnet.aggregation import (
    AggregationConfig,
    FlowCache,
    aggregate_window,
    cosine_weight,
    warp_bilinear,
)
from ofnet.cli import main
from ofnet.flow import FlowField, FlowParams, estimate_flow
from ofnet.layers import (
    RunningStats,
    batchnorm,
    conv2d,
    cross_entropy_loss,
    maxpool2,
    relu,
    softmax_channels,
    upsample2,
)
from ofnet.metrics import Contour, apd, area_curve, dice, marching_squares
from ofnet.model import NetworkConfig, build_network
from ofnet.tensor import Tensor, concat_batch, concat_channels, take_batch

from oracles import apd_dense_sampling, finite_difference_grad, max_relative_error


def announce(number: int, message: str) -> None:
    print(f"ACCEPTANCE {number} PASS - {message}")


# ---------------------------------------------------------------------------
# criterion 1: gradient integrity
# ---------------------------------------------------------------------------


def _fd_assert(loss_fn, tensors, entries_per_tensor=None, step=1e-4, tol=1e-3):
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.reshape(-1)
        if entries_per_tensor is None or entries_per_tensor >= t.size:
            entries = np.arange(t.size)
        else:
            entries = np.random.default_rng(0).choice(t.size, entries_per_tensor, replace=False)
        _, numeric = finite_difference_grad(lambda: loss_fn().item(), t.data,
                                            step=step, entries=entries)
        worst = max(worst, max_relative_error(analytic[entries], numeric))
        t.grad = None
    assert worst < tol, f"finite-difference mismatch: {worst:.2e}"
    return worst


def test_criterion_1_gradient_integrity():
    start = time.time()
    rng = np.random.default_rng(42)
    worst = 0.0

    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    mix = Tensor(rng.normal(size=(1, 3, 6, 6)))
    worst = max(worst, _fd_assert(lambda: (conv2d(x, w, b, padding=1) * mix).sum(), [x, w, b]))
    strided_mix = Tensor(rng.normal(size=(1, 3, 3, 3)))
    worst = max(worst, _fd_assert(
        lambda: (conv2d(x, w, b, stride=2, dilation=2, padding=2) * strided_mix).sum(),
        [x, w, b]))

    gamma = Tensor(np.array([1.5, 0.7]), requires_grad=True)
    beta = Tensor(np.array([0.2, -0.1]), requires_grad=True)
    bn_mix = Tensor(rng.normal(size=(2, 2, 4, 4)))
    xb = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    worst = max(worst, _fd_assert(
        lambda: (batchnorm(xb, gamma, beta, RunningStats.create(2), True) * bn_mix).sum(),
        [xb, gamma, beta]))

    xr = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    relu_mix = Tensor(rng.normal(size=(1, 2, 4, 4)))
    worst = max(worst, _fd_assert(lambda: (relu(xr) * relu_mix).sum(), [xr]))

    xm = Tensor(rng.permutation(64).astype(float).reshape(1, 1, 8, 8) * 0.1, requires_grad=True)
    pool_mix = Tensor(rng.normal(size=(1, 1, 4, 4)))
    worst = max(worst, _fd_assert(lambda: (maxpool2(xm) * pool_mix).sum(), [xm]))

    xu = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    up_mix = Tensor(rng.normal(size=(1, 2, 6, 6)))
    worst = max(worst, _fd_assert(lambda: (upsample2(xu) * up_mix).sum(), [xu]))

    xs = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
    soft_mix = Tensor(rng.normal(size=(1, 3, 3, 3)))
    worst = max(worst, _fd_assert(lambda: (softmax_channels(xs) * soft_mix).sum(), [xs]))

    logits = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    labels = rng.integers(0, 3, size=(1, 4, 4))
    worst = max(worst, _fd_assert(lambda: cross_entropy_loss(logits, labels), [logits]))

    feat = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    flow = FlowField(rng.uniform(-1.2, 1.2, (6, 6)), rng.uniform(-1.2, 1.2, (6, 6)))
    warp_mix = Tensor(rng.normal(size=(1, 2, 6, 6)))
    worst = max(worst, _fd_assert(lambda: (warp_bilinear(feat, flow) * warp_mix).sum(), [feat]))

    va = Tensor(rng.uniform(0.1, 1.0, (1, 3, 4, 4)), requires_grad=True)
    vb = Tensor(rng.uniform(0.1, 1.0, (1, 3, 4, 4)), requires_grad=True)
    worst = max(worst, _fd_assert(lambda: cosine_weight(va, vb).values.sum(), [va, vb]))

    xc = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    cat_mix = Tensor(rng.normal(size=(2, 4, 3, 3)))
    worst = max(worst, _fd_assert(
        lambda: (concat_channels([xc, xc]) * cat_mix).sum(), [xc]))
    batch_mix = Tensor(rng.normal(size=(2, 2, 3, 3)))
    worst = max(worst, _fd_assert(
        lambda: (concat_batch([take_batch(xc, 1), take_batch(xc, 0)]) * batch_mix).sum(), [xc]))

    # full forward path of the aggregating network on a tiny sequence
    frames = []
    y, x_grid = np.mgrid[0:16, 0:16]
    for t in range(3):
        ring = np.hypot(x_grid - 7.5 - 0.5 * t, y - 7.5)
        frame = 40.0 + 120.0 * ((ring > 2.5) & (ring <= 5.0)) + 190.0 * (ring <= 2.5)
        frames.append(frame.astype(np.float64))
    labels_seq = np.zeros((3, 16, 16), dtype=np.int64)
    labels_seq[:, 6:10, 6:10] = 1
    labels_seq[:, 7:9, 7:9] = 2
    model = build_network(NetworkConfig(base_channels=2, depth=2), "ofnet_dilated", seed=3)
    cache = FlowCache(frames, FlowParams(max_iters=40, pyramid_levels=2))
    agg_cfg = AggregationConfig(k=1)

    def ofnet_loss():
        feats_all = model.extract_features(Tensor(np.stack(frames)[:, None] / 255.0), True)
        feats = [take_batch(feats_all, i) for i in range(3)]
        fused = [aggregate_window(frames, feats, i, agg_cfg, cache) for i in range(3)]
        logits = model.segment_from_features(concat_batch(fused), True)
        return cross_entropy_loss(logits, labels_seq)

    params = model.parameters()
    worst = max(worst, _fd_assert(ofnet_loss, params, entries_per_tensor=2))

    elapsed = time.time() - start
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s (budget 60s)"
    announce(1, f"all ops and the full forward path within 1e-3 "
                f"(worst {worst:.2e}, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 2: flow oracle
# ---------------------------------------------------------------------------


def test_criterion_2_flow_oracle(tiny_blob):
    still = tiny_blob(32, 32)
    zero = estimate_flow(still, still)
    assert np.abs(zero.u).max() < 1e-6 and np.abs(zero.v).max() < 1e-6

    worst = 0.0
    for dx, dy in [(1, 0), (-1, 0), (0, 1), (0, -1), (2, 0), (-2, 0), (0, 2), (0, -2)]:
        src = tiny_blob(32, 32)
        dst = tiny_blob(32 + dx, 32 + dy)
        field = estimate_flow(src, dst)
        support = src > 0.1 * src.max()
        err = math.hypot(field.u[support].mean() - dx, field.v[support].mean() - dy)
        assert err < 0.3, f"displacement ({dx},{dy}) recovered with error {err:.3f}"
        worst = max(worst, err)
    announce(2, f"translations within 0.3 px (worst {worst:.3f}), zero motion < 1e-6")


# ---------------------------------------------------------------------------
# criterion 3: aggregation identities
# ---------------------------------------------------------------------------


def test_criterion_3_aggregation_identities():
    rng = np.random.default_rng(11)

    # exact k = 0 identity
    frames = [rng.uniform(0, 255, (12, 12)) for _ in range(4)]
    feats = [Tensor(rng.normal(size=(1, 3, 12, 12))) for _ in range(4)]
    out = aggregate_window(frames, feats, 2, AggregationConfig(k=0))
    assert np.array_equal(out.data, feats[2].data)

    # static-sequence invariance
    static_frames = [np.full((12, 12), 90.0) for _ in range(5)]
    base = rng.normal(size=(1, 3, 12, 12))
    static_feats = [Tensor(base.copy()) for _ in range(5)]
    out = aggregate_window(static_frames, static_feats, 2, AggregationConfig(k=2))
    assert np.abs(out.data - base).max() < 1e-6

    # per-pixel weight normalization over the window
    cache = FlowCache(frames)
    cfg = AggregationConfig(k=2)
    reference = softmax_channels(feats[1])
    total = None
    for j in cfg.window(1, 4):
        mj = feats[1] if j == 1 else warp_bilinear(feats[j], cache.get(j, 1))
        wm = cosine_weight(softmax_channels(mj), reference).values
        total = wm if total is None else total + wm
    normalized_sum = sum((cosine_weight(
        softmax_channels(feats[1] if j == 1 else warp_bilinear(feats[j], cache.get(j, 1))),
        reference).values / total).data for j in cfg.window(1, 4))
    assert np.abs(normalized_sum - 1.0).max() <= 1e-9
    announce(3, "k=0 exact, static sequence within 1e-6, weight sums 1 +/- 1e-9")


# ---------------------------------------------------------------------------
# criterion 4: dilation equivalence
# ---------------------------------------------------------------------------


def test_criterion_4_dilation_equivalence():
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(5):
        x = Tensor(rng.normal(size=(2, 3, 12, 12)))
        w = rng.normal(size=(4, 3, 3, 3))
        b = Tensor(rng.normal(size=4))
        inflated = np.zeros((4, 3, 5, 5))
        inflated[:, :, ::2, ::2] = w
        dilated = conv2d(x, Tensor(w), b, stride=1, dilation=2, padding=2)
        plain = conv2d(x, Tensor(inflated), b, stride=1, dilation=1, padding=2)
        worst = max(worst, float(np.abs(dilated.data - plain.data).max()))
    assert worst < 1e-12
    announce(4, f"dilation-2 equals zero-inflated kernel within 1e-12 (worst {worst:.1e})")


# ---------------------------------------------------------------------------
# criterion 5: phantom experiment
# ---------------------------------------------------------------------------

EXPERIMENT = {
    "presets": ("apex", "middle", "base"),
    "train_per_preset": 7,  # 21 training sequences
    "held_per_preset": 2,  # 6 held-out sequences
    "train_seeds": {"apex": 200, "middle": 300, "base": 400},
    "held_seeds": {"apex": 900, "middle": 910, "base": 920},
    "train_config": {
        "train": {"base_lr": 0.3, "lr_decay": 0.9, "batch_size": 10, "epochs": 6,
                  "k": 2, "seed": 7},
        "network": {"base_channels": 8, "depth": 3},
        "flow": {},
    },
    "corrupt_frame": 8,
}


def _generate_corpus(root, name, per_preset, seeds):
    combined = root / name
    combined.mkdir()
    for preset in EXPERIMENT["presets"]:
        cfg = root / f"gen_{name}_{preset}.json"
        cfg.write_text(json.dumps(
            {"n_sequences": per_preset, "preset": preset, "seed": seeds[preset]}))
        staging = root / f"staging_{name}_{preset}"
        assert main(["generate", "--config", str(cfg), "--out", str(staging)]) == 0
        for seq_dir in sorted(staging.iterdir()):
            if seq_dir.is_dir():
                shutil.move(str(seq_dir), str(combined / f"{preset}_{seq_dir.name}"))
    return combined


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Generate, train both variants, evaluate, and corrupt-test once."""
    start = time.time()
    root = tmp_path_factory.mktemp("experiment")
    train_dir = _generate_corpus(root, "train", EXPERIMENT["train_per_preset"],
                                 EXPERIMENT["train_seeds"])
    held_dir = _generate_corpus(root, "held", EXPERIMENT["held_per_preset"],
                                EXPERIMENT["held_seeds"])
    assert len(list(train_dir.iterdir())) >= 20
    assert len(list(held_dir.iterdir())) >= 5

    train_cfg = root / "train_config.json"
    train_cfg.write_text(json.dumps(EXPERIMENT["train_config"]))

    summaries = {}
    for variant in ("unet", "ofnet_dilated"):
        run_dir = root / f"run_{variant}"
        assert main(["train", "--config", str(train_cfg), "--data", str(train_dir),
                     "--out", str(run_dir), "--variant", variant]) == 0
        eval_dir = root / f"eval_{variant}"
        assert main(["eval", "--checkpoint", str(run_dir / "model.ckpt"),
                     "--data", str(held_dir), "--out", str(eval_dir)]) == 0
        summaries[variant] = json.loads((eval_dir / "summary.json").read_text())["sequences"]

    corrupt_rows = {}
    held_names = sorted(p.name for p in held_dir.iterdir())
    for name in held_names:
        out = root / f"corrupt_{name}"
        assert main([
            "corrupt-test",
            "--ofnet-checkpoint", str(root / "run_ofnet_dilated" / "model.ckpt"),
            "--unet-checkpoint", str(root / "run_unet" / "model.ckpt"),
            "--seq", str(held_dir / name),
            "--frame", str(EXPERIMENT["corrupt_frame"]),
            "--out", str(out),
        ]) == 0
        lines = (out / "comparison.csv").read_text().splitlines()
        header = lines[0].split(",")
        row = dict(zip(header, lines[1 + EXPERIMENT["corrupt_frame"]].split(",")))
        corrupt_rows[name] = row

    elapsed = time.time() - start
    assert elapsed < 1800.0, f"experiment took {elapsed / 60:.1f} min (budget 30 min)"
    return {"summaries": summaries, "corrupt": corrupt_rows, "elapsed": elapsed}


def test_criterion_5a_dice_floor(experiment):
    dice_by_variant = {}
    for variant, seqs in experiment["summaries"].items():
        middle = [s["dice_myo"]["mean"] for s in seqs.values() if s["preset"] == "middle"]
        dice_by_variant[variant] = float(np.mean(middle))
        assert dice_by_variant[variant] >= 0.85
    announce(5, "(a) middle-preset ring Dice >= 0.85: "
                + ", ".join(f"{v}={d:.3f}" for v, d in dice_by_variant.items())
                + f" [experiment {experiment['elapsed'] / 60:.1f} min]")


def test_criterion_5b_temporal_smoothness(experiment):
    means = {}
    for variant, seqs in experiment["summaries"].items():
        means[variant] = float(np.mean([s["smoothness_area_bp"] for s in seqs.values()]))
    assert means["ofnet_dilated"] <= means["unet"], (
        f"aggregating variant rougher: {means['ofnet_dilated']:.5f} > {means['unet']:.5f}"
    )
    announce(5, f"(b) pool-area smoothness {means['ofnet_dilated']:.5f} (aggregating) "
                f"<= {means['unet']:.5f} (per-frame)")


def test_criterion_5c_corruption_recovery(experiment):
    rows = experiment["corrupt"]
    wins = sum(
        float(r["dice_myo_ofnet"]) > float(r["dice_myo_unet"]) for r in rows.values()
    )
    needed = max(4, math.ceil(0.8 * len(rows)))
    assert wins >= needed, f"only {wins}/{len(rows)} corrupted-frame wins"
    detail = ", ".join(
        f"{name.split('_seq')[0]}:{float(r['dice_myo_ofnet']):.2f}>{float(r['dice_myo_unet']):.2f}"
        for name, r in sorted(rows.items())
    )
    announce(5, f"(c) corrupted-frame recovery wins {int(wins)}/{len(rows)} ({detail})")


# ---------------------------------------------------------------------------
# criterion 6: metric oracles
# ---------------------------------------------------------------------------


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(77)

    for case in range(100):
        a = rng.integers(0, 3, size=(9, 9))
        b = rng.integers(0, 3, size=(9, 9))
        for cls in (1, 2):
            sa = {tuple(p) for p in np.argwhere(a == cls)}
            sb = {tuple(p) for p in np.argwhere(b == cls)}
            expected = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
            assert dice(a, b, cls) == expected

    for case in range(100):
        masks = [rng.integers(0, 3, size=(6, 6)) for _ in range(3)]
        for cls in (0, 1, 2):
            curve = area_curve(masks, cls)
            counts = [float(sum(1 for v in m.reshape(-1) if v == cls)) for m in masks]
            assert curve == counts

    worst = 0.0
    for case in range(100):
        contours = []
        while len(contours) < 2:
            m = rng.integers(0, 2, size=(10, 10)).astype(float)
            loops = marching_squares(m) if m.sum() >= 3 else []
            if loops:
                contours.append(Contour(max(loops, key=len)))
        dense = apd_dense_sampling(contours[0].points, contours[1].points,
                                   samples_per_segment=1024)
        err = abs(apd(contours[0], contours[1]) - dense)
        worst = max(worst, err)
        assert err < 1e-6
    announce(6, f"dice/area exact on 100 cases each; APD within 1e-6 of dense "
                f"sampling on 100 cases (worst {worst:.1e})")


# ---------------------------------------------------------------------------
# criterion 7: reproducibility
# ---------------------------------------------------------------------------


def _tree_bytes(root, suffixes=(".csv", ".ckpt", ".json", ".pgm", ".txt")):
    out = {}
    for path in sorted(root.rglob("*")):
        # resolved_config.json intentionally echoes run-specific paths
        if path.is_file() and path.suffix in suffixes and path.name != "resolved_config.json":
            out[path.relative_to(root)] = path.read_bytes()
    return out


def test_criterion_7_reproducibility(tmp_path):
    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps({"n_sequences": 2, "preset": "middle", "size": 32,
                                   "n_frames": 6, "seed": 77, "r_inner_ed": 7.0,
                                   "r_inner_es": 4.5, "wall_thickness_ed": 3.0,
                                   "wall_thickness_es": 4.0, "center_drift": 1.0}))
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps({
        "train": {"base_lr": 0.2, "lr_decay": 0.9, "batch_size": 6, "epochs": 2,
                  "k": 1, "seed": 5},
        "network": {"base_channels": 4, "depth": 2},
        "flow": {"max_iters": 40, "pyramid_levels": 2},
    }))

    trees = {}
    for attempt in ("first", "second"):
        base = tmp_path / attempt
        data = base / "data"
        assert main(["generate", "--config", str(gen_cfg), "--out", str(data)]) == 0
        assert main(["flow", "--seq", str(data / "seq_000"), "--out", str(base / "flows"),
                     "--no-figures"]) == 0
        assert main(["train", "--config", str(train_cfg), "--data", str(data),
                     "--out", str(base / "run"), "--variant", "ofnet_maxpool",
                     "--no-figures"]) == 0
        assert main(["eval", "--checkpoint", str(base / "run" / "model.ckpt"),
                     "--data", str(data), "--out", str(base / "eval"),
                     "--no-figures"]) == 0
        trees[attempt] = _tree_bytes(base)

    assert trees["first"].keys() == trees["second"].keys()
    differing = [str(k) for k in trees["first"] if trees["first"][k] != trees["second"][k]]
    assert not differing, f"outputs differ between identical runs: {differing[:5]}"
    announce(7, f"{len(trees['first'])} output files byte-identical across reruns "
                "(generate, flow, train, eval)")
