"""Batch entry points.

Five subcommands cover the pipeline: ``generate`` synthetic sequences,
``flow`` fields between adjacent frames, ``train`` one network variant,
``eval`` a checkpoint against held-out sequences, and ``corrupt-test`` the
temporal-recovery comparison between an aggregating model and the per-frame
baseline.

Conventions shared by every command: ``--config`` points at a JSON document
validated with unknown keys rejected, ``--seed`` overrides the config seed,
``--out`` is the only directory written to, and the fully resolved
configuration is echoed there as ``resolved_config.json``.  Exit codes:
0 success, 1 validation error, 2 numerical failure.  Report commands render
figures next to their CSV output unless ``--no-figures`` is given.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .flow import FlowParams, estimate_flow, save_flow_text
from .metrics import dice, evaluate_sequence
from .model import (
    NetworkConfig,
    TrainConfig,
    VARIANTS,
    build_network,
    predict_sequence,
    train,
    write_loss_csv,
)
from .phantom import (
    PRESETS,
    CORRUPTION_MODES,
    PhantomConfig,
    corrupt_frame,
    generate_phantom,
    load_sequence,
    normalize_intensity,
    preset_config,
    save_sequence,
    write_pgm,
)
from .tensor import NumericalError


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _strict_dataclass(cls, data: dict, context: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {context}: {exc}") from None


def _reject_unknown(data: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {', '.join(unknown)}")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_config(out_dir: Path, resolved: dict) -> None:
    _write_json(out_dir / "resolved_config.json", resolved)


def _discover_sequences(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"data directory not found: {data_dir}")
    dirs = sorted(p for p in data_dir.iterdir() if (p / "sequence.json").exists())
    if not dirs:
        raise ConfigError(f"no sequence directories (with sequence.json) under {data_dir}")
    return dirs


def _parse_train_config(raw: dict, seed_override: int | None):
    _reject_unknown(raw, {"train", "network", "flow", "variant"}, "train config")
    train_cfg = _strict_dataclass(TrainConfig, raw.get("train", {}), "train section")
    if seed_override is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=seed_override)
    net_raw = dict(raw.get("network", {}))
    if "dilated_stages" in net_raw and net_raw["dilated_stages"] is not None:
        net_raw["dilated_stages"] = tuple(net_raw["dilated_stages"])
    net_cfg = _strict_dataclass(NetworkConfig, net_raw, "network section")
    flow_cfg = _strict_dataclass(FlowParams, raw.get("flow", {}), "flow section")
    return train_cfg, net_cfg, flow_cfg


def _resolved_train_dict(variant: str, train_cfg, net_cfg, flow_cfg) -> dict:
    return {
        "variant": variant,
        "train": dataclasses.asdict(train_cfg),
        "network": {
            **dataclasses.asdict(net_cfg),
            "dilated_stages": list(net_cfg.resolved_dilated_stages()),
        },
        "flow": dataclasses.asdict(flow_cfg),
    }


def _load_model_bundle(checkpoint_path, config_path=None):
    """Rebuild the network a checkpoint belongs to.

    The architecture comes from an explicit config file or, by default, from
    the ``resolved_config.json`` the training run left next to the checkpoint.
    """
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    if config_path is None:
        sibling = checkpoint_path.parent / "resolved_config.json"
        if not sibling.exists():
            raise ConfigError(
                f"no resolved_config.json next to {checkpoint_path.name}; pass --config"
            )
        config_path = sibling
    raw = _load_config(config_path)
    variant = raw.get("variant")
    if variant not in VARIANTS:
        raise ConfigError(f"config {config_path} lacks a valid 'variant' entry")
    train_cfg, net_cfg, flow_cfg = _parse_train_config(
        {k: v for k, v in raw.items() if k != "variant"}, None
    )
    model = build_network(net_cfg, variant, seed=train_cfg.seed)
    model.load(checkpoint_path)
    return model, variant, train_cfg, net_cfg, flow_cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_generate(config: dict, out_dir, seed_override: int | None = None) -> int:
    phantom_fields = {f.name for f in dataclasses.fields(PhantomConfig)}
    _reject_unknown(config, {"n_sequences"} | phantom_fields, "generate config")
    n_sequences = int(config.get("n_sequences", 1))
    if n_sequences < 1:
        raise ConfigError("n_sequences must be >= 1")
    preset = config.get("preset", "middle")
    base_seed = int(config.get("seed", 0)) if seed_override is None else seed_override
    overrides = {
        k: v for k, v in config.items() if k in phantom_fields and k not in ("preset", "seed")
    }

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_sequences):
        try:
            if preset in PRESETS:
                cfg = preset_config(preset, seed=base_seed + i, **overrides)
            else:
                cfg = PhantomConfig(preset=preset, seed=base_seed + i, **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid phantom settings: {exc}") from None
        seq = generate_phantom(cfg)
        seq_dir = out_dir / f"seq_{i:03d}"
        save_sequence(seq, seq_dir)
        entries.append({"dir": seq_dir.name, "preset": cfg.preset, "seed": cfg.seed})

    _write_json(out_dir / "manifest.json", {"sequences": entries})
    resolved = {"n_sequences": n_sequences, "seed": base_seed,
                **dataclasses.asdict(dataclasses.replace(cfg, seed=base_seed))}
    _echo_config(out_dir, resolved)
    print(f"generated {n_sequences} sequences under {out_dir}")
    return 0


def run_flow(seq_dir, out_dir, config: dict, seed: int = 0, figures: bool = True) -> int:
    params = _strict_dataclass(FlowParams, config, "flow config")
    seq = load_sequence(seq_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    normalized = [normalize_intensity(f) for f in seq.frames]
    for t in range(seq.n_frames - 1):
        field = estimate_flow(normalized[t], normalized[t + 1], params)
        field.from_frame, field.to_frame = t, t + 1
        save_flow_text(out_dir / f"flow_{t:03d}_to_{t + 1:03d}.txt", field)
        rows.append(
            {
                "pair": f"{t}->{t + 1}",
                "mean_abs_u": float(np.abs(field.u).mean()),
                "mean_abs_v": float(np.abs(field.v).mean()),
                "mean_magnitude": float(field.magnitude().mean()),
            }
        )
        if figures and t == seq.n_frames // 2:
            from .figures import save_flow_figure

            save_flow_figure(out_dir / f"flow_{t:03d}_to_{t + 1:03d}.png", seq.frames[t], field)

    with open(out_dir / "flow_summary.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["pair", "mean_abs_u", "mean_abs_v", "mean_magnitude"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (v if isinstance(v, str) else repr(v)) for k, v in row.items()})

    _echo_config(out_dir, {"seed": seed, "seq_dir": str(seq_dir), **dataclasses.asdict(params)})
    print(f"wrote {seq.n_frames - 1} flow fields under {out_dir}")
    return 0


def run_train(config: dict, data_dir, out_dir, variant: str,
              seed_override: int | None = None, figures: bool = True) -> int:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    train_cfg, net_cfg, flow_cfg = _parse_train_config(config, seed_override)
    sequences = [load_sequence(d) for d in _discover_sequences(data_dir)]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, _resolved_train_dict(variant, train_cfg, net_cfg, flow_cfg))

    model = build_network(net_cfg, variant, seed=train_cfg.seed)
    model, history = train(
        model,
        sequences,
        train_cfg,
        checkpoint_path=out_dir / "model.ckpt",
        flow_params=flow_cfg,
    )
    write_loss_csv(out_dir / "loss_history.csv", history)
    if figures:
        from .figures import save_loss_curve_figure

        save_loss_curve_figure(out_dir / "loss_history.png", history, title=variant)
    print(
        f"trained {variant} for {train_cfg.epochs} epochs; "
        f"final mean loss {history[-1].mean_loss:.6f}"
    )
    return 0


def run_eval(checkpoint, data_dir, out_dir, config_path=None, seed: int = 0,
             figures: bool = True) -> int:
    model, variant, train_cfg, net_cfg, flow_cfg = _load_model_bundle(checkpoint, config_path)
    seq_dirs = _discover_sequences(data_dir)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(
        out_dir,
        {
            "checkpoint": str(checkpoint),
            "data_dir": str(data_dir),
            "seed": seed,
            **_resolved_train_dict(variant, train_cfg, net_cfg, flow_cfg),
        },
    )

    summaries = {}
    for seq_dir in seq_dirs:
        name = seq_dir.name
        seq = load_sequence(seq_dir)
        masks, _ = predict_sequence(model, seq, train_cfg, flow_cfg)
        report = evaluate_sequence(masks, seq.labels, preset=seq.preset,
                                   pixel_spacing=seq.pixel_spacing)
        report.write_csv(out_dir / f"metrics_{name}.csv")
        report.write_summary_json(out_dir / f"summary_{name}.json")
        _write_area_curves_csv(out_dir / f"area_curves_{name}.csv", report)
        pred_dir = out_dir / f"pred_{name}"
        pred_dir.mkdir(exist_ok=True)
        for t, mask in enumerate(masks):
            write_pgm(pred_dir / f"label_{t:03d}.pgm", mask)
        if figures:
            from .figures import save_area_curves_figure

            save_area_curves_figure(
                out_dir / f"area_curves_{name}.png",
                report.area_myo,
                report.area_bp,
                report.gt_area_myo,
                report.gt_area_bp,
                title=f"{variant} on {name}",
            )
        summaries[name] = report.summary()

    _write_json(out_dir / "summary.json", {"variant": variant, "sequences": summaries})
    print(f"evaluated {len(seq_dirs)} sequences under {out_dir}")
    return 0


def _write_area_curves_csv(path, report) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "pred_area_myo", "pred_area_bp", "gt_area_myo", "gt_area_bp"])
        for t in range(report.n_frames):
            writer.writerow(
                [
                    t,
                    repr(report.area_myo[t]),
                    repr(report.area_bp[t]),
                    repr(report.gt_area_myo[t]),
                    repr(report.gt_area_bp[t]),
                ]
            )


def run_corrupt_test(
    ofnet_checkpoint,
    unet_checkpoint,
    seq_dir,
    frame_idx: int,
    out_dir,
    mode: str = "contrast_drop",
    seed: int = 0,
    figures: bool = True,
) -> int:
    if mode not in CORRUPTION_MODES:
        raise ConfigError(f"unknown corruption mode {mode!r}; choose from {CORRUPTION_MODES}")
    model_of, variant_of, cfg_of, _, flow_of = _load_model_bundle(ofnet_checkpoint)
    model_un, variant_un, cfg_un, _, flow_un = _load_model_bundle(unet_checkpoint)
    if variant_of == "unet":
        raise ConfigError("the first checkpoint must be an aggregating variant")
    if variant_un != "unet":
        raise ConfigError("the second checkpoint must be the per-frame unet variant")

    seq = load_sequence(seq_dir)
    if not 0 <= frame_idx < seq.n_frames:
        raise ConfigError(f"frame index {frame_idx} outside sequence of {seq.n_frames} frames")
    corrupted = corrupt_frame(seq, frame_idx, mode, seed=seed)

    masks_of, _ = predict_sequence(model_of, corrupted, cfg_of, flow_of)
    masks_un, _ = predict_sequence(model_un, corrupted, cfg_un, flow_un)

    rows = []
    for t in range(seq.n_frames):
        rows.append(
            {
                "frame": t,
                "dice_myo_ofnet": dice(masks_of[t], seq.labels[t], 1),
                "dice_bp_ofnet": dice(masks_of[t], seq.labels[t], 2),
                "dice_myo_unet": dice(masks_un[t], seq.labels[t], 1),
                "dice_bp_unet": dice(masks_un[t], seq.labels[t], 2),
                "corrupted": int(t == frame_idx),
            }
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "comparison.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}
            )
    if figures:
        from .figures import save_corruption_figure

        save_corruption_figure(out_dir / "comparison.png", rows, frame_idx)
    _echo_config(
        out_dir,
        {
            "ofnet_checkpoint": str(ofnet_checkpoint),
            "unet_checkpoint": str(unet_checkpoint),
            "seq_dir": str(seq_dir),
            "frame_idx": frame_idx,
            "mode": mode,
            "seed": seed,
        },
    )
    at = rows[frame_idx]
    print(
        f"corrupted frame {frame_idx} ({mode}): ring Dice "
        f"aggregating={at['dice_myo_ofnet']:.3f} per-frame={at['dice_myo_unet']:.3f}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ofnet",
        description="Synthetic cine segmentation pipeline: generate, flow, train, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (unknown keys rejected)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("generate", help="write synthetic phantom sequences")
    common(p)

    p = sub.add_parser("flow", help="flow fields between adjacent frames of one sequence")
    common(p)
    p.add_argument("--seq", required=True, help="sequence directory")

    p = sub.add_parser("train", help="train one network variant")
    common(p)
    p.add_argument("--data", required=True, help="directory of sequence directories")
    p.add_argument("--variant", required=True, choices=VARIANTS)

    p = sub.add_parser("eval", help="evaluate a checkpoint on sequences")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory of sequence directories")

    p = sub.add_parser("corrupt-test", help="compare both models on a corrupted frame")
    common(p)
    p.add_argument("--ofnet-checkpoint", required=True)
    p.add_argument("--unet-checkpoint", required=True)
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--frame", type=int, required=True, help="frame index to corrupt")
    p.add_argument("--mode", default=None, choices=CORRUPTION_MODES)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    figures = not args.no_figures
    try:
        config = _load_config(args.config)
        if args.command == "generate":
            return run_generate(config, args.out, args.seed)
        if args.command == "flow":
            return run_flow(args.seq, args.out, config, seed=args.seed or 0, figures=figures)
        if args.command == "train":
            return run_train(config, args.data, args.out, args.variant,
                             seed_override=args.seed, figures=figures)
        if args.command == "eval":
            return run_eval(args.checkpoint, args.data, args.out,
                            config_path=args.config, seed=args.seed or 0, figures=figures)
        _reject_unknown(config, {"mode"}, "corrupt-test config")
        return run_corrupt_test(
            args.ofnet_checkpoint,
            args.unet_checkpoint,
            args.seq,
            args.frame,
            args.out,
            mode=args.mode or config.get("mode", "contrast_drop"),
            seed=args.seed or 0,
            figures=figures,
        )
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
