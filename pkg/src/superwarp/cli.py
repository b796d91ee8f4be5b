"""Command-line front end: ``superwarp {synth,train,eval,register,ablate,selftest}``.

Exit codes: 0 success, 1 validation failure (bad config, arguments or
incompatible inputs), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as swio
from .data import Dataset, load_manifest, synthetic_dataset
from .fieldcore import warp
from .network import ModelConfig
from .objectives import epe
from .selftest import run_selftest
from .synthgen import make_training_pair, reconstruction_error
from .trainer import (
    CheckpointError,
    TrainConfig,
    ablate,
    evaluate,
    format_ablation_table,
    load_checkpoint,
    make_eval_set,
    predict,
    train,
)
from .viz import epe_map, flow_to_color, plot_curves

log = logging.getLogger("superwarp")

OK, INVALID, FAILED = 0, 1, 2
RECONSTRUCTION_LIMIT = 1e-3


class ValidationError(Exception):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON TrainConfig file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("superwarp_out"), help="output directory")
    common.add_argument("--device", default="cpu", help="torch device (cpu only unless CUDA is present)")
    common.add_argument("--levels", type=int)
    common.add_argument("--loss", choices=["mse", "epe", "dice"])
    common.add_argument("--multi-scale-loss", type=_on_off, metavar="{on,off}")
    common.add_argument("--multi-scale-warp", type=_on_off, metavar="{on,off}")
    common.add_argument("--accumulate", choices=["add", "compose"])
    common.add_argument("--desk", action="store_true", help="start from the reduced-scale preset")
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", type=Path, help="JSON dataset manifest")
    data.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic textures instead")
    data.add_argument("--size", type=int, default=128, help="synthetic texture extent")
    data.add_argument("--labels", action="store_true", help="synthetic textures carry label maps")

    parser = argparse.ArgumentParser(
        prog="superwarp", description="Train and apply multi-scale warping registration networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common, data], help="write synthetic training triplets")
    p.add_argument("-n", type=int, default=10)

    p = sub.add_parser("train", parents=[common, data], help="train a model")
    p.add_argument("--val-pairs", type=int, default=16)
    p.add_argument("--iterations", type=int, help="override total iterations")

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint on synthetic pairs")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=16)

    p = sub.add_parser("register", parents=[common], help="register one image pair")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--gt", type=Path, help="ground-truth field (SWTENSOR) for an EPE report")

    p = sub.add_parser("ablate", parents=[common, data], help="one-axis-at-a-time ablation table")
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help="e.g. levels=4,5 or multi_scale_warp=on,off (repeatable)")
    p.add_argument("--val-pairs", type=int, default=16)
    p.add_argument("--iterations", type=int)

    sub.add_parser("selftest", parents=[common], help="oracle, gradient and determinism checks")
    return parser


# ---------------------------------------------------------------------------
# configuration


def load_config(args) -> TrainConfig:
    """Config file (or default/desk preset) with command-line overrides applied, validated."""
    try:
        if args.config is not None:
            raw = json.loads(args.config.read_text())
            if args.desk:
                merged = TrainConfig.desk().to_dict()
                for key, value in raw.items():
                    if isinstance(value, dict) and isinstance(merged.get(key), dict):
                        merged[key].update(value)
                    else:
                        merged[key] = value
                raw = merged
            cfg = TrainConfig.from_dict(raw)
        else:
            cfg = TrainConfig.desk() if args.desk else TrainConfig()
        model = cfg.model
        if args.levels is not None:
            model = dataclasses.replace(model, levels=args.levels, features_per_level=None)
        if args.multi_scale_warp is not None:
            model = dataclasses.replace(model, multi_scale_warp=args.multi_scale_warp)
        if args.accumulate is not None:
            mode = {"add": "additive", "compose": "compositional"}[args.accumulate]
            model = dataclasses.replace(model, accumulate_mode=mode)
        loss = cfg.loss
        if args.loss is not None:
            loss = dataclasses.replace(loss, kind=args.loss)
        if args.multi_scale_loss is not None:
            loss = dataclasses.replace(loss, multi_scale=args.multi_scale_loss)
        updates = {"model": model, "loss": loss}
        if args.seed is not None:
            updates["seed"] = args.seed
        if getattr(args, "iterations", None) is not None:
            updates["total_iterations"] = args.iterations
            updates["warmstart_iterations"] = min(cfg.warmstart_iterations, args.iterations)
        return dataclasses.replace(cfg, **updates)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid configuration: {exc}") from exc


def check_levels(model_cfg: ModelConfig, shape) -> None:
    """Reject level counts that would shrink a level below one voxel."""
    limit = math.floor(math.log2(min(shape))) + 1
    if model_cfg.levels > limit:
        raise ValidationError(
            f"{model_cfg.levels} levels exceed log2(min extent)+1 = {limit} for images of shape {tuple(shape)}"
        )
    try:
        model_cfg.check_input_shape(tuple(shape))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def load_dataset(args, seed: int) -> Dataset:
    if args.manifest is not None:
        try:
            return load_manifest(args.manifest)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read manifest: {exc}") from exc
    if args.synthetic:
        return synthetic_dataset(args.synthetic, (args.size, args.size), seed, with_labels=args.labels)
    raise ValidationError("need --manifest or --synthetic N")


def _check_device(device: str) -> None:
    if device != "cpu" and not (device.startswith("cuda") and torch.cuda.is_available()):
        raise ValidationError(f"device {device!r} is not available")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_config(args)
    try:
        dataset = load_dataset(args, cfg.seed)
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return FAILED
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest is not None:
        shutil.copyfile(args.manifest, out / "manifest.json")
    else:
        (out / "manifest.json").write_text(json.dumps({"synthetic": args.synthetic, "seed": cfg.seed}))
    eval_set = make_eval_set(dataset, cfg.spatial, cfg.intensity, args.n, cfg.seed)
    for i, t in enumerate(eval_set):
        err = reconstruction_error(t)
        if not err < RECONSTRUCTION_LIMIT:
            print(f"triplet {i} (seed {t.seed}) fails reconstruction: mse {err:.3g}", file=sys.stderr)
            return FAILED
        d = out / f"triplet_{i:05d}"
        d.mkdir(exist_ok=True)
        swio.save_tensor(d / "fixed.swt", t.fixed)
        swio.save_tensor(d / "moving.swt", t.moving)
        swio.save_tensor(d / "target.swt", t.target)
        (d / "seed.txt").write_text(f"{t.seed}\n")
        if t.fixed.ndim == 2:
            swio.write_png(d / "fixed.png", t.fixed.numpy())
            swio.write_png(d / "moving.png", t.moving.numpy())
            swio.write_png(d / "target_flow.png", flow_to_color(t.target.numpy()))
    print(f"wrote {len(eval_set)} triplets to {out}")
    return OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    _check_device(args.device)
    try:
        dataset = load_dataset(args, cfg.seed)
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return FAILED
    check_levels(cfg.model, dataset[0].image.shape)
    val_source = synthetic_dataset(
        max(1, min(args.val_pairs, 16)), tuple(dataset[0].image.shape), cfg.seed + 1, with_labels=dataset.has_labels
    ) if args.manifest is None else dataset
    val_set = make_eval_set(val_source, cfg.spatial, cfg.intensity, args.val_pairs, cfg.seed)
    record = train(cfg, dataset, val_set, out_dir=args.out)
    plot_curves({cfg.model.architecture: record.validation}, args.out / "validation.png")
    samples = args.out / "samples"
    samples.mkdir(exist_ok=True)
    model = record.model.eval()
    with torch.no_grad():
        for i, t in enumerate(val_set[:4]):
            swio.save_tensor(samples / f"pred_{i:03d}.swt", predict(model, t.fixed, t.moving)[-1])
            swio.save_tensor(samples / f"target_{i:03d}.swt", t.target)
    (args.out / "run.json").write_text(json.dumps(record.to_dict(), indent=1))
    print(json.dumps({"best": record.best, "wall_clock": record.wall_clock}))
    return OK


def cmd_eval(args) -> int:
    model, _ = _load_model(args.checkpoint)
    cfg = load_config(args)
    dataset = load_dataset(args, cfg.seed + 1)
    check_levels(model.cfg, dataset[0].image.shape)
    eval_set = make_eval_set(dataset, cfg.spatial, cfg.intensity, args.pairs, cfg.seed)
    summary = evaluate(model, eval_set)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "eval.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: v for k, v in summary.items() if not k.endswith("per_pair")}))
    return OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise ValidationError(str(exc)) from exc


def _read_normalized(path) -> torch.Tensor:
    try:
        return torch.from_numpy(swio.normalize(swio.read_image(path)))
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


def register_pair(model, fixed: torch.Tensor, moving: torch.Tensor, gt=None) -> dict:
    """Predict the field registering ``moving`` to ``fixed``; EPE report when ``gt`` is given."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        field = predict(model.eval(), fixed.to(dtype), moving.to(dtype))[-1]
    magnitude = torch.sqrt((field.to(torch.float64) ** 2).sum(0))
    out = {
        "field": field,
        "moved": warp(moving.to(dtype), field),
        "mean_magnitude": float(magnitude.mean()),
        "max_magnitude": float(magnitude.max()),
    }
    if gt is not None:
        gt = torch.as_tensor(gt).to(torch.float64)
        out["epe"] = float(epe(field.to(torch.float64), gt))
        out["epe_map"] = epe_map(field.numpy(), gt.numpy())
    return out


def cmd_register(args) -> int:
    model, _ = _load_model(args.checkpoint)
    fixed, moving = _read_normalized(args.fixed), _read_normalized(args.moving)
    if fixed.shape != moving.shape:
        raise ValidationError(f"fixed {tuple(fixed.shape)} and moving {tuple(moving.shape)} differ in shape")
    try:
        check_levels(model.cfg, fixed.shape)
    except ValidationError as exc:
        raise ValidationError(f"checkpoint is incompatible with the inputs: {exc}") from exc
    gt = None
    if args.gt is not None:
        gt = swio.load_tensor(args.gt)
        if gt.shape != (fixed.ndim, *fixed.shape):
            raise ValidationError(f"ground-truth field shape {gt.shape} does not match the images")
    res = register_pair(model, fixed, moving, gt)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    swio.save_tensor(out / "field.swt", res["field"])
    swio.save_tensor(out / "moved.swt", res["moved"])
    report = {"mean_magnitude": res["mean_magnitude"], "max_magnitude": res["max_magnitude"]}
    if fixed.ndim == 2:
        swio.write_png(out / "moved.png", res["moved"].numpy())
        swio.write_png(out / "flow.png", flow_to_color(res["field"].numpy()))
    if gt is not None:
        report["epe"] = res["epe"]
        swio.save_tensor(out / "epe_map.swt", res["epe_map"])
        if fixed.ndim == 2:
            m = res["epe_map"]
            swio.write_png(out / "epe_map.png", m / m.max() if m.max() > 0 else m)
    (out / "report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report))
    return OK


def _parse_axes(items) -> dict:
    axes = {}
    for item in items:
        name, _, values = item.partition("=")
        if not values:
            raise ValidationError(f"bad --axis {item!r}; expected NAME=V1,V2")
        parsed = []
        for v in values.split(","):
            if v in ("on", "true", "True"):
                parsed.append(True)
            elif v in ("off", "false", "False"):
                parsed.append(False)
            elif v.isdigit():
                parsed.append(int(v))
            else:
                parsed.append(v)
        axes[name] = parsed
    if not axes:
        raise ValidationError("ablate needs at least one --axis")
    return axes


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    axes = _parse_axes(args.axis)
    dataset = load_dataset(args, cfg.seed)
    for lv in axes.get("levels", []):
        check_levels(dataclasses.replace(cfg.model, levels=lv, features_per_level=None), dataset[0].image.shape)
    val_source = synthetic_dataset(8, tuple(dataset[0].image.shape), cfg.seed + 1, with_labels=dataset.has_labels)
    val_set = make_eval_set(val_source, cfg.spatial, cfg.intensity, args.val_pairs, cfg.seed)
    try:
        rows = ablate(cfg, axes, dataset, val_set)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    table = format_ablation_table(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.txt").write_text(table + "\n")
    (args.out / "ablation.json").write_text(json.dumps(
        [{k: v for k, v in r.items() if k != "record"} for r in rows], indent=1))
    print(table)
    return OK


def cmd_selftest(args) -> int:
    return OK if run_selftest(args.out) else FAILED


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "register": cmd_register,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return OK if exc.code == 0 else INVALID
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        _check_device(args.device)
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID
    except Exception as exc:  # noqa: BLE001 - exit code contract
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
