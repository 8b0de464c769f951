"""Command-line entry point for datasets, training, distillation, and
analysis, each run leaving a reproducible manifest.

Configuration precedence is defaults < JSON config file (``--config``, flat
keys named like the flags) < explicit flags.  Exit codes: 2 flag/config
errors, 3 missing inputs or I/O failures, 4 training divergence, 5
teacher/student configuration mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSpec, generate_dataset, read_dataset, read_spec, write_dataset
from .distill import CLS_MODES, MASK_KINDS, NECK_MODES, PROPOSAL_SOURCES, DistillConfig, adapt
from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetError,
    DivergenceError,
    TeacherStudentMismatchError,
)
from .evaluation import (
    COCO_THRESHOLDS,
    aggregate_channel_distance,
    categorize_errors,
    compute_map,
    emit_report,
    feature_gradient_norms,
    predict_dataset,
)
from .presets import PRESETS
from .train import TrainConfig, run_training, sweep_coefficient


def _int_list(value):
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v != "")

def _float_list(value):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return tuple(float(v) for v in str(value).split(",") if v != "")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, started: float):
    """Checksum everything under ``out_dir`` and drop run_manifest.json."""
    out_dir = Path(out_dir)
    checksums = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            checksums[str(p.relative_to(out_dir))] = _sha256(p)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(checksums),
        "artifact_checksums": checksums,
        "wall_time_s": round(time.time() - started, 3),
        "version": __version__,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.time()
    spec = DatasetSpec(
        num_images=args.num_images,
        image_size=args.image_size,
        num_classes=args.classes,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        min_box_side=args.min_box,
        max_box_side=args.max_box,
        background=args.background,
        seed=args.seed,
    )
    spec.validate()
    samples = generate_dataset(spec)
    out = Path(args.out)
    write_dataset(samples, out, spec)
    _write_manifest(out, "gen-data", asdict(spec), args.seed, {}, started)
    print(f"wrote {len(samples)} images to {out}")
    return 0


def _train_config_from_args(args, distill: DistillConfig) -> TrainConfig:
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        lr_decay_epochs=_int_list(args.decay_epochs),
        lr_decay_factor=args.decay_factor,
        seed=args.seed,
        iou_pos=args.iou_pos,
        distill=distill,
    )
    cfg.validate()
    return cfg


def _distill_config_from_args(args) -> DistillConfig:
    cfg = DistillConfig(
        neck_mode=args.distill_neck,
        cls_mode=args.distill_cls,
        distill_backbone=args.distill_backbone,
        mask_kind=args.mask,
        gamma=args.gamma,
        lam=args.lam,
        alpha_obj=args.alpha_obj,
        alpha_bg=args.alpha_bg,
        beta_obj=args.beta_obj,
        beta_bg=args.beta_bg,
        t_obj=args.t_obj,
        t_bg=args.t_bg,
        softmax_includes_bg=args.softmax_includes_bg,
        proposal_source=args.proposal_source,
        num_proposals=args.num_proposals,
    )
    cfg.validate()
    return cfg


def _run_train(args, teacher_dir=None) -> int:
    started = time.time()
    data_dir = _require(args.data, "dataset")
    samples = read_dataset(data_dir)
    spec = read_spec(data_dir)
    det_cfg = PRESETS[args.preset](spec.image_size)

    teacher = None
    inputs = {"data": data_dir}
    if teacher_dir is not None:
        teacher, _, _ = load_checkpoint(_require(teacher_dir, "teacher checkpoint"))
        inputs["teacher"] = teacher_dir
        distill = _distill_config_from_args(args)
    else:
        distill = DistillConfig(neck_mode="none", cls_mode="none")
    cfg = _train_config_from_args(args, distill)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, adapt_layer, log, metadata = run_training(
            samples, det_cfg, cfg, teacher=teacher
        )
    except DivergenceError as e:
        (out / "divergence.json").write_text(json.dumps(e.record, indent=1))
        raise

    if args.val_data:
        val = read_dataset(_require(args.val_data, "validation dataset"))
        inputs["val_data"] = args.val_data
        result = compute_map(
            predict_dataset(model, val), [(s.boxes(), s.labels()) for s in val], (0.5,)
        )
        metadata["val_map50"] = result.map50

    save_checkpoint(out / "checkpoint", model, adapt_layer, metadata)
    log.to_csv(out / "train_log.csv")
    config_echo = {
        "preset": args.preset,
        "detector": asdict(det_cfg),
        "train": {**asdict(cfg), "distill": asdict(cfg.distill)},
    }
    command = "distill" if teacher_dir is not None else "train"
    _write_manifest(out, command, config_echo, cfg.seed, inputs, started)
    msg = f"{command} done: {metadata['iterations']} iterations"
    if "val_map50" in metadata:
        msg += f", val mAP@0.5 = {metadata['val_map50']:.4f}"
    print(msg)
    return 0


def cmd_train(args) -> int:
    return _run_train(args, teacher_dir=None)


def cmd_distill(args) -> int:
    return _run_train(args, teacher_dir=args.teacher)


def cmd_eval(args) -> int:
    started = time.time()
    model, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    samples = read_dataset(_require(args.data, "dataset"))
    dets = predict_dataset(model, samples, score_thresh=args.score_thresh)
    gts = [(s.boxes(), s.labels()) for s in samples]
    result = compute_map(dets, gts, COCO_THRESHOLDS)
    out = Path(args.out)
    summary = {
        "num_images": len(samples),
        "map50": result.map50,
        "map_coco": result.map_all,
        "per_threshold": {str(t): result.at_threshold(t) for t in result.thresholds},
    }
    emit_report(out, map_result=result, summary=summary)
    _write_manifest(
        out, "eval", {"score_thresh": args.score_thresh}, None,
        {"checkpoint": args.checkpoint, "data": args.data}, started,
    )
    print(f"mAP@0.5 = {result.map50:.4f}  mAP@[.5:.95] = {result.map_all:.4f}")
    return 0


def cmd_analyze_errors(args) -> int:
    started = time.time()
    model, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    samples = read_dataset(_require(args.data, "dataset"))
    spec = read_spec(args.data)
    dets = predict_dataset(model, samples, score_thresh=args.score_thresh)
    gts = [(s.boxes(), s.labels()) for s in samples]
    breakdown = categorize_errors(dets, gts, spec.num_classes)
    totals = {cat: breakdown.total(cat) for cat in ("Cor", "Loc", "Sim", "Oth", "BG", "FN")}
    out = Path(args.out)
    emit_report(out, errors=breakdown, summary={"totals": totals,
                                                "num_detections": breakdown.num_detections})
    _write_manifest(out, "analyze errors", {"score_thresh": args.score_thresh}, None,
                    {"checkpoint": args.checkpoint, "data": args.data}, started)
    print("  ".join(f"{k}={v}" for k, v in totals.items()))
    return 0


def cmd_analyze_distance(args) -> int:
    import torch

    from .masks import masks_for_image

    started = time.time()
    student, adapt_layer, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    teacher, _, _ = load_checkpoint(_require(args.teacher, "teacher checkpoint"))
    samples = read_dataset(_require(args.data, "dataset"))[: args.num_images]
    lv = args.level
    use_adapt = adapt_layer is not None and not args.identity_adapt
    if not use_adapt and student.config.neck_channels != teacher.config.neck_channels:
        raise TeacherStudentMismatchError(
            "student/teacher neck widths differ and no adaptation layer is stored"
        )

    def triples():
        from .detector import images_to_tensor

        for s in samples:
            images = images_to_tensor([s.image])
            with torch.no_grad():
                _, neck_s = student.forward_features(images)
                _, neck_t = teacher.forward_features(images)
                feat_s = adapt(adapt_layer, neck_s[lv], lv) if use_adapt else neck_s[lv]
            shapes = [student.config.feature_shape(i) for i in range(student.config.num_levels)]
            mask = masks_for_image(s.boxes(), shapes, student.config.strides)[lv]
            yield neck_t[lv][0].numpy(), feat_s[0].numpy(), mask

    d_obj, d_bg = aggregate_channel_distance(triples())
    out = Path(args.out)
    summary = {
        "num_images": len(samples),
        "level": lv,
        "adapted": use_adapt,
        "mean_d_obj": float(np.nanmean(d_obj)),
        "mean_d_bg": float(np.nanmean(d_bg)),
    }
    emit_report(out, channel_distance=(d_obj, d_bg), summary=summary)
    _write_manifest(out, "analyze distance", {"level": lv, "num_images": args.num_images},
                    None, {"checkpoint": args.checkpoint, "teacher": args.teacher,
                           "data": args.data}, started)
    print(f"mean d_obj = {summary['mean_d_obj']:.5f}  mean d_bg = {summary['mean_d_bg']:.5f}")
    return 0


def cmd_analyze_grad_norms(args) -> int:
    started = time.time()
    model, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    samples = read_dataset(_require(args.data, "dataset"))[: args.num_images]
    obj_vals, bg_vals = [], []
    for s in samples:
        _, avg_obj, avg_bg = feature_gradient_norms(model, s, level=args.level)
        obj_vals.append(avg_obj)
        bg_vals.append(avg_bg)
    mean_obj = float(np.nanmean(obj_vals))
    mean_bg = float(np.nanmean(bg_vals))
    out = Path(args.out)
    summary = {"num_images": len(samples), "level": args.level,
               "mean_l2_obj": mean_obj, "mean_l2_bg": mean_bg}
    emit_report(out, grad_norms=(mean_obj, mean_bg), summary=summary)
    _write_manifest(out, "analyze grad-norms", {"level": args.level}, None,
                    {"checkpoint": args.checkpoint, "data": args.data}, started)
    print(f"mean L2 obj = {mean_obj:.6f}  bg = {mean_bg:.6f}")
    return 0


def cmd_analyze_sweep(args) -> int:
    import csv as csvmod

    started = time.time()
    samples = read_dataset(_require(args.data, "dataset"))
    val = read_dataset(_require(args.val_data, "validation dataset"))
    spec = read_spec(args.data)
    teacher, _, _ = load_checkpoint(_require(args.teacher, "teacher checkpoint"))
    det_cfg = PRESETS[args.preset](spec.image_size)
    base_cfg = _train_config_from_args(args, _distill_config_from_args(args))
    rows = sweep_coefficient(
        samples, val, det_cfg, base_cfg, teacher,
        parameter=args.parameter, values=_float_list(args.values), seeds=_int_list(args.seeds),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csvmod.DictWriter(fh, fieldnames=["parameter", "value", "seed", "map50"])
        w.writeheader()
        w.writerows(rows)
    means = {str(r["value"]): r["map50"] for r in rows if r["seed"] == "mean"}
    (out / "summary.json").write_text(json.dumps({"parameter": args.parameter,
                                                  "mean_map50": means}, indent=1))
    _write_manifest(out, "analyze sweep", {"parameter": args.parameter}, None,
                    {"data": args.data, "teacher": args.teacher}, started)
    print(f"swept {args.parameter} over {len(means)} values")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(sp):
    sp.add_argument("--data", required=True, help="training dataset directory")
    sp.add_argument("--val-data", default=None, help="optional validation dataset")
    sp.add_argument("--out", required=True, help="run output directory")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="narrow")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=12)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--decay-epochs", default="8,11", help="comma-separated epoch list")
    sp.add_argument("--decay-factor", type=float, default=0.1)
    sp.add_argument("--iou-pos", type=float, default=0.5)
    sp.add_argument("--config", default=None, help="JSON config file (flat flag names)")


def _add_distill_flags(sp):
    sp.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    sp.add_argument("--distill-neck", choices=NECK_MODES, default="decoupled")
    sp.add_argument("--distill-cls", choices=CLS_MODES, default="decoupled")
    sp.add_argument("--distill-backbone", action="store_true")
    sp.add_argument("--mask", choices=MASK_KINDS, default="gt")
    sp.add_argument("--proposal-source", choices=PROPOSAL_SOURCES, default="teacher")
    sp.add_argument("--gamma", type=float, default=4.0)
    sp.add_argument("--lam", type=float, default=1.0)
    sp.add_argument("--alpha-obj", type=float, default=4.0)
    sp.add_argument("--alpha-bg", type=float, default=16.0)
    sp.add_argument("--beta-obj", type=float, default=0.05)
    sp.add_argument("--beta-bg", type=float, default=2.0)
    sp.add_argument("--t-obj", type=float, default=3.0)
    sp.add_argument("--t-bg", type=float, default=1.0)
    sp.add_argument("--num-proposals", type=int, default=64)
    sp.add_argument("--softmax-includes-bg", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="distilldet",
        description="Decoupled feature/classification distillation for a "
        "miniature two-stage detector.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    sp = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    sp.add_argument("--num-images", type=int, required=True)
    sp.add_argument("--image-size", type=int, default=128)
    sp.add_argument("--classes", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-objects", type=int, default=1)
    sp.add_argument("--max-objects", type=int, default=3)
    sp.add_argument("--min-box", type=float, default=14.0)
    sp.add_argument("--max-box", type=float, default=48.0)
    sp.add_argument("--background", choices=("clutter", "plain"), default="clutter")
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_gen_data)
    registry["gen-data"] = sp

    sp = sub.add_parser("train", help="train a detector without distillation")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_train)
    registry["train"] = sp

    sp = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_train_flags(sp)
    _add_distill_flags(sp)
    sp.set_defaults(func=cmd_distill)
    registry["distill"] = sp

    sp = sub.add_parser("eval", help="compute mAP for a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--score-thresh", type=float, default=0.05)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_eval)
    registry["eval"] = sp

    ap = sub.add_parser("analyze", help="diagnostic analyses")
    asub = ap.add_subparsers(dest="analysis", required=True)

    sp = asub.add_parser("errors", help="six-way detection error breakdown")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--score-thresh", type=float, default=0.3)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_analyze_errors)
    registry["errors"] = sp

    sp = asub.add_parser("distance", help="per-channel teacher-student distance")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-images", type=int, default=20)
    sp.add_argument("--level", type=int, default=0)
    sp.add_argument("--identity-adapt", action="store_true",
                    help="compare raw student features even if an adaptation layer is stored")
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_analyze_distance)
    registry["distance"] = sp

    sp = asub.add_parser("grad-norms", help="object/background gradient norms")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-images", type=int, default=50)
    sp.add_argument("--level", type=int, default=0)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_analyze_grad_norms)
    registry["grad-norms"] = sp

    sp = asub.add_parser("sweep", help="re-run distillation over a coefficient grid")
    _add_train_flags(sp)
    _add_distill_flags(sp)
    sp.add_argument("--parameter", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", default="0", help="comma-separated seeds")
    sp.set_defaults(func=cmd_analyze_sweep)
    registry["sweep"] = sp

    return parser, registry


def _extract_config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, registry = build_parser()

    config_path = _extract_config_path(argv)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            print(f"error: config file not found: {path}", file=sys.stderr)
            return 3
        try:
            overrides = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            parser.error(f"malformed config file {path}: {e}")
        if not isinstance(overrides, dict):
            parser.error(f"config file {path} must hold a JSON object")
        command = next((a for a in argv if not a.startswith("-")), None)
        sp = registry.get(command)
        if command == "analyze":
            names = [a for a in argv if not a.startswith("-")]
            sp = registry.get(names[1]) if len(names) > 1 else None
        valid = {a.dest for a in sp._actions} if sp else set()
        mapped = {}
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if dest not in valid:
                parser.error(f"unknown config key {key!r} for command {command!r}")
            mapped[dest] = value
        if sp is not None:
            # Defaults must land on the subparser: argparse resolves a
            # subcommand in its own namespace, so top-level defaults lose.
            sp.set_defaults(**mapped)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TeacherStudentMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 4
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
