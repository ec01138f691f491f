"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, bench, ablate.  Exit code 0
on success, 2 for usage and configuration mistakes (unknown flags, missing
files, bad values), 1 for runtime failures.  All randomness is governed by
seeds; --seed overrides every seed in the run (dataset = seed, model =
seed + 1, shuffling = seed + 2).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import ConfigError, ContractViolation, FormatError
from .harness import bench_latency, gradient_report, run_ablation, worker_limit
from .model import (
    DatasetSpec,
    SegModelConfig,
    SegmentationModel,
    TrainConfig,
    evaluate,
    make_dataset,
    split_clouds,
    train_loop,
    write_history_csv,
)
from .pointcloud import SHAPE_FAMILIES, read_cloud, write_cloud

GRADCHECK_TOLERANCE = 1e-4

_DTYPES = {"f32": np.float32, "f64": np.float64}


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


def default_model_config(num_classes: int = 4) -> SegModelConfig:
    return SegModelConfig(
        blocks=[(16, 8), (32, 8), (64, 4)],
        num_classes=num_classes,
        width_multiplier=0.25,
    )


def default_train_config() -> TrainConfig:
    return TrainConfig(batch_size=8, epochs=50, lr=1e-3, dataset=DatasetSpec())


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def parse_model_config(raw: dict) -> SegModelConfig:
    cfg = default_model_config()
    fields = {
        "blocks",
        "num_classes",
        "in_channels",
        "width_multiplier",
        "global_feature_dim",
        "classifier_channels",
        "leaky_slope",
        "use_1x1_conv",
        "conv3d_depth",
        "variant",
        "transmission_enabled",
        "seed",
    }
    unknown = set(raw) - fields
    if unknown:
        raise UsageError(f"unknown model config keys: {sorted(unknown)}")
    values = {k: raw[k] for k in fields & set(raw)}
    try:
        if "blocks" in values:
            values["blocks"] = [tuple(b) for b in values["blocks"]]
        return replace(cfg, **values)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def parse_train_config(raw: dict) -> TrainConfig:
    cfg = default_train_config()
    fields = {"batch_size", "epochs", "lr", "eval_fraction", "seed", "dataset", "checkpoint_dir"}
    unknown = set(raw) - fields
    if unknown:
        raise UsageError(f"unknown train config keys: {sorted(unknown)}")
    values = {k: raw[k] for k in fields & set(raw)}
    if "dataset" in values:
        values["dataset"] = DatasetSpec(**values["dataset"])
    try:
        return replace(cfg, **values)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def load_run_config(args) -> tuple[SegModelConfig, TrainConfig]:
    raw = load_config(args.config) if args.config else {}
    model_cfg = parse_model_config(raw.get("model", {}))
    train_cfg = parse_train_config(raw.get("train", {}))
    if getattr(args, "epochs", None) is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    if args.seed is not None:
        model_cfg = replace(model_cfg, seed=args.seed + 1)
        train_cfg = replace(
            train_cfg,
            seed=args.seed + 2,
            dataset=replace(train_cfg.dataset, seed=args.seed),
        )
    kind_classes = SHAPE_FAMILIES.get(train_cfg.dataset.kind)
    if kind_classes is not None and "num_classes" not in raw.get("model", {}):
        model_cfg = replace(model_cfg, num_classes=kind_classes)
    return model_cfg, train_cfg


def load_data_dir(path) -> tuple[list, dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    clouds = [read_cloud(path / name) for name in manifest["files"]]
    return clouds, manifest


def resolve_dataset(args, train_cfg: TrainConfig, dtype) -> tuple[list, int]:
    if getattr(args, "data", None):
        clouds, manifest = load_data_dir(args.data)
        return clouds, int(manifest["num_classes"])
    clouds = make_dataset(train_cfg.dataset, dtype=dtype)
    return clouds, SHAPE_FAMILIES[train_cfg.dataset.kind]


# --------------------------------------------------------------------------
# Subcommands.


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clouds = make_dataset(
        DatasetSpec(kind=args.kind, n_points=args.points, n_clouds=args.clouds, seed=args.seed)
    )
    suffix = "mvpt" if args.format == "text" else "mvpb"
    files = []
    for i, cloud in enumerate(clouds):
        name = f"cloud_{i:03d}.{suffix}"
        write_cloud(cloud, out / name, mode=args.format)
        files.append(name)
    manifest = {
        "kind": args.kind,
        "n_points": args.points,
        "n_clouds": args.clouds,
        "seed": args.seed,
        "format": args.format,
        "num_classes": SHAPE_FAMILIES[args.kind],
        "files": files,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(files)} clouds + manifest to {out}")
    return 0


def cmd_train(args) -> int:
    dtype = _DTYPES[args.dtype]
    model_cfg, train_cfg = load_run_config(args)
    clouds, num_classes = resolve_dataset(args, train_cfg, dtype)
    model_cfg = replace(
        model_cfg, num_classes=num_classes, in_channels=clouds[0].n_channels
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(train_cfg, checkpoint_dir=str(out))

    model = SegmentationModel(model_cfg, dtype=dtype)
    history = train_loop(model, clouds, train_cfg)
    write_history_csv(history, out / "history.csv")

    _, eval_clouds = split_clouds(clouds, train_cfg.eval_fraction)
    result = evaluate(model, eval_clouds, model_cfg.num_classes)
    summary = {
        "epochs": train_cfg.epochs,
        "final_loss": history[-1]["loss"],
        "miou": result.miou,
        "accuracy": result.accuracy,
        "per_class_iou": result.per_class_iou,
        "param_count": model.parameter_count(),
    }
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    dtype = _DTYPES[args.dtype]
    model_cfg, train_cfg = load_run_config(args)
    clouds, num_classes = resolve_dataset(args, train_cfg, dtype)
    model_cfg = replace(
        model_cfg, num_classes=num_classes, in_channels=clouds[0].n_channels
    )
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = SegmentationModel(model_cfg, dtype=dtype)
    model.load_state_arrays(checkpoint.load_state(ckpt))
    _, eval_clouds = split_clouds(clouds, train_cfg.eval_fraction)
    result = evaluate(model, eval_clouds, model_cfg.num_classes)
    payload = {
        "miou": result.miou,
        "accuracy": result.accuracy,
        "per_class_iou": result.per_class_iou,
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_report(seed=args.seed if args.seed is not None else 0)
    worst = 0.0
    for name, err in report:
        print(f"{name:22s} max_rel_err={err:.3e}")
        worst = max(worst, err)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"worst={worst:.3e} tolerance={GRADCHECK_TOLERANCE:.0e} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    model_cfg, _ = load_run_config(args)
    resolutions = [int(tok) for tok in args.resolutions.split(",") if tok]
    if not resolutions:
        raise UsageError("need at least one resolution")
    report = bench_latency(
        model_cfg,
        n_points=args.points,
        resolutions=resolutions,
        trials=args.trials,
        seed=args.seed if args.seed is not None else 0,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "bench.csv")
    for row in report.rows:
        print(
            f"r={row.resolution:3d} n={row.n_points} median={row.median_s * 1e3:.2f}ms "
            f"mean={row.mean_s * 1e3:.2f}ms p95={row.p95_s * 1e3:.2f}ms trials={row.trials}"
        )
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers if args.workers is not None else min(worker_limit(), 4)
    report = run_ablation(model_cfg, args.grid, train_cfg, workers=workers)
    report.to_csv(out / "ablation.csv")
    report.to_json(out / "ablation.json")
    for row in report.rows:
        if row.reason:
            print(f"{row.config_id:24s} skipped: {row.reason}")
        else:
            print(
                f"{row.config_id:24s} miou={row.miou:.4f} acc={row.accuracy:.4f} "
                f"params={row.param_count} fwd={row.median_forward_s * 1e3:.1f}ms"
            )
    return 0


# --------------------------------------------------------------------------
# Parser and dispatch.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvpconv",
        description="Point-voxel convolution training, benchmarking and ablation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        if config:
            p.add_argument("--config", default=None, help="JSON configuration file")
        p.add_argument("--dtype", choices=sorted(_DTYPES), default="f32")

    p = sub.add_parser("gen-data", help="write synthetic labeled clouds + manifest")
    p.add_argument("--kind", required=True, choices=sorted(SHAPE_FAMILIES))
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--clouds", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["binary", "text"], default="binary")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a segmentation model")
    common(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--data", default=None, help="directory from gen-data (default: synthetic)")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks per layer")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward-latency benchmark across resolutions")
    common(p)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--resolutions", default="4,8,16,32")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="run one ablation grid")
    p.add_argument("grid", choices=["table4", "table5", "table6"])
    common(p)
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface anything else as runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
