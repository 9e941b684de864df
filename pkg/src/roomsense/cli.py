"""Command-line entry point wiring the pipeline stages."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import datagen, pipeline, evalkit
from .audio_io import feature_cache_header
from .augment import AugmentParams, augment_manifest
from .datagen import Manifest
from .neural.config import (TransformerConfig, ConvNetConfig,
                            ConvRecurrentConfig, paper_scale_transformer)
from .neural.models import build_model, patch_grid_dims, PositionalGrid
from .neural.checkpoint import (Checkpoint, load_checkpoint, save_checkpoint)
from .neural.transfer import interpolate_positional, reinit_head
from .pipeline import RunConfig, StageError, run_pipeline, desk_preset, \
    paper_shape_preset, validate_config
from .train import TrainConfig, train_loop

RUN_ROOT_ENV = "ROOMSENSE_RUN_ROOT"


def _run_dir(path) -> Path:
    """Resolve a run directory against the optional root override."""
    path = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _config_for(args) -> RunConfig:
    if getattr(args, "config", None):
        config = RunConfig.load(args.config)
    elif getattr(args, "preset", "desk") == "paper-shape":
        config = paper_shape_preset()
    else:
        config = desk_preset()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "run_dir", None):
        config.run_dir = str(_run_dir(args.run_dir))
    elif getattr(args, "out", None):
        config.run_dir = str(_run_dir(args.out))
    else:
        config.run_dir = str(_run_dir(config.run_dir))
    return config


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate_rir(args):
    config = _config_for(args)
    path = pipeline.stage_simulate_rir(config, Path(config.run_dir))
    print(f"wrote {path}")


def cmd_build_dataset(args):
    config = _config_for(args)
    out = Path(config.run_dir) / "corpus" if args.out is None else _run_dir(args.out)
    rirs = Path(args.rirs)
    rir_manifest = rirs if rirs.is_file() else rirs / "rir_manifest.csv"
    rir_rows = datagen.load_rir_manifest(rir_manifest)
    manifest = datagen.build_corpus(
        rir_rows, args.speech, out, n_samples=config.n_samples,
        ratio=config.split_ratio, snr_levels=config.snr_levels,
        seed=config.stage_seed("build-dataset"))
    print(f"wrote {len(manifest)} samples, splits {manifest.split_sizes()}")


def cmd_augment(args):
    manifest = Manifest.load(args.manifest)
    params = AugmentParams(**_load_json(args.params)) if args.params \
        else AugmentParams()
    out = _run_dir(args.out)
    augmented, new_rows = augment_manifest(manifest, out, params,
                                           fraction=args.fraction,
                                           seed=args.seed or 0)
    augmented.save(Path(out) / "manifest.csv")
    print(f"appended {len(new_rows)} augmented rows "
          f"({len(manifest)} -> {len(augmented)})")


def cmd_featurize(args):
    from .audio_io import read_wav, write_feature_cache
    from .features import featurize
    manifest = Manifest.load(args.manifest)
    out = Path(_run_dir(args.out))
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for row in manifest.rows:
        target = out / f"{row.id}.feat"
        if target.exists():
            continue
        audio, _ = read_wav(row.path)
        write_feature_cache(target, featurize(audio).values)
        n += 1
    print(f"featurized {n} clips into {out}")


def cmd_transfer_init(args):
    ckpt = load_checkpoint(args.src)
    if ckpt.config.get("family") != "ast":
        raise ValueError("transfer-init applies to transformer checkpoints")
    f, t = (int(x) for x in args.dst_shape.split(","))
    src_shape = tuple(ckpt.config["input_shape"])
    src_grid = PositionalGrid(ckpt.params["pos_embed"],
                              *patch_grid_dims(*src_shape, ckpt.config["patch"],
                                               ckpt.config["stride"]))
    dst_dims = patch_grid_dims(f, t, ckpt.config["patch"], ckpt.config["stride"])
    params = dict(ckpt.params)
    params["pos_embed"] = interpolate_positional(src_grid, dst_dims) \
        .embeddings.astype(ckpt.params["pos_embed"].dtype)
    config = dict(ckpt.config)
    config["input_shape"] = [f, t]
    moved = Checkpoint(params=params, config=config, metadata=dict(ckpt.metadata))
    moved = reinit_head(moved, args.task, seed=args.seed or 0)
    save_checkpoint(args.out, moved)
    print(f"wrote {args.out} (grid {src_grid.rows}x{src_grid.cols} -> "
          f"{dst_dims[0]}x{dst_dims[1]}, task {args.task})")


def _model_config(args):
    if args.model == "ast":
        if args.paper_scale:
            cfg = paper_scale_transformer()
        else:
            cfg = TransformerConfig(embed_dim=16, n_layers=2, n_heads=2)
        if args.task == "joint":
            cfg = TransformerConfig(**{**cfg.__dict__,
                                       "label_ranges": (cfg.label_ranges[0],) * 2})
        return cfg.to_dict()
    n_out = 2 if args.task == "joint" else 1
    if args.model == "cnn":
        return ConvNetConfig(n_outputs=n_out).to_dict()
    return ConvRecurrentConfig(n_outputs=n_out).to_dict()


def cmd_train(args):
    manifest = Manifest.load(args.manifest)
    feat_dir = _run_dir(args.features) if args.features else None
    task = args.task
    overrides = _load_json(args.config) if args.config else {}
    if args.paper_scale and args.model == "ast":
        overrides.setdefault("initial_lr", 5e-6)
        overrides.setdefault("epochs", 150)
    tc = TrainConfig(loss_kind="L2_joint" if task == "joint" else "L1_single",
                     **overrides)
    if args.init_from:
        from .neural.checkpoint import model_from_checkpoint
        model = model_from_checkpoint(load_checkpoint(args.init_from))
    else:
        model = build_model(_model_config(args), seed=tc.seed)
    train_xy = pipeline._load_split_arrays(manifest, feat_dir, "train", task)
    val_xy = pipeline._load_split_arrays(manifest, feat_dir, "validation", task)
    out = Path(_run_dir(args.out))
    best, history = train_loop(model, pipeline.make_forward(model),
                               train_xy, val_xy, tc, ckpt_dir=out,
                               metadata={"task": task})
    history.save(out / "history.csv")
    print(f"best val loss {min(r[2] for r in history.rows):.6g} "
          f"over {len(history.rows)} epochs; wrote {out / 'best.ckpt'}")


def cmd_evaluate(args):
    manifest = Manifest.load(args.manifest)
    split = manifest.split(args.split) if args.split else manifest
    feat_dir = _run_dir(args.features) if args.features else None
    out = Path(_run_dir(args.out))
    if args.task == "joint":
        reports = evalkit.evaluate_joint(args.ckpt, split, features_dir=feat_dir)
        evalkit.emit_report(reports, None, out)
    elif args.varlen:
        per_len = evalkit.evaluate_varlen(args.ckpt, split, mode=args.varlen_mode)
        evalkit.emit_report({f"len_{k:.1f}s": v for k, v in per_len.items()},
                            None, out)
    else:
        report, heatmap = evalkit.evaluate(args.ckpt, split, task="vol",
                                           features_dir=feat_dir)
        evalkit.emit_report(report, heatmap, out)
    print(f"wrote {out / 'metrics.csv'}")


def cmd_run(args):
    config = _config_for(args)
    run_dir = run_pipeline(config)
    print(f"pipeline complete: {run_dir}")


def cmd_validate(args):
    errors = validate_config(args.config)
    if errors:
        for e in errors:
            print(f"error: {e}")
        sys.exit(1)
    print("config ok")


def cmd_inspect(args):
    path = Path(args.path)
    head = path.read_bytes()[:8] if path.is_file() else b""
    if head == b"RSCKPT01":
        ckpt = load_checkpoint(path)
        total = 0
        for name in sorted(ckpt.params):
            arr = ckpt.params[name]
            print(f"{name:40s} {str(arr.shape):18s} {arr.dtype}")
            total += arr.size
        print(f"total parameters: {total}")
        print(f"config: {json.dumps(ckpt.config, sort_keys=True)}")
        print(f"metadata: {json.dumps(ckpt.metadata, sort_keys=True)}")
    elif head == b"RSFEAT01":
        f, t = feature_cache_header(path)
        print(f"feature cache: {f} rows x {t} frames")
    elif path.suffix == ".csv":
        manifest = Manifest.load(path)
        print(f"manifest: {len(manifest)} rows, splits {manifest.split_sizes()}")
        for split in ("train", "validation", "test"):
            rooms = manifest.rooms(split)
            if rooms:
                print(f"  {split}: {len(rooms)} rooms ({', '.join(rooms)})")
        n_aug = sum(1 for r in manifest.rows if r.augmented)
        print(f"  augmented rows: {n_aug}")
    else:
        raise ValueError(f"unrecognized artifact {path}")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roomsense",
        description="Blind room volume and RT60 estimation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="run config JSON")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("simulate-rir", help="simulate shoebox RIRs")
    common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=cmd_simulate_rir)

    p = sub.add_parser("build-dataset", help="synthesize the speech corpus")
    common(p)
    p.add_argument("--rirs", required=True, help="RIR dir or manifest CSV")
    p.add_argument("--speech", required=True, help="dry speech WAV directory")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_dataset)

    p = sub.add_parser("augment", help="warp/mask-augment the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", help="augmentation params JSON")
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("featurize", help="build the feature cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("transfer-init", help="adapt a checkpoint to a new "
                                             "input shape and task")
    p.add_argument("--src", required=True)
    p.add_argument("--dst-shape", required=True, metavar="F,T")
    p.add_argument("--task", choices=("vol", "rt60", "joint"), default="vol")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_transfer_init)

    p = sub.add_parser("train", help="train a regressor")
    p.add_argument("--model", choices=("cnn", "crnn", "ast"), default="ast")
    p.add_argument("--task", choices=("vol", "joint"), default="vol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="TrainConfig overrides JSON")
    p.add_argument("--features", help="feature cache directory")
    p.add_argument("--init-from", dest="init_from")
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("vol", "joint"), default="vol")
    p.add_argument("--split", default="test")
    p.add_argument("--varlen", action="store_true")
    p.add_argument("--varlen-mode", choices=("pad", "native"), default="pad")
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("run", help="run the full staged pipeline")
    common(p)
    p.add_argument("--preset", choices=("desk", "paper-shape"), default="desk")
    p.add_argument("--run-dir", dest="run_dir")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("validate", help="check a run config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("inspect", help="summarize an artifact")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)

    return parser


_STAGE_EXIT = {name: i + 2 for i, name in enumerate(pipeline.STAGES)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return _STAGE_EXIT.get(e.stage, 1)
    except (OSError, ValueError) as e:
        print(f"error: [{args.command}] {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
