"""End-to-end run orchestration: staged execution with content-hash
caching, per-stage seeds, and a canonical run-directory layout.

Layout under the run directory: rirs/, corpus/, features/, ckpts/,
reports/, config.lock, plus one .stamp file per completed stage.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import datagen, rirgen
from .audio_io import write_wav, read_wav, write_feature_cache
from .augment import AugmentParams, augment_manifest
from .datagen import Manifest, derive_seed
from .features import featurize, frame_count
from .neural.config import TransformerConfig, paper_scale_transformer
from .neural.models import build_model, blocks_to_patches, \
    apply_input_norm, input_norm_stats
from .neural.checkpoint import load_checkpoint
from .train import TrainConfig, train_loop
from . import evalkit

STAGES = ("simulate-rir", "build-dataset", "augment", "featurize",
          "train", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/desk"
    preset: str = "desk"
    n_rooms: int = 12
    n_receivers: int = 5
    absorption: float = 0.15
    volume_range_m3: tuple = (25.0, 8000.0)
    max_image_order: int = 36
    n_samples: int = 320
    split_ratio: tuple = (6, 2, 2)
    snr_levels: tuple = datagen.SNR_LEVELS
    n_speech_files: int = 24
    augment_fraction: float = 0.25
    augment_params: dict = field(default_factory=dict)
    # probability that a training sample is cut to a random shorter
    # length (its tail replaced by silence features) so the model stays
    # informative on short, padded inputs at evaluation time
    truncation_prob: float = 0.5
    model: dict = field(default_factory=lambda: TransformerConfig(
        embed_dim=16, n_layers=2, n_heads=2).to_dict())
    train: dict = field(default_factory=lambda: {
        "epochs": 80, "initial_lr": 1e-3, "batch_size": 16,
        "weight_decay": 1e-4, "early_stop_patience": 20,
        "loss_kind": "L1_single"})
    task: str = "vol"

    KNOWN_KEYS = ("seed", "run_dir", "preset", "n_rooms", "n_receivers",
                  "absorption", "volume_range_m3", "max_image_order",
                  "n_samples", "split_ratio", "snr_levels", "n_speech_files",
                  "augment_fraction", "augment_params", "truncation_prob",
                  "model", "train", "task")

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("volume_range_m3", "split_ratio", "snr_levels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.KNOWN_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("volume_range_m3", "split_ratio", "snr_levels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def desk_preset(run_dir="runs/desk", seed: int = 0) -> RunConfig:
    return RunConfig(seed=seed, run_dir=str(run_dir))


def paper_shape_preset(run_dir="runs/paper-shape", seed: int = 0) -> RunConfig:
    """Paper-dimension model shapes for structural tests; not trainable
    at desk scale (32000 samples and days of compute)."""
    cfg = RunConfig(seed=seed, run_dir=str(run_dir), preset="paper-shape",
                    n_samples=32000, model=paper_scale_transformer().to_dict())
    cfg.train = {"epochs": 150, "initial_lr": 5e-6, "batch_size": 16,
                 "weight_decay": 1e-4, "loss_kind": "L1_single"}
    return cfg


def validate_config(config) -> list:
    """Returns a list of error strings; empty means the config is valid."""
    errors = []
    if isinstance(config, (str, Path)):
        try:
            with open(config) as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            return [f"unreadable config: {e}"]
    if isinstance(config, dict):
        try:
            config = RunConfig.from_dict(config)
        except (TypeError, ValueError) as e:
            return [str(e)]
    bad_snr = [s for s in config.snr_levels if int(s) not in datagen.SNR_LEVELS]
    if bad_snr:
        errors.append(f"snr_levels {bad_snr} outside the supported set "
                      f"{list(datagen.SNR_LEVELS)}")
    if sum(config.split_ratio) != 10:
        errors.append(f"split_ratio {config.split_ratio} must sum to 10")
    if not (0.0 < config.absorption <= 1.0):
        errors.append("absorption must lie in (0, 1]")
    if config.n_rooms < 3:
        errors.append("need at least 3 rooms to populate every split")
    for lam in ("lambda1", "lambda2"):
        if config.train.get(lam, 1.0) <= 0:
            errors.append(f"{lam} must be positive")
    if not (0.0 <= config.truncation_prob <= 1.0):
        errors.append("truncation_prob must lie in [0, 1]")
    if config.task not in ("vol", "joint"):
        errors.append(f"unknown task {config.task!r}")
    if config.preset not in ("desk", "paper-shape"):
        errors.append(f"unknown preset {config.preset!r}")
    return errors


# ---------------------------------------------------------------------------
# stage caching

def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True,
                                     default=str).encode()).hexdigest()


def _stamp_path(run_dir: Path, stage: str) -> Path:
    return run_dir / f"{stage.replace('-', '_')}.stamp"


def _read_stamp(run_dir: Path, stage: str) -> str:
    stamp = _stamp_path(run_dir, stage)
    return stamp.read_text().strip() if stamp.exists() else ""


# ---------------------------------------------------------------------------
# stages

def desk_rooms(config: RunConfig):
    """Room set spanning the configured volume range on a log grid."""
    rng = np.random.default_rng(derive_seed(config.seed, "rooms"))
    lo, hi = config.volume_range_m3
    volumes = np.logspace(math.log10(lo), math.log10(hi), config.n_rooms)
    rooms = []
    for i, v in enumerate(volumes):
        # mild aspect variation so rooms are not similar up to scale
        ax = 1.0 + rng.uniform(-0.15, 0.25)
        ay = 1.0 + rng.uniform(-0.15, 0.15)
        s = (v / (ax * ay)) ** (1.0 / 3.0)
        rooms.append(rirgen.ShoeboxRoom(
            length_m=ax * s, width_m=ay * s, height_m=s,
            absorption=config.absorption,
            max_image_order=config.max_image_order))
    return rooms


def stage_simulate_rir(config: RunConfig, run_dir: Path):
    out = run_dir / "rirs"
    out.mkdir(parents=True, exist_ok=True)
    seed = config.stage_seed("simulate-rir")
    rows = []
    for i, room in enumerate(desk_rooms(config)):
        room_id = f"room_{i:03d}"
        source, receivers = rirgen.sample_room_geometry(
            room, config.n_receivers, seed=derive_seed(seed, room_id))
        for j, mic in enumerate(receivers):
            rir = rirgen.simulate_rir(room, source, mic, room_id=room_id)
            path = out / f"{room_id}_r{j}.wav"
            write_wav(path, rir.samples / np.max(np.abs(rir.samples)),
                      rir.sample_rate_hz)
            rows.append({
                "room_id": room_id, "path": str(path),
                "volume_m3": f"{rir.volume_m3:.6f}",
                "rt60_s": f"{rir.rt60_s:.6f}",
                "source_pos": "/".join(f"{x:.4f}" for x in source),
                "mic_pos": "/".join(f"{x:.4f}" for x in mic),
            })
    datagen.save_rir_manifest(out / "rir_manifest.csv", rows)
    return out / "rir_manifest.csv"


def stage_build_dataset(config: RunConfig, run_dir: Path):
    corpus_dir = run_dir / "corpus"
    seed = config.stage_seed("build-dataset")
    speech_dir = corpus_dir / "speech"
    datagen.generate_speech_dir(speech_dir, config.n_speech_files,
                                derive_seed(seed, "speech"))
    rir_rows = datagen.load_rir_manifest(run_dir / "rirs" / "rir_manifest.csv")
    manifest = datagen.build_corpus(
        rir_rows, speech_dir, corpus_dir, n_samples=config.n_samples,
        ratio=config.split_ratio, snr_levels=config.snr_levels, seed=seed)
    return manifest


def stage_augment(config: RunConfig, run_dir: Path):
    corpus_dir = run_dir / "corpus"
    manifest = Manifest.load(corpus_dir / "manifest.csv")
    base = [r for r in manifest.rows if not r.augmented]
    params = AugmentParams(**config.augment_params)
    augmented, _ = augment_manifest(Manifest(base), corpus_dir, params,
                                    fraction=config.augment_fraction,
                                    seed=config.stage_seed("augment"))
    augmented.save(corpus_dir / "manifest.csv")
    return augmented


def stage_featurize(config: RunConfig, run_dir: Path):
    corpus_dir = run_dir / "corpus"
    feat_dir = run_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load(corpus_dir / "manifest.csv")
    for row in manifest.rows:
        target = feat_dir / f"{row.id}.feat"
        if target.exists():
            continue
        audio, _ = read_wav(row.path)
        write_feature_cache(target, featurize(audio).values)
    return feat_dir


def _load_split_arrays(manifest: Manifest, feat_dir: Path, split: str, task: str):
    rows = manifest.split(split).rows
    if not rows:
        raise ValueError(f"empty split {split!r}")
    x = np.stack([evalkit._load_block(r, feat_dir) for r in rows])
    if task == "vol":
        y = np.array([[datagen.encode_volume_label(r.volume_m3)] for r in rows],
                     dtype=np.float32)
    else:
        labels = [datagen.encode_joint_label(r.rt60_s, r.volume_m3) for r in rows]
        y = np.array([[l.u, l.v] for l in labels], dtype=np.float32)
    return x, y


_SILENCE_COLUMN = None


def silence_features() -> np.ndarray:
    """Feature column of digital silence, the steady state of a padded tail."""
    global _SILENCE_COLUMN
    if _SILENCE_COLUMN is None:
        _SILENCE_COLUMN = featurize(np.zeros(datagen.CLIP_SAMPLES)).values[:, -1:]
    return _SILENCE_COLUMN


def truncate_blocks(blocks, prob: float, rng, min_s: float = 1.0):
    """Cut each block to a random shorter length with probability `prob`.

    The cut tail is replaced by silence-feature columns, matching what a
    zero-padded shorter recording converges to after the filterbank
    transient. Returns the input untouched when no block is cut.
    """
    if prob <= 0.0 or rng is None:
        return blocks
    blocks = np.array(blocks, copy=True)
    full_s = datagen.CLIP_SAMPLES / datagen.SAMPLE_RATE
    silence = silence_features().astype(blocks.dtype)
    for i in range(blocks.shape[0]):
        if rng.random() >= prob:
            continue
        length_s = rng.uniform(min_s, full_s)
        cut = frame_count(int(length_s * datagen.SAMPLE_RATE))
        if cut < blocks.shape[2]:
            blocks[i, :, cut:] = silence
    return blocks


def make_forward(model, truncation_prob: float = 0.0):
    """Batch adapter closing over the model family's input convention."""
    def prepare(xb, train, rng):
        if train:
            xb = truncate_blocks(xb, truncation_prob, rng)
        return apply_input_norm(model, xb)

    if model.family == "ast":
        def forward(xb, train, rng):
            xb = prepare(xb, train, rng)
            patches, grid = blocks_to_patches(xb, model.config.patch,
                                              model.config.stride)
            return model.forward(patches, grid, train=train, rng=rng)
    else:
        def forward(xb, train, rng):
            return model.forward(prepare(xb, train, rng), train=train,
                                 rng=rng)
    return forward


def stage_train(config: RunConfig, run_dir: Path):
    manifest = Manifest.load(run_dir / "corpus" / "manifest.csv")
    feat_dir = run_dir / "features"
    train_xy = _load_split_arrays(manifest, feat_dir, "train", config.task)
    val_xy = _load_split_arrays(manifest, feat_dir, "validation", config.task)
    model_cfg = dict(config.model)
    if config.task == "joint" and model_cfg.get("family", "ast") == "ast":
        lo = (math.log10(datagen.VOLUME_RANGE[0]) - 0.2,
              math.log10(datagen.VOLUME_RANGE[1]) + 0.2)
        model_cfg["label_ranges"] = (lo, lo)
    model = build_model(model_cfg, seed=config.stage_seed("model-init"))
    model.input_norm = input_norm_stats(train_xy[0])
    tc = TrainConfig(seed=config.stage_seed("train"), **config.train)
    ckpt_dir = run_dir / "ckpts"
    forward = make_forward(model, truncation_prob=config.truncation_prob)
    best, history = train_loop(model, forward, train_xy, val_xy,
                               tc, ckpt_dir=ckpt_dir,
                               metadata={"task": config.task})
    history.save(ckpt_dir / "history.csv")
    if best is None:
        raise ValueError("training produced no checkpoint")
    return ckpt_dir / "best.ckpt"


def stage_evaluate(config: RunConfig, run_dir: Path):
    manifest = Manifest.load(run_dir / "corpus" / "manifest.csv")
    test = manifest.split("test")
    ckpt = load_checkpoint(run_dir / "ckpts" / "best.ckpt")
    reports_dir = run_dir / "reports"
    echo_cfg = config.to_dict()
    echo_cfg.pop("run_dir")  # reports must not depend on where the run lives
    echo = {"config": echo_cfg, "stage_seed": config.stage_seed("evaluate")}
    if config.task == "joint":
        reports = evalkit.evaluate_joint(ckpt, test,
                                         features_dir=run_dir / "features")
        evalkit.emit_report(reports, None, reports_dir, echo)
    else:
        report, heatmap = evalkit.evaluate(ckpt, test, task="vol",
                                           features_dir=run_dir / "features")
        evalkit.emit_report(report, heatmap, reports_dir, echo)
    return reports_dir


_STAGE_FNS = {
    "simulate-rir": stage_simulate_rir,
    "build-dataset": stage_build_dataset,
    "augment": stage_augment,
    "featurize": stage_featurize,
    "train": stage_train,
    "evaluate": stage_evaluate,
}

_STAGE_OUTPUTS = {
    "simulate-rir": lambda d: [d / "rirs" / "rir_manifest.csv"],
    "build-dataset": lambda d: [d / "corpus" / "manifest.csv"],
    "augment": lambda d: [d / "corpus" / "manifest.csv"],
    "featurize": lambda d: [d / "features"],
    "train": lambda d: [d / "ckpts" / "best.ckpt"],
    "evaluate": lambda d: [d / "reports" / "metrics.csv"],
}


def _featurize_complete(run_dir: Path) -> bool:
    manifest_path = run_dir / "corpus" / "manifest.csv"
    if not manifest_path.exists():
        return False
    manifest = Manifest.load(manifest_path)
    feat_dir = run_dir / "features"
    return all((feat_dir / f"{r.id}.feat").exists() for r in manifest.rows)


def run_pipeline(config: RunConfig, stages=STAGES, force=False):
    """Execute the staged pipeline with caching; returns the run dir.

    A stage reruns when its config fingerprint changed, when any
    upstream stage reran, or when its outputs are missing. Failures
    abort with the failing stage named; partial outputs are kept.
    """
    errors = validate_config(config)
    if errors:
        raise StageError("config", "; ".join(errors))
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "config.lock"
    lock.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")

    # Each stamp records the stage fingerprint plus a fresh nonce from the
    # run that actually executed the stage; downstream fingerprints hash the
    # whole stamp, so rerunning any stage invalidates everything below it.
    upstream = _fingerprint({"seed": config.seed, "preset": config.preset})
    for stage in STAGES:
        fp = _fingerprint({"upstream": upstream, "stage": stage,
                           "config": config.to_dict()})
        if stage not in stages:
            upstream = fp
            continue
        outputs = _STAGE_OUTPUTS[stage](run_dir)
        stamp = _read_stamp(run_dir, stage)
        cached = (not force and stamp.split(":")[0] == fp
                  and all(Path(p).exists() for p in outputs))
        if cached and stage == "featurize":
            cached = _featurize_complete(run_dir)
        if not cached:
            try:
                _STAGE_FNS[stage](config, run_dir)
            except Exception as e:
                raise StageError(stage, str(e)) from e
            stamp = f"{fp}:{os.urandom(8).hex()}"
            _stamp_path(run_dir, stage).write_text(stamp + "\n")
        upstream = stamp
    return run_dir
