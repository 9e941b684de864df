"""Evaluation: log-domain regression metrics, the single-parameter,
variable-length, and joint harnesses, and CSV report emission."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen
from .audio_io import read_wav, read_feature_cache
from .datagen import Manifest, decode_joint_label, JointLabel
from .features import featurize
from .neural.tensor import no_grad
from .neural.checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint
from .neural.models import blocks_to_patches, apply_input_norm

VARLEN_LENGTHS_S = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
HEATMAP_BINS = 20


# ---------------------------------------------------------------------------
# metrics

def metric_mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    return float(np.mean((pred - truth) ** 2))


def metric_mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    return float(np.mean(np.abs(pred - truth)))


def metric_pearson(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    px = pred - pred.mean()
    tx = truth - truth.mean()
    denom = math.sqrt(float(np.sum(px ** 2)) * float(np.sum(tx ** 2)))
    if denom == 0.0:
        raise ValueError("Pearson correlation needs nonzero variance in both arguments")
    return float(np.clip(np.sum(px * tx) / denom, -1.0, 1.0))


def metric_meanmult(pred_linear, truth_linear) -> float:
    """exp of the mean absolute natural-log ratio; 1 means perfect."""
    pred = np.asarray(pred_linear, dtype=np.float64).ravel()
    truth = np.asarray(truth_linear, dtype=np.float64).ravel()
    if np.any(pred <= 0) or np.any(truth <= 0):
        raise ValueError("mean-mult inputs must be positive")
    return float(np.exp(np.mean(np.abs(np.log(pred / truth)))))


@dataclass
class MetricsReport:
    n_samples: int
    mse: float
    mae: float
    pearson_rho: float   # nan when the predictions are degenerate
    mean_mult: float
    linear_median_abs_err: float
    linear_mean_abs_err: float

    COLUMNS = ["n_samples", "mse", "mae", "pearson_rho", "mean_mult",
               "linear_median_abs_err", "linear_mean_abs_err"]

    def as_row(self):
        return [self.n_samples] + [f"{getattr(self, c):.10g}"
                                   for c in self.COLUMNS[1:]]


@dataclass
class HeatmapGrid:
    counts: np.ndarray   # bins x bins, rows index truth, columns prediction
    lo: float
    hi: float

    @property
    def n_bins(self):
        return self.counts.shape[0]

    def edges(self):
        return np.linspace(self.lo, self.hi, self.n_bins + 1)


def build_report(pred_log10, truth_log10) -> MetricsReport:
    pred = np.asarray(pred_log10, dtype=np.float64).ravel()
    truth = np.asarray(truth_log10, dtype=np.float64).ravel()
    try:
        rho = metric_pearson(pred, truth)
    except ValueError:
        rho = float("nan")
    lin_pred = 10.0 ** pred
    lin_truth = 10.0 ** truth
    abs_err = np.abs(lin_pred - lin_truth)
    return MetricsReport(
        n_samples=pred.size,
        mse=metric_mse(pred, truth),
        mae=metric_mae(pred, truth),
        pearson_rho=rho,
        mean_mult=metric_meanmult(lin_pred, lin_truth),
        linear_median_abs_err=float(np.median(abs_err)),
        linear_mean_abs_err=float(np.mean(abs_err)),
    )


def build_heatmap(pred_log10, truth_log10, lo=None, hi=None,
                  n_bins: int = HEATMAP_BINS) -> HeatmapGrid:
    pred = np.asarray(pred_log10, dtype=np.float64).ravel()
    truth = np.asarray(truth_log10, dtype=np.float64).ravel()
    if lo is None:
        lo = math.log10(datagen.VOLUME_RANGE[0])
    if hi is None:
        hi = math.log10(datagen.VOLUME_RANGE[1])
    edges = np.linspace(lo, hi, n_bins + 1)
    ti = np.clip(np.digitize(truth, edges) - 1, 0, n_bins - 1)
    pi = np.clip(np.digitize(pred, edges) - 1, 0, n_bins - 1)
    counts = np.zeros((n_bins, n_bins), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    return HeatmapGrid(counts=counts, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# inference plumbing

def _load_block(row, features_dir):
    if features_dir is not None:
        cached = Path(features_dir) / f"{row.id}.feat"
        if cached.exists():
            return read_feature_cache(cached)
    audio, _ = read_wav(row.path)
    return featurize(audio).values


def predict_blocks(model, blocks, batch_size: int = 16) -> np.ndarray:
    """Batched forward pass over equally shaped feature blocks."""
    blocks = apply_input_norm(model, np.asarray(blocks))
    outs = []
    with no_grad():
        for lo in range(0, len(blocks), batch_size):
            chunk = blocks[lo : lo + batch_size]
            if model.family == "ast":
                patches, grid = blocks_to_patches(
                    chunk, model.config.patch, model.config.stride)
                outs.append(model.forward(patches, grid).data)
            else:
                outs.append(model.forward(chunk).data)
    return np.concatenate(outs, axis=0)


def _resolve_model(ckpt):
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    return ckpt, model_from_checkpoint(ckpt)


def _n_outputs(model) -> int:
    return model.params["head.bias"].shape[0] if "head.bias" in model.params \
        else model.params["head.weight"].shape[1]


def evaluate(ckpt, manifest: Manifest, task: str = "vol",
             features_dir=None, batch_size: int = 16,
             n_bins: int = HEATMAP_BINS):
    """Single-parameter harness: forward every row, metrics in log10."""
    if task != "vol":
        raise ValueError(f"single-parameter evaluation supports task 'vol', got {task!r}")
    ckpt, model = _resolve_model(ckpt)
    if _n_outputs(model) != 1:
        raise ValueError("checkpoint head is not a single-output volume head")
    rows = manifest.rows
    if not rows:
        raise ValueError("empty evaluation split")
    blocks = np.stack([_load_block(r, features_dir) for r in rows])
    pred = predict_blocks(model, blocks, batch_size)[:, 0]
    truth = np.array([datagen.encode_volume_label(r.volume_m3) for r in rows])
    return build_report(pred, truth), build_heatmap(pred, truth, n_bins=n_bins)


def evaluate_varlen(ckpt, manifest: Manifest, lengths=VARLEN_LENGTHS_S,
                    mode: str = "pad", batch_size: int = 16):
    """Truncate each clip to every length; metrics per length.

    mode "pad" zero-pads the truncated waveform back to the full clip
    (trailing zeros) so fixed-input models see their native shape; mode
    "native" featurizes the short clip as-is and lets the transformer
    interpolate its positional grid onto the induced patch layout.
    """
    if mode not in ("pad", "native"):
        raise ValueError(f"unknown variable-length mode {mode!r}")
    ckpt, model = _resolve_model(ckpt)
    if mode == "native" and model.family != "ast":
        raise ValueError("native variable-length evaluation needs a transformer")
    rows = manifest.rows
    if not rows:
        raise ValueError("empty evaluation split")
    waves = [read_wav(r.path)[0] for r in rows]
    truth = np.array([datagen.encode_volume_label(r.volume_m3) for r in rows])
    full = datagen.CLIP_SAMPLES
    out = {}
    for length_s in lengths:
        n = int(round(length_s * datagen.SAMPLE_RATE))
        clips = []
        for w in waves:
            clip = w[:n]
            if mode == "pad" and clip.shape[0] < full:
                clip = np.concatenate([clip, np.zeros(full - clip.shape[0],
                                                      dtype=clip.dtype)])
            clips.append(clip)
        blocks = np.stack([featurize(c).values for c in clips])
        pred = predict_blocks(model, blocks, batch_size)[:, 0]
        out[float(length_s)] = build_report(pred, truth)
    return out


def evaluate_joint(ckpt, manifest: Manifest, features_dir=None,
                   batch_size: int = 16):
    """Two-head harness; reports per-task metrics after label decoding."""
    ckpt, model = _resolve_model(ckpt)
    if _n_outputs(model) != 2 or ckpt.metadata.get("task", "joint") != "joint":
        raise ValueError("checkpoint is not a joint two-parameter model")
    rows = manifest.rows
    if not rows:
        raise ValueError("empty evaluation split")
    blocks = np.stack([_load_block(r, features_dir) for r in rows])
    pred = predict_blocks(model, blocks, batch_size)
    rt60_pred, vol_pred = zip(*(decode_joint_label(JointLabel(u, v))
                                for u, v in pred))
    reports = {
        "rt60": build_report(np.log10(rt60_pred),
                             np.log10([r.rt60_s for r in rows])),
        "vol": build_report(np.log10(vol_pred),
                            np.log10([r.volume_m3 for r in rows])),
    }
    return reports


# ---------------------------------------------------------------------------
# report files

def emit_report(reports, heatmap, out_dir, config_echo=None):
    """metrics.csv + heatmap.csv + config.json with deterministic bytes.

    reports: a single MetricsReport or a {name: MetricsReport} dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(reports, MetricsReport):
        reports = {"all": reports}
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset"] + MetricsReport.COLUMNS)
        for name in sorted(reports):
            writer.writerow([name] + reports[name].as_row())
    if heatmap is not None:
        with open(out_dir / "heatmap.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lo", "hi", "n_bins"])
            writer.writerow([f"{heatmap.lo:.10g}", f"{heatmap.hi:.10g}",
                             heatmap.n_bins])
            for row in heatmap.counts:
                writer.writerow([int(c) for c in row])
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config_echo or {}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return out_dir


def load_metrics_csv(path):
    """Round-trip reader for metrics.csv; returns {subset: MetricsReport}."""
    out = {}
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            out[d["subset"]] = MetricsReport(
                n_samples=int(d["n_samples"]),
                **{c: float(d[c]) for c in MetricsReport.COLUMNS[1:]})
    return out
