"""Adaptation of pretrained vision-transformer weights to feature blocks.

Three operations: averaging the three input channels of a patch-embed
kernel, cut-and-bilinear-interpolation of the positional grid, and head
reinitialization for a new task.
"""

from __future__ import annotations

import numpy as np

from .models import PositionalGrid, trunc_normal
from .checkpoint import Checkpoint


def transfer_channel_average(src_patch_weight: np.ndarray) -> np.ndarray:
    """(3, ph, pw, d) three-channel patch kernel -> (ph*pw, d) single-channel."""
    w = np.asarray(src_patch_weight)
    if w.ndim != 4 or w.shape[0] != 3:
        raise ValueError(f"expected a (3, ph, pw, d) kernel, got {w.shape}")
    mean = w.mean(axis=0)
    return mean.reshape(-1, mean.shape[-1])


def _axis_positions(n_src: int, n_dst: int) -> np.ndarray:
    if n_dst == 1:
        return np.array([0.0])
    return np.linspace(0.0, n_src - 1, n_dst)


def interpolate_positional(src: PositionalGrid, dst_dims) -> PositionalGrid:
    """Cut-and-bilinear positional resize; the CLS row passes through.

    Axes that shrink are center-cropped ("cut"); axes that grow are
    bilinearly interpolated with corners aligned.
    """
    r1, c1 = dst_dims
    if r1 < 1 or c1 < 1:
        raise ValueError("destination grid must be non-empty")
    d = src.embeddings.shape[1]
    grid = src.embeddings[1:].reshape(src.rows, src.cols, d)

    def resize_axis(g, axis, n_dst):
        n_src = g.shape[axis]
        if n_dst == n_src:
            return g
        if n_dst < n_src:  # cut: central crop
            start = (n_src - n_dst) // 2
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n_dst)
            return g[tuple(sl)]
        pos = _axis_positions(n_src, n_dst)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = (pos - lo).reshape([-1 if a == axis else 1 for a in range(g.ndim)])
        return (np.take(g, lo, axis=axis) * (1.0 - frac)
                + np.take(g, hi, axis=axis) * frac)

    grid = resize_axis(grid, 0, r1)
    grid = resize_axis(grid, 1, c1)
    embeddings = np.concatenate([src.embeddings[:1], grid.reshape(r1 * c1, d)])
    return PositionalGrid(embeddings=embeddings, rows=r1, cols=c1)


def reinit_head(ckpt: Checkpoint, task: str, seed: int = 0) -> Checkpoint:
    """Redraw the head for a new task; every other tensor is kept bit-exact."""
    n_out = {"vol": 1, "rt60": 1, "joint": 2}.get(task)
    if n_out is None:
        raise ValueError(f"unknown task {task!r}")
    if "head.weight" not in ckpt.params:
        raise ValueError("checkpoint has no head tensors")
    rng = np.random.default_rng(seed)
    d = ckpt.params["head.weight"].shape[0]
    dtype = ckpt.params["head.weight"].dtype
    params = dict(ckpt.params)
    params["head.weight"] = trunc_normal(rng, (d, n_out), dtype=dtype)
    params["head.bias"] = np.zeros(n_out, dtype=dtype)
    config = dict(ckpt.config)
    if config.get("family") == "ast":
        ranges = list(map(tuple, config["label_ranges"]))
        if len(ranges) != n_out:
            ranges = (ranges * n_out)[:n_out]
        config["label_ranges"] = tuple(ranges)
    else:
        config["n_outputs"] = n_out
    metadata = dict(ckpt.metadata)
    metadata["task"] = task
    return Checkpoint(params=params, config=config, metadata=metadata)
