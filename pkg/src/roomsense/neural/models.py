"""CNN, CRNN, and convolution-free patch-attention regressors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .config import TransformerConfig, ConvNetConfig, ConvRecurrentConfig


# ---------------------------------------------------------------------------
# initializers

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def orthogonal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    a = rng.normal(size=(max(shape), max(shape)))
    q, _ = np.linalg.qr(a)
    return q[: shape[0], : shape[1]].astype(dtype)


# ---------------------------------------------------------------------------
# patch geometry

def patch_grid_dims(n_rows: int, n_cols: int, patch: int = 16, stride: int = 10):
    """Patch counts per axis: ceil((n - patch) / stride), floored to 1."""
    if n_rows < patch or n_cols < patch:
        raise ValueError(f"input {n_rows}x{n_cols} smaller than the {patch} patch")
    rows = max(1, math.ceil((n_rows - patch) / stride))
    cols = max(1, math.ceil((n_cols - patch) / stride))
    return rows, cols


def patch_split(block: np.ndarray, patch: int = 16, stride: int = 10):
    """Split an F x T block into overlapping flattened patches.

    Returns (P x patch*patch matrix, (rows, cols)). Patches whose extent
    runs past the block edge read zeros there.
    """
    block = np.asarray(block)
    f, t = block.shape
    rows, cols = patch_grid_dims(f, t, patch, stride)
    need_f = (rows - 1) * stride + patch
    need_t = (cols - 1) * stride + patch
    padded = np.pad(block, ((0, max(0, need_f - f)), (0, max(0, need_t - t))))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch))
    sel = windows[::stride, ::stride][:rows, :cols]
    return sel.reshape(rows * cols, patch * patch), (rows, cols)


def blocks_to_patches(blocks, patch: int = 16, stride: int = 10):
    """Batched patch split; all blocks must share a shape."""
    mats, grids = zip(*(patch_split(b, patch, stride) for b in blocks))
    if len(set(grids)) != 1:
        raise ValueError("blocks in one batch must share a patch grid")
    return np.stack(mats), grids[0]


@dataclass
class PositionalGrid:
    embeddings: np.ndarray  # (1 + rows*cols) x d; row 0 is the CLS slot
    rows: int
    cols: int

    def __post_init__(self):
        if self.embeddings.shape[0] != 1 + self.rows * self.cols:
            raise ValueError("positional row count inconsistent with grid dims")


# ---------------------------------------------------------------------------
# transformer

def scaled_head_output(z: Tensor, label_ranges) -> Tensor:
    """Sigmoid squashing affinely rescaled to the per-output label range."""
    lo = np.array([r[0] for r in label_ranges], dtype=z.dtype)
    hi = np.array([r[1] for r in label_ranges], dtype=z.dtype)
    return z.sigmoid() * Tensor(hi - lo) + Tensor(lo)


class PatchTransformer:
    """Convolution-free patch-attention regressor.

    Pre-norm encoder blocks with GELU MLPs; the pooled encoder output is
    squashed by a sigmoid head onto the configured label range(s).
    """

    family = "ast"

    def __init__(self, config: TransformerConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        d = config.embed_dim
        patch_dim = config.patch * config.patch
        rows, cols = patch_grid_dims(*config.input_shape, config.patch, config.stride)
        self.grid = (rows, cols)
        rng = np.random.default_rng(seed)
        p = {}
        p["patch_embed.weight"] = trunc_normal(rng, (patch_dim, d), dtype=dtype)
        p["patch_embed.bias"] = np.zeros(d, dtype=dtype)
        p["cls_token"] = trunc_normal(rng, (d,), dtype=dtype)
        p["pos_embed"] = trunc_normal(rng, (1 + rows * cols, d), dtype=dtype)
        for i in range(config.n_layers):
            pre = f"block{i}."
            p[pre + "ln1.gamma"] = np.ones(d, dtype=dtype)
            p[pre + "ln1.beta"] = np.zeros(d, dtype=dtype)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + f"attn.{name}"] = trunc_normal(rng, (d, d), dtype=dtype)
                p[pre + f"attn.{name}_bias"] = np.zeros(d, dtype=dtype)
            p[pre + "ln2.gamma"] = np.ones(d, dtype=dtype)
            p[pre + "ln2.beta"] = np.zeros(d, dtype=dtype)
            hidden = d * config.mlp_ratio
            p[pre + "mlp.w1"] = trunc_normal(rng, (d, hidden), dtype=dtype)
            p[pre + "mlp.b1"] = np.zeros(hidden, dtype=dtype)
            p[pre + "mlp.w2"] = trunc_normal(rng, (hidden, d), dtype=dtype)
            p[pre + "mlp.b2"] = np.zeros(d, dtype=dtype)
        p["final_ln.gamma"] = np.ones(d, dtype=dtype)
        p["final_ln.beta"] = np.zeros(d, dtype=dtype)
        n_out = len(config.label_ranges)
        p["head.weight"] = trunc_normal(rng, (d, n_out), dtype=dtype)
        p["head.bias"] = np.zeros(n_out, dtype=dtype)
        self.params = {k: Tensor.param(v) for k, v in p.items()}
        self.input_norm = None

    # positional embeddings adapted to a different patch grid (detached)
    def _positional_for(self, grid) -> Tensor:
        pos = self.params["pos_embed"]
        if grid == self.grid:
            return pos
        from .transfer import interpolate_positional
        src = PositionalGrid(pos.data, *self.grid)
        return Tensor(interpolate_positional(src, grid).embeddings.astype(self.dtype))

    def encode(self, seq: Tensor, train: bool = False, rng=None) -> Tensor:
        cfg = self.config
        d = cfg.embed_dim
        heads = cfg.n_heads
        dh = d // heads
        p = self.params
        x = seq
        B, L, _ = x.shape
        for i in range(cfg.n_layers):
            pre = f"block{i}."
            h = T.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            q = T.linear(h, p[pre + "attn.wq"], p[pre + "attn.wq_bias"])
            k = T.linear(h, p[pre + "attn.wk"], p[pre + "attn.wk_bias"])
            v = T.linear(h, p[pre + "attn.wv"], p[pre + "attn.wv_bias"])
            q = q.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)
            k = k.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)
            v = v.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)
            scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
            attn = scores.softmax(axis=-1)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
            ctx = T.linear(ctx, p[pre + "attn.wo"], p[pre + "attn.wo_bias"])
            ctx = T.dropout(ctx, cfg.dropout_rate, rng, train)
            x = x + ctx
            h = T.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            h = T.linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"]).gelu()
            h = T.linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
            h = T.dropout(h, cfg.dropout_rate, rng, train)
            x = x + h
        return T.layer_norm(x, p["final_ln.gamma"], p["final_ln.beta"])

    def forward(self, patches: np.ndarray, grid=None, train: bool = False,
                rng=None) -> Tensor:
        """patches: (B, P, patch*patch) float array -> (B, n_outputs)."""
        patches = np.asarray(patches, dtype=self.dtype)
        if grid is None:
            grid = self.grid
        B, P, _ = patches.shape
        if P != grid[0] * grid[1]:
            raise ValueError("patch count inconsistent with the stated grid")
        p = self.params
        seq = T.linear(Tensor(patches), p["patch_embed.weight"], p["patch_embed.bias"])
        cls = p["cls_token"].reshape(1, 1, self.config.embed_dim)
        cls_rows = cls * Tensor(np.ones((B, 1, 1), dtype=self.dtype))
        seq = T.concat([cls_rows, seq], axis=1)
        seq = seq + self._positional_for(grid)
        out = self.encode(seq, train=train, rng=rng)
        if self.config.pool == "cls":
            pooled = out[:, 0, :]
        else:
            pooled = out.mean(axis=1)
        z = T.linear(pooled, p["head.weight"], p["head.bias"])
        return scaled_head_output(z, self.config.label_ranges)


# ---------------------------------------------------------------------------
# CNN

class CnnRegressor:
    """Six conv/avg-pool blocks with ReLU and 0.5 dropout, linear head.

    Pooling is time-heavier: the feature axis is halved only while it
    stays large enough, the time axis is halved at every block.
    """

    family = "cnn"

    def __init__(self, config: ConvNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        k = config.kernel
        p = {}
        in_ch = 1
        f, t = config.input_shape
        self.pools = []
        for i, out_ch in enumerate(config.channels):
            p[f"conv{i}.weight"] = trunc_normal(
                rng, (out_ch, in_ch, k, k), std=math.sqrt(2.0 / (in_ch * k * k)),
                dtype=dtype)
            p[f"conv{i}.bias"] = np.zeros(out_ch, dtype=dtype)
            ph = 2 if f >= 4 else 1
            pw = 2 if t >= 4 else 1
            self.pools.append((ph, pw))
            f, t = f // ph, t // pw
            in_ch = out_ch
        flat = in_ch * f * t
        p["head.weight"] = trunc_normal(rng, (flat, config.n_outputs),
                                        std=math.sqrt(1.0 / flat), dtype=dtype)
        p["head.bias"] = np.zeros(config.n_outputs, dtype=dtype)
        self.params = {key: Tensor.param(v) for key, v in p.items()}
        self.input_norm = None

    def forward(self, blocks: np.ndarray, train: bool = False, rng=None) -> Tensor:
        x = np.asarray(blocks, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None, :, :]
        h = Tensor(x)
        for i, (ph, pw) in enumerate(self.pools):
            h = T.conv2d(h, self.params[f"conv{i}.weight"],
                         self.params[f"conv{i}.bias"], padding=1).relu()
            h = T.avgpool2d(h, ph, pw)
            h = T.dropout(h, self.config.dropout_rate, rng, train)
        B = h.shape[0]
        flat = h.reshape(B, int(np.prod(h.shape[1:])))
        return T.linear(flat, self.params["head.weight"], self.params["head.bias"])


# ---------------------------------------------------------------------------
# CRNN

class CrnnRegressor:
    """Conv stack (feature-axis pooling only) -> LSTM(64) -> time max-pool
    -> dropout -> dense -> ReLU; prediction read from the last time step."""

    family = "crnn"

    def __init__(self, config: ConvRecurrentConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        k = config.kernel
        p = {}
        in_ch = 1
        f = config.input_rows
        self.pools = []
        for i, out_ch in enumerate(config.channels):
            p[f"conv{i}.weight"] = trunc_normal(
                rng, (out_ch, in_ch, k, k), std=math.sqrt(2.0 / (in_ch * k * k)),
                dtype=dtype)
            p[f"conv{i}.bias"] = np.zeros(out_ch, dtype=dtype)
            ph = 2 if f >= 2 else 1
            self.pools.append(ph)
            f = f // ph
            in_ch = out_ch
        self.seq_dim = in_ch * f
        hidden = config.lstm_hidden
        p["lstm.wx"] = trunc_normal(rng, (self.seq_dim, 4 * hidden),
                                    std=math.sqrt(1.0 / self.seq_dim), dtype=dtype)
        p["lstm.wh"] = np.concatenate(
            [orthogonal(rng, (hidden, hidden), dtype=dtype) for _ in range(4)], axis=1)
        p["lstm.bias"] = np.zeros(4 * hidden, dtype=dtype)
        p["head.weight"] = trunc_normal(rng, (hidden, config.n_outputs),
                                        std=math.sqrt(1.0 / hidden), dtype=dtype)
        # positive bias keeps the final ReLU alive at initialization
        p["head.bias"] = np.full(config.n_outputs, 0.5, dtype=dtype)
        self.params = {key: Tensor.param(v) for key, v in p.items()}
        self.input_norm = None

    def _lstm(self, seq: Tensor) -> Tensor:
        """seq: (B, T, C) -> hidden states (B, T, H)."""
        B, steps, _ = seq.shape
        H = self.config.lstm_hidden
        p = self.params
        h = Tensor(np.zeros((B, H), dtype=self.dtype))
        c = Tensor(np.zeros((B, H), dtype=self.dtype))
        xw = T.linear(seq, p["lstm.wx"], p["lstm.bias"])  # precompute input path
        outs = []
        for t_i in range(steps):
            gates = xw[:, t_i, :] + h @ p["lstm.wh"]
            i_g = gates[:, 0 * H : 1 * H].sigmoid()
            f_g = gates[:, 1 * H : 2 * H].sigmoid()
            g_g = gates[:, 2 * H : 3 * H].tanh()
            o_g = gates[:, 3 * H : 4 * H].sigmoid()
            c = f_g * c + i_g * g_g
            h = o_g * c.tanh()
            outs.append(h)
        return T.stack(outs, axis=1)

    def forward(self, blocks: np.ndarray, train: bool = False, rng=None) -> Tensor:
        x = np.asarray(blocks, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None, :, :]
        h = Tensor(x)
        for i, ph in enumerate(self.pools):
            h = T.conv2d(h, self.params[f"conv{i}.weight"],
                         self.params[f"conv{i}.bias"], padding=1).relu()
            if ph > 1:
                h = T.avgpool2d(h, ph, 1)
        B, C, F, steps = h.shape
        seq = h.reshape(B, C * F, steps).transpose(0, 2, 1)
        states = self._lstm(seq)
        pooled = T.maxpool_time(states, self.config.time_pool)
        pooled = T.dropout(pooled, self.config.dropout_rate, rng, train)
        dense = T.linear(pooled, self.params["head.weight"],
                         self.params["head.bias"]).relu()
        return dense[:, -1, :]


# ---------------------------------------------------------------------------

def input_norm_stats(blocks, eps: float = 1e-6):
    """Per-feature-row mean and std over a training set of blocks."""
    blocks = np.asarray(blocks, dtype=np.float64)
    mean = blocks.mean(axis=(0, 2), keepdims=False)[:, None]
    std = blocks.std(axis=(0, 2), keepdims=False)[:, None] + eps
    return mean.astype(np.float32), std.astype(np.float32)


def apply_input_norm(model, blocks):
    """Standardize blocks with the model's stored training statistics."""
    if getattr(model, "input_norm", None) is None:
        return blocks
    mean, std = model.input_norm
    return (np.asarray(blocks) - mean) / std


def build_model(config_dict: dict, seed: int = 0, dtype=np.float32):
    cfg = dict(config_dict)
    family = cfg.pop("family")
    def _tup(x):
        return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in x)
    if family == "ast":
        cfg["input_shape"] = tuple(cfg["input_shape"])
        cfg["label_ranges"] = _tup(cfg["label_ranges"])
        return PatchTransformer(TransformerConfig(**cfg), seed=seed, dtype=dtype)
    if family == "cnn":
        cfg["channels"] = tuple(cfg["channels"])
        cfg["input_shape"] = tuple(cfg["input_shape"])
        return CnnRegressor(ConvNetConfig(**cfg), seed=seed, dtype=dtype)
    if family == "crnn":
        cfg["channels"] = tuple(cfg["channels"])
        return CrnnRegressor(ConvRecurrentConfig(**cfg), seed=seed, dtype=dtype)
    raise ValueError(f"unknown model family {family!r}")
