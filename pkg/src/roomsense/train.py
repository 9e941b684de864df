"""Training harness: quadratic losses, Adam with decoupled weight decay,
plateau learning-rate schedule, early stopping, and grid search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import derive_seed
from .neural.tensor import Tensor, no_grad
from .neural.checkpoint import checkpoint_from_model, save_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 50
    initial_lr: float = 5e-4
    batch_size: int = 16
    weight_decay: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 10
    loss_kind: str = "L1_single"     # or "L2_joint"
    lambda1: float = 1.0
    lambda2: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("L1_single", "L2_joint"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind == "L2_joint" and (self.lambda1 <= 0 or self.lambda2 <= 0):
            raise ValueError("joint loss weights must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")


def loss_single(pred: Tensor, target: np.ndarray) -> Tensor:
    """Batch-mean squared error, (1/B) * sum (pred - target)^2."""
    t = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = pred - Tensor(t)
    return (diff * diff).sum() * (1.0 / pred.shape[0])


def loss_joint(pred_u: Tensor, pred_v: Tensor, target_u, target_v,
               lambda1: float = 1.0, lambda2: float = 2.0) -> Tensor:
    """Normalized two-task MSE; each term is scale-free in its targets."""
    tu = np.asarray(target_u, dtype=pred_u.dtype).reshape(pred_u.shape)
    tv = np.asarray(target_v, dtype=pred_v.dtype).reshape(pred_v.shape)
    b = tu.shape[0]
    norm_u = float(np.sum(tu ** 2))
    norm_v = float(np.sum(tv ** 2))
    if norm_u == 0.0 or norm_v == 0.0:
        raise ValueError("joint loss normalizer is zero")
    du = pred_u - Tensor(tu)
    dv = pred_v - Tensor(tv)
    return (du * du).sum() * (lambda1 / (b * norm_u)) \
        + (dv * dv).sum() * (lambda2 / (b * norm_v))


def batch_loss(pred: Tensor, target: np.ndarray, config: TrainConfig) -> Tensor:
    if config.loss_kind == "L1_single":
        return loss_single(pred, target)
    target = np.asarray(target)
    return loss_joint(pred[:, 0:1], pred[:, 1:2],
                      target[:, 0:1], target[:, 1:2],
                      config.lambda1, config.lambda2)


# ---------------------------------------------------------------------------
# optimizer and schedules

class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def to_arrays(self) -> dict:
        out = {"adam.step": np.array([float(self.step)], dtype=np.float64)}
        for k, a in self.m.items():
            out[f"adam.m.{k}"] = a.astype(np.float64)
        for k, a in self.v.items():
            out[f"adam.v.{k}"] = a.astype(np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, dtype=np.float32) -> "AdamState":
        st = cls()
        st.step = int(arrays["adam.step"][0])
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                st.m[k[len("adam.m."):]] = a.astype(dtype)
            elif k.startswith("adam.v."):
                st.v[k[len("adam.v."):]] = a.astype(dtype)
        return st


def adam_step(params: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update over every parameter with a gradient buffer.

    Weight decay is decoupled: wd * theta joins the update directly
    rather than the gradient moments.
    """
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        update = mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            update = update + weight_decay * tensor.data
        tensor.data = tensor.data - np.asarray(lr * update, dtype=tensor.data.dtype)


class PlateauSchedule:
    """Halve the learning rate after `patience` non-improving epochs."""

    def __init__(self, initial_lr: float, factor: float = 0.5,
                 patience: int = 5, floor: float = 1e-8):
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.best = math.inf
        self.stale = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.stale = 0
        return self.lr


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in self.rows:
                writer.writerow([row[0]] + [f"{x:.10g}" for x in row[1:]])


def _epoch_eval(forward, x, y, config, batch_size: int) -> float:
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(x), batch_size):
            xb, yb = x[lo : lo + batch_size], y[lo : lo + batch_size]
            total += batch_loss(forward(xb, False, None), yb, config).item() * len(xb)
            count += len(xb)
    return total / count


def train_loop(model, forward, train_xy, val_xy, config: TrainConfig,
               ckpt_dir=None, start_epoch: int = 0,
               adam_state: AdamState | None = None,
               prior_val_losses=None, metadata: dict | None = None):
    """Deterministic minibatch training with plateau LR and early stop.

    forward(x_batch, train, rng) -> prediction Tensor; shuffling and
    dropout are re-seeded per epoch from config.seed so a resumed run
    retraces the interrupted one exactly. To resume, pass the saved
    optimizer state, start_epoch, and the validation losses already
    observed (they replay the schedule and stopping counters).
    """
    x_train, y_train = train_xy
    x_val, y_val = val_xy
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("empty training or validation split")
    state = adam_state or AdamState()
    sched = PlateauSchedule(config.initial_lr, config.plateau_factor,
                            config.plateau_patience)
    stopper = EarlyStopper(config.early_stop_patience)
    history = TrainHistory()
    best_val = math.inf
    best_ckpt = None
    for past in prior_val_losses or ():
        best_val = min(best_val, past)
        sched.update(past)
        stopper.update(past)
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "epoch", epoch))
        order = rng.permutation(len(x_train))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            for t in model.params.values():
                t.zero_grad()
            drop_rng = np.random.default_rng(
                derive_seed(config.seed, "dropout", epoch, lo))
            pred = forward(x_train[idx], True, drop_rng)
            loss = batch_loss(pred, y_train[idx], config)
            loss.backward()
            adam_step(model.params, state, sched.lr, config.weight_decay)
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss = _epoch_eval(forward, x_val, y_val, config, config.batch_size)
        history.rows.append((epoch, train_loss, val_loss, sched.lr))
        if val_loss < best_val:
            best_val = val_loss
            best_ckpt = checkpoint_from_model(model, metadata={
                **(metadata or {}), "epoch": epoch,
                "best_val_loss": best_val, "seed": config.seed})
            if ckpt_dir is not None:
                save_checkpoint(Path(ckpt_dir) / "best.ckpt", best_ckpt)
        if ckpt_dir is not None:
            last = checkpoint_from_model(model, metadata={
                **(metadata or {}), "epoch": epoch,
                "best_val_loss": best_val, "seed": config.seed})
            last.params.update(state.to_arrays())
            save_checkpoint(Path(ckpt_dir) / "last.ckpt", last)
        sched.update(val_loss)
        if stopper.update(val_loss):
            break
    return best_ckpt, history


def load_train_state(path, dtype=np.float32):
    """Split a last.ckpt into (model checkpoint, AdamState, next epoch)."""
    from .neural.checkpoint import Checkpoint, load_checkpoint
    raw = load_checkpoint(path)
    model_params = {k: v for k, v in raw.params.items()
                    if not k.startswith("adam.")}
    adam = AdamState.from_arrays(raw.params, dtype=dtype)
    ckpt = Checkpoint(params=model_params, config=raw.config,
                      metadata=raw.metadata)
    return ckpt, adam, int(raw.metadata["epoch"]) + 1


def grid_search(candidates, build_and_train):
    """Pick the candidate with the lowest validation loss.

    candidates: list of TrainConfig. build_and_train(config) must return
    (checkpoint, history). Ties break toward the lower learning rate,
    then the smaller batch size.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    table = []
    for config in candidates:
        ckpt, history = build_and_train(config)
        val = min(r[2] for r in history.rows)
        table.append({"config": config, "val_loss": val, "checkpoint": ckpt})
    best = min(table, key=lambda r: (r["val_loss"], r["config"].initial_lr,
                                     r["config"].batch_size))
    return best, table
