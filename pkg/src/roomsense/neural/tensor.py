"""Minimal reverse-mode automatic differentiation on numpy arrays.

Nodes record their parents and a backward closure; `backward()` runs a
topological sweep accumulating gradients into `.grad`. Compute dtype is
whatever the leaf arrays carry (float32 for training, float64 for
verification), and a `no_grad()` context skips graph construction.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy import special

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the broadcast-source shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if (_GRAD_ENABLED and self.requires_grad) else ()
        self._backward = backward if self._parents else None

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(np.asarray(data), requires_grad=True)

    @staticmethod
    def _wrap(x, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd driver -------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(node):
            stack = [(node, iter(node._parents))]
            seen.add(id(node))
            while stack:
                cur, it = stack[-1]
                advanced = False
                for p in it:
                    if id(p) not in seen and p._parents:
                        seen.add(id(p))
                        stack.append((p, iter(p._parents)))
                        advanced = True
                        break
                    seen.add(id(p))
                if not advanced:
                    topo.append(cur)
                    stack.pop()

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent._parents:
                        key = id(parent)
                        grads[key] = pg if key not in grads else grads[key] + pg
                    else:
                        parent.grad = pg if parent.grad is None else parent.grad + pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
        # leaves reached directly (self is a leaf)
        if not self._parents and self.requires_grad:
            g = np.asarray(grad, dtype=self.data.dtype)
            self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other):
        other = self._wrap(other, self)
        out = Tensor(self.data + other.data, parents=(self, other),
                     backward=lambda g: (_unbroadcast(g, self.shape),
                                         _unbroadcast(g, other.shape)))
        return out

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, parents=(self,), backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._wrap(other, self))

    def __rsub__(self, other):
        return self._wrap(other, self) + (-self)

    def __mul__(self, other):
        other = self._wrap(other, self)
        return Tensor(self.data * other.data, parents=(self, other),
                      backward=lambda g: (_unbroadcast(g * other.data, self.shape),
                                          _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other, self)
        return Tensor(self.data / other.data, parents=(self, other),
                      backward=lambda g: (
                          _unbroadcast(g / other.data, self.shape),
                          _unbroadcast(-g * self.data / other.data ** 2, other.shape)))

    def __rtruediv__(self, other):
        return self._wrap(other, self) / self

    def __pow__(self, exponent: float):
        out_data = self.data ** exponent
        return Tensor(out_data, parents=(self,),
                      backward=lambda g: (g * exponent * self.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = self._wrap(other, self)

        def back(g):
            ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
            gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
            return _unbroadcast(ga, self.shape), _unbroadcast(gb, other.shape)

        return Tensor(np.matmul(self.data, other.data), parents=(self, other),
                      backward=back)

    # -- elementwise nonlinearities ----------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * out_data,))

    def log(self):
        return Tensor(np.log(self.data), parents=(self,),
                      backward=lambda g: (g / self.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor(out_data, parents=(self,),
                      backward=lambda g: (g * 0.5 / out_data,))

    def tanh(self):
        out_data = np.tanh(self.data)
        return Tensor(out_data, parents=(self,),
                      backward=lambda g: (g * (1.0 - out_data ** 2),))

    def sigmoid(self):
        out_data = special.expit(self.data)
        return Tensor(out_data, parents=(self,),
                      backward=lambda g: (g * out_data * (1.0 - out_data),))

    def relu(self):
        mask = self.data > 0
        return Tensor(self.data * mask, parents=(self,),
                      backward=lambda g: (g * mask,))

    def gelu(self):
        # exact (erf) form
        x = self.data
        cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x ** 2) / np.sqrt(2.0 * np.pi)
        return Tensor(x * cdf, parents=(self,),
                      backward=lambda g: (g * (cdf + x * pdf),))

    # -- reductions ---------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return Tensor(out_data, parents=(self,), backward=back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max_axis(self, axis: int):
        """Max along one axis with subgradient routed to (first) argmax."""
        out_data = self.data.max(axis=axis)
        mx = np.expand_dims(out_data, axis)
        mask = self.data == mx
        # route to a single winner per slot for a clean subgradient
        first = np.cumsum(mask, axis=axis) == 1
        mask = mask & first

        def back(g):
            return (np.expand_dims(g, axis) * mask,)

        return Tensor(out_data, parents=(self,), backward=back)

    # -- shape manipulation ---------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(self.data.reshape(shape), parents=(self,),
                      backward=lambda g: (g.reshape(self.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor(self.data.transpose(axes), parents=(self,),
                      backward=lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int):
        return Tensor(self.data.swapaxes(a, b), parents=(self,),
                      backward=lambda g: (g.swapaxes(a, b),))

    def __getitem__(self, key):
        def back(g):
            full = np.zeros(self.shape, dtype=g.dtype)
            np.add.at(full, key, g)
            return (full,)

        return Tensor(self.data[key], parents=(self,), backward=back)

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return (out_data * (g - dot),)

        return Tensor(out_data, parents=(self,), backward=back)


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(datas)))

    return Tensor(np.concatenate(datas, axis=axis), parents=tuple(tensors),
                  backward=back)


def stack(tensors, axis: int = 0) -> Tensor:
    def back(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis),
                  parents=tuple(tensors), backward=back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            train: bool) -> Tensor:
    """Inverted dropout: expectation-preserving scaling at train time."""
    if not train or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.uniform(size=x.shape) < keep).astype(x.dtype) / keep
    return x * Tensor(mask)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """2-D convolution, NCHW input, OIHW weight, stride 1, zero padding.

    Implemented as im2col matmul; backward scatters through col2im.
    """
    B, C, H, W = x.shape
    O, _, KH, KW = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    OH = H + 2 * padding - KH + 1
    OW = W + 2 * padding - KW + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(2, 3))
    cols = windows.reshape(B, C, OH, OW, KH * KW)
    cols = cols.transpose(0, 2, 3, 1, 4).reshape(B, OH * OW, C * KH * KW)
    wmat = weight.data.reshape(O, C * KH * KW)
    out_data = (cols @ wmat.T).reshape(B, OH, OW, O).transpose(0, 3, 1, 2)
    out_data = out_data + bias.data[None, :, None, None]

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B, OH * OW, O)
        gw = np.einsum("bno,bnk->ok", gmat, cols).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = gmat @ wmat  # B, OH*OW, C*KH*KW
        gcols = gcols.reshape(B, OH, OW, C, KH, KW)
        gx = np.zeros_like(xp)
        for i in range(KH):
            for j in range(KW):
                gx[:, :, i : i + OH, j : j + OW] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw, gb

    return Tensor(out_data, parents=(x, weight, bias), backward=back)


def avgpool2d(x: Tensor, pool_h: int, pool_w: int) -> Tensor:
    """Average pooling with truncation of incomplete trailing windows."""
    B, C, H, W = x.shape
    OH, OW = H // pool_h, W // pool_w
    if OH == 0 or OW == 0:
        raise ValueError(f"pool window ({pool_h},{pool_w}) larger than input ({H},{W})")
    trimmed = x[:, :, : OH * pool_h, : OW * pool_w]
    blocked = trimmed.reshape(B, C, OH, pool_h, OW, pool_w)
    return blocked.mean(axis=(3, 5))


def maxpool_time(x: Tensor, pool: int) -> Tensor:
    """Max pooling along axis 1 of a (B, T, C) sequence."""
    B, T, C = x.shape
    OT = T // pool
    if OT == 0:
        raise ValueError("sequence shorter than the pool size")
    trimmed = x[:, : OT * pool, :]
    blocked = trimmed.reshape(B, OT, pool, C)
    return blocked.max_axis(axis=2)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gamma + beta
