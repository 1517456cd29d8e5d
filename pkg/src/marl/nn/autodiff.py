"""Reverse-mode automatic differentiation over dense numpy arrays.

Each op builds a node in an implicit DAG; Tensor.backward walks the graph once
in reverse topological order and accumulates gradients into every tensor that
requires them. Ops never mutate their inputs, so repeated forward passes with
the same arrays give identical results.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, LabelError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self, upstream=None) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf."""
        if upstream is None:
            upstream = np.ones_like(self.data)
        else:
            upstream = np.asarray(upstream, dtype=self.data.dtype)
            if upstream.shape != self.data.shape:
                raise DimensionError(
                    f"upstream gradient shape {upstream.shape} != value shape {self.data.shape}"
                )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        _accumulate(self, upstream)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # Small operator sugar; losses compose from these plus the free functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.asarray(value), requires_grad=True)
        self.name = name

    @property
    def value(self):
        return self.data

    @value.setter
    def value(self, arr):
        self.data = np.asarray(arr)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * mask)

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # numerically stable split on the sign of x
    pos = x >= 0
    z = np.where(pos, -x, x)
    ez = np.exp(z)
    s = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(x.dtype)

    def backward(g):
        _accumulate(a, g * s * (1.0 - s))

    return _node(s, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _node(data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum()

    def backward(g):
        _accumulate(a, np.full(a.shape, g, dtype=a.data.dtype))

    return _node(data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.size)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes {a.shape} vs {b.shape}")
    d = sub(a, b)
    return mean_all(mul(d, d))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D table; gradients scatter-add back."""
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows expects 2-D table, got {table.shape}")
    idx = np.asarray(indices)
    data = table.data[idx]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accumulate(table, buf)

    return _node(data, (table,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"label outside [0, {c}): {labels.min()}..{labels.max()}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    data = np.asarray(nll.mean(), dtype=x.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, (float(g) / n) * p.astype(x.dtype))

    return _node(data, (logits,), backward)


# ---------------------------------------------------------------------------
# spatial ops


def _im2col(xp: np.ndarray, k: int, stride: int):
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _conv2d_input_grad(g, w, x_shape, stride, padding):
    n, cout, ho, wo = g.shape
    _, cin, h, wdt = x_shape
    k = w.shape[2]
    if stride > 1:
        gd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    rh = (h + 2 * padding - k) % stride
    rw = (wdt + 2 * padding - k) % stride
    pl = k - 1 - padding
    gp = np.pad(gd, ((0, 0), (0, 0), (pl, pl + rh), (pl, pl + rw)))
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (cin, cout, k, k)
    cols, oh, ow = _im2col(gp, k, 1)
    dx = cols @ wf.reshape(cin, -1).T
    return dx.reshape(n, oh, ow, cin).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0, name: str = "conv") -> Tensor:
    """2-D cross-correlation, NCHW layout, square kernel."""
    if x.data.ndim != 4:
        raise DimensionError(f"{name}: input must be NCHW, got shape {x.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"{name}: kernel must be square, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise DimensionError(f"{name}: expected {cin} input channels, got {x.shape[1]}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kh:
        raise DimensionError(f"{name}: input {x.shape[2]}x{x.shape[3]} smaller than kernel {kh}")
    n = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, stride)
    out = cols @ w.data.reshape(cout, -1).T
    out += b.data
    data = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gr = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if b.requires_grad:
            _accumulate(b, gr.sum(axis=0))
        if w.requires_grad:
            _accumulate(w, (gr.T @ cols).reshape(w.shape))
        if x.requires_grad:
            _accumulate(x, _conv2d_input_grad(g, w.data, x.shape, stride, padding))

    return _node(data, (x, w, b), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling, NCHW."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample2x: input must be NCHW, got shape {x.shape}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(data, (x,), backward)
