"""Dense tensors with define-by-run reverse-mode differentiation.

Every op records its inputs and a closure mapping the upstream gradient to
per-input gradients. Calling :func:`backprop` on a scalar walks the recorded
graph in reverse topological order.

Ops accept either a single example (``C x H x W`` images, ``n`` vectors) or a
leading batch axis, which the training loops and batched attacks rely on.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf in a forward or backward pass."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """An n-dimensional float array that may carry a gradient.

    ``data`` is a numpy array: float32, unless a float64 ndarray is passed in
    (the gradient checks rely on that). Leaves created with ``requires_grad=True``
    receive ``grad`` after :func:`backprop`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            arr = arr.astype(DTYPE, copy=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        backprop(self, grad=grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or DTYPE))


def _make(out: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out, dtype=out.dtype)
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)
    return _make(out, (a,), lambda g: (g * g.dtype.type(factor),), "scale")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return _make(out, (a,), lambda g: (2 * g * a.data,), "square")


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=a.data.dtype))
    return _make(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu_apply(a: Tensor) -> Tensor:
    positive = a.data > 0
    out = np.where(positive, a.data, a.data.dtype.type(0))
    return _make(out, (a,), lambda g: (g * positive,), "relu")


def sigmoid_apply(a: Tensor) -> Tensor:
    # 0.5 * (1 + tanh(v / 2)) never overflows, unlike 1 / (1 + exp(-v))
    half = a.data.dtype.type(0.5)
    s = half * (1 + np.tanh(half * a.data))
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh_apply(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; the gradient is 0 where a <= floor."""
    above = a.data > floor
    out = np.where(above, a.data, a.data.dtype.type(floor))
    return _make(out, (a,), lambda g: (g * above,), "clamp_min")


# ---------------------------------------------------------------------------
# layers


def affine_apply(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``out[..., j] = sum_i W[j, i] * x[..., i] + b[j]`` for 1-D or batched x."""
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise ShapeError(f"bad affine parameters {weights.shape}, {bias.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"affine input {x.shape} does not match weights {weights.shape}")
    out = x.data @ weights.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = g @ weights.data if x.requires_grad else None
        dw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weights.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return _make(out, (x, weights, bias), backward, "affine")


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    return ho, wo


def conv2d_apply(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
                 padding: int = 0) -> Tensor:
    """Cross-correlation of ``C x H x W`` (or ``N x C x H x W``) input.

    im2col with columns laid out channel-major (``C*kh*kw`` rows by
    ``N*H'*W'`` columns), then one matrix product.
    """
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be positive and padding non-negative")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv input must be 3-D or 4-D, got {x.shape}")
    k, c, kh, kw = kernels.shape
    n, cin, h, w = xd.shape
    if cin != c or bias.shape != (k,):
        raise ShapeError(f"conv input {x.shape} incompatible with kernels {kernels.shape}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, :hspan:stride, :wspan:stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    kmat = kernels.data.reshape(k, -1)
    out = (kmat @ cols).reshape(k, n, ho, wo) + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(k, n * ho * wo)
        dk = (gmat @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        db = gmat.sum(axis=1) if bias.requires_grad else None
        if not x.requires_grad:
            return None, dk, db
        # offsets outermost so each col2im slab is contiguous
        kmat_t = kernels.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, k)
        dcols = (kmat_t @ gmat).reshape(kh, kw, c, n, ho, wo)
        dxp = np.zeros((c, n) + xp.shape[2:], dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        if single:
            dx = dx[0]
        return dx, dk, db

    return _make(out, (x, kernels, bias), backward, "conv2d")


def maxpool_apply(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window x window`` patches. Ties resolve to the lowest flat index."""
    stride = window if stride is None else stride
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or window < 1 or stride < 1:
        raise ShapeError(f"invalid maxpool geometry for input {x.shape}")
    n, c, h, w = xd.shape
    if h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise ShapeError(f"window {window}/stride {stride} leaves partial windows on {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def at(arr, idx):
        i, j = divmod(idx, window)
        return arr[:, :, i : i + hspan : stride, j : j + wspan : stride]

    # strict ">" keeps the earliest (lowest flat index) maximum on ties
    out = at(xd, 0).copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    for idx in range(1, window * window):
        cand = at(xd, idx)
        better = cand > out
        np.copyto(out, cand, where=better)
        arg[better] = idx
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        dx = np.zeros(xd.shape, dtype=xd.dtype)
        for idx in range(window * window):
            view = at(dx, idx)
            view += g4 * (arg == idx)
        return (dx[0] if single else dx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool")


# ---------------------------------------------------------------------------
# losses


def _labels_for(logits: Tensor, labels) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    classes = logits.shape[-1]
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= classes:
        raise ValueError(f"label out of range for {classes} classes: {labels}")
    return lab


def softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[label]`` with max-subtraction.

    ``logits`` is ``l`` (one label) or ``N x l`` (N labels); batched losses are
    averaged (``reduction="mean"``) or summed (``"sum"``).
    """
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    lab = _labels_for(logits, labels)
    if lab.shape[0] != z.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {z.shape[0]} rows of logits")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    per_row = logsumexp - shifted[np.arange(len(lab)), lab]
    denom = len(lab) if reduction == "mean" else 1
    out = np.asarray(per_row.sum() / denom, dtype=z.dtype)

    def backward(g):
        p = softmax(z)
        p[np.arange(len(lab)), lab] -= 1
        p *= g / denom
        return (p[0] if single else p,)

    return _make(out, (logits,), backward, "softmax_xent")


def logit_margin(logits: Tensor, labels) -> Tensor:
    """``Z[y] - max_{j != y} Z[j]`` per row; the runner-up tie goes to the lowest index."""
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    lab = _labels_for(logits, labels)
    rows = np.arange(z.shape[0])
    others = z.copy()
    others[rows, lab] = -np.inf
    runner = others.argmax(axis=1)
    out = z[rows, lab] - z[rows, runner]
    if single:
        out = out[0]

    def backward(g):
        g1 = np.atleast_1d(g)
        dz = np.zeros_like(z)
        dz[rows, lab] += g1
        dz[rows, runner] -= g1
        return (dz[0] if single else dz,)

    return _make(np.asarray(out), (logits,), backward, "logit_margin")


# ---------------------------------------------------------------------------
# graph traversal


class ComputeGraph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backprop(loss: Tensor, wrt: Iterable[Tensor] | None = None, grad=None) -> list[np.ndarray]:
    """Accumulate gradients of ``loss`` into every reachable leaf.

    ``grad`` seeds the upstream gradient; it defaults to 1 and is required to
    be given explicitly for non-scalar outputs. Leaves with
    ``requires_grad=True`` get their ``.grad`` set (zeros if unreachable).
    Returns the gradients of ``wrt`` in order, when given.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backprop needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.data.dtype)
    grad = np.asarray(grad, dtype=loss.data.dtype)
    wrt = list(wrt) if wrt is not None else []

    graph = ComputeGraph(loss)
    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node.op}")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    for node in graph.nodes:
        if node.requires_grad and node._backward is None:
            node.grad = grads.get(id(node), np.zeros_like(node.data))
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g))
        if t.requires_grad and t._backward is None:
            t.grad = out[-1]
    return out
