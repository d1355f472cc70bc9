"""Small dense tensor type with reverse-mode differentiation.

Every op that produces a :class:`Tensor` from inputs that require gradients
records a closure that maps the output gradient to input gradients.  Calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order, visiting each node once.

Broadcasting is limited to tensor-vs-Python-scalar and identical shapes.  Image
tensors are ``C x H x W`` or batched ``N x C x H x W``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # ------------------------------------------------------------------
    # basic properties

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph construction helpers

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every tensor reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        # iterative DFS: deep residual stacks overflow the recursion limit otherwise
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # intermediate grads are transient; only leaves keep them afterwards
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"{node._op}: backward produced {pg.shape} for input of shape {parent.data.shape}"
                    )
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _op=op)
    if req:
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ----------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data - float(b), (a,), lambda g: (g,), "sub_scalar")
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    b = as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def tabs(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------
# reductions and reshapes


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[b, index[b, ...]]`` for a 2-D ``table`` of shape (B, K)."""
    if table.ndim != 2 or index.shape[0] != table.shape[0]:
        raise ShapeError(f"take_rows: table {table.shape} incompatible with index {index.shape}")
    idx = index.reshape(index.shape[0], -1).astype(np.intp)
    rows = np.arange(table.shape[0])[:, None]
    out = table.data[rows, idx].reshape(index.shape)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, (np.broadcast_to(rows, idx.shape), idx), g.reshape(idx.shape))
        return (gt,)

    return _make(out, (table,), backward, "take_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# ----------------------------------------------------------------------
# image ops


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def conv2d_np(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """Same-padded stride-1 cross-correlation on batched arrays (no graph)."""
    out, _ = _conv_forward(x, w, b)
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: weight expects {wcin} input channels, input has {cin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    # (n, cin, h, w, k, k) -> rows ordered (n, h, w), columns (cin, ki, kj)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, cin * k * k)
    out = cols @ w.reshape(cout, -1).T
    if b is not None:
        out += b
    return out.reshape(n, h, wd, cout).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Zero-padded, stride-1 2-D cross-correlation with an odd square kernel."""
    xd, squeeze = _as_batch(x.data)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} output channels")
    out, cols = _conv_forward(xd, w.data, None if b is None else b.data)
    n, cin, h, wd = xd.shape
    cout, _, k, _ = w.shape
    p = k // 2
    wmat = w.data.reshape(cout, -1)

    def backward(g):
        gb = g[None] if squeeze else g
        g2 = gb.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gbias = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, h, wd, cin, k, k)
            gxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd]
            if squeeze:
                gx = gx[0]
        return (gx, gw, gbias) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out[0] if squeeze else out, parents, backward, "conv2d")


def pixel_shuffle_np(x: np.ndarray, r: int) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {r}^2")
    out = xb.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c // (r * r), h * r, w * r)
    return out[0] if squeeze else out


def pixel_unshuffle_np(x: np.ndarray, r: int) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    n, c, hr, wr = xb.shape
    h, w = hr // r, wr // r
    out = xb.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)
    return out[0] if squeeze else out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``C*r*r x H x W`` -> ``C x rH x rW``."""
    out = pixel_shuffle_np(x.data, r)
    return _make(out, (x,), lambda g: (pixel_unshuffle_np(g, r),), "pixel_shuffle")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Mean over non-overlapping ``k x k`` windows of the last two axes."""
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // k, k, w // k, k)
    out = blocks.mean(axis=(-3, -1))

    def backward(g):
        up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return (up / (k * k),)

    return _make(out, (x,), backward, "avg_pool2d")


# ----------------------------------------------------------------------
# user-defined backward


def custom_vjp(forward_fn: Callable[..., np.ndarray], backward_fn: Callable[..., Iterable], *inputs: Tensor) -> Tensor:
    """Apply ``forward_fn`` to the input arrays and differentiate with ``backward_fn``.

    ``backward_fn(grad_out, *input_arrays)`` returns one gradient per input (or
    a single array when there is one input).  Its result replaces whatever the
    true derivative of ``forward_fn`` would be.
    """
    arrays = [t.data for t in inputs]
    out = np.asarray(forward_fn(*arrays), dtype=DTYPE)

    def backward(g):
        grads = backward_fn(g, *arrays)
        if isinstance(grads, np.ndarray):
            grads = (grads,)
        grads = tuple(grads)
        if len(grads) != len(inputs):
            raise ShapeError(f"custom_vjp: backward returned {len(grads)} grads for {len(inputs)} inputs")
        for t, gi in zip(inputs, grads):
            if gi is not None and np.shape(gi) != t.shape:
                raise ShapeError(f"custom_vjp: backward grad shape {np.shape(gi)} != input shape {t.shape}")
        return tuple(None if gi is None else np.asarray(gi, dtype=DTYPE) for gi in grads)

    return _make(out, inputs, backward, "custom_vjp")


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)
