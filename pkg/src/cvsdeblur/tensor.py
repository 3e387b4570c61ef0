"""Small dense-tensor engine with reverse-mode differentiation.

Every op builds its result eagerly with numpy and, when any input is tracked,
records a closure mapping the upstream gradient to one gradient per parent.
``Tensor.backward`` walks the recorded graph in reverse topological order.
Layouts follow the usual image convention: ``[B, C, H, W]`` for feature maps
and ``[B, L, d]`` for token sequences.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    a = x.dtype.type(alpha)
    pos = x.data >= 0
    return _make(np.where(pos, x.data, a * x.data), (x,),
                 lambda g: (np.where(pos, g, a * g),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------- shape algebra

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ValueError("concat needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), back)


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` window of an NCHW tensor."""
    if x.shape[2] == h and x.shape[3] == w:
        return x

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :h, :w] = g
        return (full,)

    return _make(x.data[:, :, :h, :w].copy(), (x,), back)


def upsample_nearest(x: Tensor) -> Tensor:
    """Duplicate every pixel into a 2x2 block."""
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2))
    return _make(out.reshape(b, c, 2 * h, 2 * w), (x,),
                 lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy : dy + (ho - 1) * stride + 1 : stride,
                                    dx : dx + (wo - 1) * stride + 1 : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero 'same' padding ``k // 2``.

    Output extent is ``ceil(H / stride)``.  Supports ``k in {1, 3}`` and
    ``stride in {1, 2}``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects [B,C,H,W] input and [O,C,k,k] weight")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"unsupported kernel size {weight.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    b, c, h, w = x.shape
    if c != cin:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {cin}")
    pad = k // 2
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].reshape(b, cin, ho * wo)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, cout, ho, wo)

    def back(g):
        g2 = g.reshape(b, cout, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = g2[0] @ cols[0].T
            for bi in range(1, b):
                gw += g2[bi] @ cols[bi].T
            gw = gw.reshape(weight.shape)
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if k == 1:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gcols.reshape(b, cin, ho, wo)
            else:
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                gc = gcols.reshape(b, cin, k, k, ho, wo)
                for dy in range(k):
                    for dx in range(k):
                        gxp[:, :, dy : dy + (ho - 1) * stride + 1 : stride,
                            dx : dx + (wo - 1) * stride + 1 : stride] += gc[:, :, dy, dx]
                gx = gxp[:, :, pad : pad + h, pad : pad + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


# ---------------------------------------------------------------- attention

def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Row-wise softmax, computed in place on ``s``."""
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


_ATTN_CHUNK = 256


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v`` on [B, L, d].

    Rows are processed in cache-sized chunks and the probability matrix is
    recomputed during backward instead of stored.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("attention expects rank-3 [B, L, d] tensors")
    if q.shape[0] != k.shape[0] or k.shape[0] != v.shape[0]:
        raise ValueError("attention batch mismatch")
    if q.shape[2] != k.shape[2] or k.shape[1] != v.shape[1]:
        raise ValueError(f"attention dim mismatch: q{q.shape} k{k.shape} v{v.shape}")
    bsz, length = q.shape[:2]
    inv = q.dtype.type(1.0 / np.sqrt(q.shape[2]))
    qs = q.data * inv
    out = np.empty((bsz, length, v.shape[2]), dtype=np.result_type(q.data, v.data))
    for bi in range(bsz):
        kt = k.data[bi].T
        for s0 in range(0, length, _ATTN_CHUNK):
            rows = slice(s0, s0 + _ATTN_CHUNK)
            out[bi, rows] = softmax_rows(qs[bi, rows] @ kt) @ v.data[bi]

    def back(g):
        gq = np.empty_like(qs)
        gk = np.zeros(k.shape, dtype=gq.dtype)
        gv = np.zeros(v.shape, dtype=g.dtype)
        for bi in range(bsz):
            kt, vt = k.data[bi].T, v.data[bi].T
            for s0 in range(0, length, _ATTN_CHUNK):
                rows = slice(s0, s0 + _ATTN_CHUNK)
                p = softmax_rows(qs[bi, rows] @ kt)
                gv[bi] += p.T @ g[bi, rows]
                gp = g[bi, rows] @ vt
                gp -= np.einsum("ij,ij->i", gp, p)[:, None]
                gp *= p
                gq[bi, rows] = (gp @ k.data[bi]) * inv
                gk[bi] += gp.T @ qs[bi, rows]
        return gq, gk, gv

    return _make(out, (q, k, v), back)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
