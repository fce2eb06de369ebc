"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a
:class:`Tape` is active and one of its inputs tracks gradients, appends a
node holding a closure that maps the output gradient to input gradients.
``Tape.backward`` replays the nodes in reverse order, so each node is
visited exactly once.

Computation is 32-bit unless the inputs are 64-bit; gradient checks cast
models to ``float64``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 4
DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense array, optionally tracked for gradients.

    Parameters are leaf tensors created with ``requires_grad=True`` and a
    ``name``; the gradient map returned by :meth:`Tape.backward` is keyed by
    that name.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub" or arr.dtype == np.float16:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# -- tape ----------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of executed primitives.

    Use as a context manager around the forward pass, then call
    :meth:`backward` once on a scalar loss produced inside it.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss: Tensor) -> dict:
        if self.consumed:
            raise TapeError("backward already called on this tape; run a new forward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(node.output is loss for node in self.nodes):
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        touched = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            input_grads = node.backward(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                _check_finite(gi, node.op + ".backward")
                if gi.shape != inp.shape:
                    gi = _unbroadcast(gi, inp.shape)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    touched[key] = inp
        result = {}
        for key, g in grads.items():
            leaf = touched[key]
            leaf.grad = g.astype(leaf.dtype, copy=False)
            if leaf.name is not None:
                result[leaf.name] = leaf.grad
        return result


_TAPES: list = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def apply_op(op: str, inputs: Sequence[Tensor], out: np.ndarray,
             backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a forward result and record it on the active tape.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per input. Custom differentiable functions use this hook.
    """
    _check_finite(out, op)
    tracked = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    tape = active_tape()
    if tape is not None and tracked:
        tape.nodes.append(Node(op, tuple(inputs), result, backward))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and reductions -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return apply_op("add", (a, b), out, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return apply_op("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return apply_op("scale", (x,), x.data * c, lambda g: (g * c,))


def sum_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum_reduce", (x,), np.asarray(out), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_reduce(x, axis=axis), 1.0 / n)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype),
                    lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", (x,), s, backward)


# -- shape ops --------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"flatten: expected a batched tensor, got {x.shape}")
    return reshape(x, (x.shape[0], -1))


def patchify(x: Tensor, patch: int) -> Tensor:
    """Split ``N×C×H×W`` into ``N×P×(C·patch·patch)`` in row-major grid order."""
    if x.ndim != 4:
        raise ShapeError(f"patchify: expected N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: {h}×{w} grid is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    out = (x.data.reshape(n, c, gh, patch, gw, patch)
           .transpose(0, 2, 4, 1, 3, 5)
           .reshape(n, gh * gw, c * patch * patch))

    def backward(g):
        return (g.reshape(n, gh, gw, c, patch, patch)
                 .transpose(0, 3, 1, 4, 2, 5)
                 .reshape(n, c, h, w),)

    return apply_op("patchify", (x,), np.ascontiguousarray(out), backward)


# -- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return apply_op("matmul", (a, b), a.data @ b.data,
                    lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return apply_op("dense", inputs, out, backward)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(gwin: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window gradients back onto the input grid."""
    n, c, ho, wo, kh, kw = gwin.shape
    out = np.zeros(shape, dtype=gwin.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gwin[..., i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation; ``weight`` is (C_out, C_in, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    n, c, h, w = x.shape
    co, _, kh, kw = weight.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = _scatter_windows(gcols, xp.shape, stride)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return apply_op("conv2d", inputs, out, backward)


# -- pooling ------------------------------------------------------------------------

def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or k
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"max_pool2d: window {k} does not fit input {x.shape}")
    win = _windows(x.data, k, k, stride)
    flat = win.reshape(*win.shape[:4], k * k)
    idx = flat.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (_scatter_windows(gwin.reshape(win.shape), x.shape, stride),)

    return apply_op("max_pool2d", (x,), np.ascontiguousarray(out), backward)


def avg_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or k
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"avg_pool2d: window {k} does not fit input {x.shape}")
    win = _windows(x.data, k, k, stride)
    out = win.mean(axis=(-2, -1))
    inv = x.dtype.type(1.0 / (k * k))

    def backward(g):
        gwin = np.broadcast_to((g * inv)[..., None, None], win.shape)
        return (_scatter_windows(gwin, x.shape, stride),)

    return apply_op("avg_pool2d", (x,), np.ascontiguousarray(out).astype(x.dtype), backward)


def _adaptive_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over ``out_h × out_w`` bins with floor/ceil boundaries."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d: expected N×C×H×W, got {x.shape}")
    ph = _adaptive_matrix(x.shape[2], out_h, x.dtype)
    pw = _adaptive_matrix(x.shape[3], out_w, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", ph, x.data, pw, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", ph, g, pw, optimize=True),)

    return apply_op("adaptive_avg_pool2d", (x,), out, backward)


# -- losses ---------------------------------------------------------------------------

def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"cross_entropy: need N×C logits with C >= 2, got {logits.shape}")
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: label outside [0, {logits.shape[1]})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood (nats) of ``labels`` under softmax(logits)."""
    labels = _check_labels(logits.data, labels)
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return apply_op("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward)


def neg_log2_likelihood(logits, labels) -> np.ndarray:
    """Per-sample ``-log2 softmax(logits)[label]`` in bits (no tape)."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    logp = log_softmax_np(logits)
    return -logp[np.arange(len(labels)), labels] / math.log(2.0)
