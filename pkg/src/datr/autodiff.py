"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Define-by-run: primitives executed under an active ``Tape`` append nodes to
an append-only record, and ``Tape.backward`` replays that record once, in
reverse, accumulating gradients into every ``requires_grad`` tensor it
reaches. The primitive set is exactly what the retrieval model's forward
graph needs; there is no broadcasting cleverness beyond numpy's, no views,
and no higher-order differentiation.

Precision: tensors default to float64. Finite-difference gradient checks are
unreliable in float32, so the test/training profile stays at 64-bit; float32
is accepted for throughput-oriented inference and preserved when the input
array already carries it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_PRESERVED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NumericError(ValueError):
    """Non-finite values where finite scalars are required."""


class GraphError(RuntimeError):
    """Tape or graph misuse (non-scalar loss, missing recording, ...)."""


class Tensor:
    """Dense row-major tensor with an optional gradient slot.

    ``data`` is always a contiguous float32/float64 ndarray. ``grad`` is
    populated by ``Tape.backward`` and has the same shape as ``data``;
    repeated backward calls accumulate into it until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, check: bool = True):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in _PRESERVED_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if check and not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar over the module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), check=False)


def _result(data: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    return out


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


def _record(out: Tensor, parents: tuple, backward: Callable) -> None:
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1].nodes.append(_Node(out, parents, backward))


class Tape:
    """Append-only record of primitive ops, replayed in reverse by backward.

    Usage::

        with Tape() as tape:
            loss = ...   # forward graph built here
        tape.backward(loss)

    Topological order holds by construction: a node's parents were recorded
    (or are leaves) before the node itself. ``backward`` visits each node
    exactly once, newest first. Calling ``backward`` again without clearing
    gradients accumulates into ``.grad`` a second time.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        if loss.shape != ():
            raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data):
            raise NumericError("backward on non-finite loss")
        # Pending upstream gradients keyed by tensor identity. Node outputs
        # are unique per recording, so pop-on-visit is safe.
        pending: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones((), dtype=loss.dtype))
        }
        for node in reversed(self.nodes):
            entry = pending.pop(id(node.out), None)
            if entry is None:
                continue
            out_t, g = entry
            if out_t.requires_grad:
                out_t.grad = g if out_t.grad is None else out_t.grad + g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    held, acc = pending[key]
                    pending[key] = (held, acc + pg)
                else:
                    pending[key] = (parent, pg)
        # Whatever is left never appeared as a node output: these are leaves.
        for tensor, g in pending.values():
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back onto the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: [m,k]@[k,n] -> [m,n], [k]@[k,n] -> [n], [m,k]@[k] -> [m]."""
    ad, bd = a.data, b.data
    if not ((ad.ndim == 2 and bd.ndim in (1, 2)) or (ad.ndim == 1 and bd.ndim == 2)):
        raise ShapeError(f"matmul supports 2-D@2-D, 1-D@2-D and 2-D@1-D, "
                         f"got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    out = _result(ad @ bd, a.requires_grad or b.requires_grad)

    def backward(g):
        if not a.requires_grad:
            ga = None
        elif bd.ndim == 2:
            ga = g @ bd.T
        else:
            ga = np.outer(g, bd)
        if not b.requires_grad:
            gb = None
        elif ad.ndim == 2 and bd.ndim == 2:
            gb = ad.T @ g
        elif ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.T @ g
        return ga, gb

    _record(out, (a, b), backward)
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors -> scalar."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects matching 1-D tensors, got {a.shape} and {b.shape}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    _record(out, (a, b), backward)
    return out


def _elementwise(a: Tensor, b: Tensor, fwd, bwd_a, bwd_b) -> Tensor:
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"operands not broadcastable: {a.shape} vs {b.shape}") from exc
    out = _result(data, a.requires_grad or b.requires_grad)

    def backward(g):
        ga = _unbroadcast(bwd_a(g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(bwd_b(g), b.shape) if b.requires_grad else None
        return ga, gb

    _record(out, (a, b), backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.multiply,
                        lambda g: g * b.data,
                        lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.divide,
                        lambda g: g / b.data,
                        lambda g: -g * a.data / (b.data * b.data))


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors (avoids a long chain of binary adds)."""
    if not parts:
        raise ShapeError("add_n needs at least one tensor")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError(f"add_n shape mismatch: {p.shape} vs {shape}")
    data = parts[0].data.copy()
    for p in parts[1:]:
        data += p.data
    out = _result(data, any(p.requires_grad for p in parts))

    def backward(g):
        return tuple(g if p.requires_grad else None for p in parts)

    _record(out, tuple(parts), backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), x.requires_grad)

    def backward(g):
        return ((x.data > 0) * g,)

    _record(out, (x,), backward)
    return out


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    out = _result(data, x.requires_grad)

    def backward(g):
        return (g * data,)

    _record(out, (x,), backward)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes through the interior (inclusive)."""
    data = np.clip(x.data, lo, hi)
    out = _result(data, x.requires_grad)

    def backward(g):
        mask = (x.data >= lo) & (x.data <= hi)
        return (g * mask,)

    _record(out, (x,), backward)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, computed with row-max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows on NaN input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, x.requires_grad)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner),)

    _record(out, (x,), backward)
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax; stable companion primitive for likelihood losses."""
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a 2-D tensor, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("log_softmax_rows on NaN input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)
    out = _result(y, x.requires_grad)

    def backward(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    _record(out, (x,), backward)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.shape}")
    out = _result(np.ascontiguousarray(x.data.T), x.requires_grad)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    _record(out, (x,), backward)
    return out


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D or 2-D tensors along their last axis."""
    if not parts:
        raise ShapeError("concat_last_dim needs at least one tensor")
    ndim = parts[0].ndim
    for p in parts:
        if p.ndim != ndim or p.shape[:-1] != parts[0].shape[:-1]:
            raise ShapeError(
                f"concat_last_dim shape mismatch: {[tuple(q.shape) for q in parts]}")
    data = np.concatenate([p.data for p in parts], axis=-1)
    out = _result(data, any(p.requires_grad for p in parts))
    widths = [p.shape[-1] for p in parts]

    def backward(g):
        grads = []
        start = 0
        for p, w in zip(parts, widths):
            grads.append(g[..., start:start + w] if p.requires_grad else None)
            start += w
        return tuple(grads)

    _record(out, tuple(parts), backward)
    return out


def slice_last_dim(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {x.shape}")
    out = _result(np.ascontiguousarray(x.data[..., start:stop]), x.requires_grad)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    _record(out, (x,), backward)
    return out


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D [len(parts), d] tensor."""
    if not parts:
        raise ShapeError("stack_rows needs at least one tensor")
    for p in parts:
        if p.ndim != 1 or p.shape != parts[0].shape:
            raise ShapeError(f"stack_rows expects equal-length 1-D tensors, got {p.shape}")
    data = np.stack([p.data for p in parts], axis=0)
    out = _result(data, any(p.requires_grad for p in parts))

    def backward(g):
        return tuple(g[i] if p.requires_grad else None for i, p in enumerate(parts))

    _record(out, tuple(parts), backward)
    return out


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    """Mean of a 2-D tensor over one axis -> 1-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"mean_over_axis expects a 2-D tensor, got shape {x.shape}")
    if axis not in (0, 1):
        raise ShapeError(f"axis must be 0 or 1, got {axis}")
    n = x.shape[axis]
    out = _result(x.data.mean(axis=axis), x.requires_grad)

    def backward(g):
        if axis == 0:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        return (np.broadcast_to((g / n)[:, None], x.shape).copy(),)

    _record(out, (x,), backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum()), x.requires_grad)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    _record(out, (x,), backward)
    return out


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    if size == 0:
        raise ShapeError("mean_all of an empty tensor")
    out = _result(np.asarray(x.data.mean()), x.requires_grad)

    def backward(g):
        return (np.broadcast_to(g / size, x.shape).copy(),)

    _record(out, (x,), backward)
    return out


def diag_part(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diag_part expects a square 2-D tensor, got shape {x.shape}")
    out = _result(np.ascontiguousarray(np.diagonal(x.data)), x.requires_grad)

    def backward(g):
        return (np.diagflat(g),)

    _record(out, (x,), backward)
    return out


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup expects a 2-D table, got shape {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("embedding_lookup expects a non-empty 1-D id sequence")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError(
            f"ids out of range [0, {table.shape[0]}) : min={idx.min()}, max={idx.max()}")
    out = _result(table.data[idx].copy(), table.requires_grad)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    _record(out, (table,), backward)
    return out


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization of a 2-D tensor with learned gain/bias."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm_rows shapes: x={x.shape}, gain={gain.shape}, bias={bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _result(xhat * gain.data + bias.data, any(
        t.requires_grad for t in (x, gain, bias)))

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv * (gxhat
                        - gxhat.mean(axis=1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        ggain = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gbias = g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    _record(out, (x, gain, bias), backward)
    return out


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a 1-D tensor to unit Euclidean norm; zero norm is an error."""
    if x.ndim != 1:
        raise ShapeError(f"l2_normalize expects a 1-D tensor, got shape {x.shape}")
    norm = float(np.linalg.norm(x.data))
    if not math.isfinite(norm) or norm < 1e-12:
        raise NumericError(f"cannot normalize a vector of norm {norm!r}")
    y = x.data / norm
    out = _result(y, x.requires_grad)

    def backward(g):
        return ((g - y * (y @ g)) / norm,)

    _record(out, (x,), backward)
    return out


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Temporal convolution: x [T, c_in], kernels [k, c_in, c_out] -> [T', c_out].

    T' = floor((T + 2*pad - k) / stride) + 1 with explicit zero padding.
    """
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d shapes: x={x.shape}, kernels={kernels.shape}")
    t_in, c_in = x.shape
    k, kc_in, _ = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {c_in}, kernel {kc_in}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv1d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    t_out = (t_in + 2 * pad - k) // stride + 1
    if t_out < 1:
        raise ShapeError(
            f"conv1d degenerate output length {t_out} (T={t_in}, k={k}, "
            f"stride={stride}, pad={pad})")
    padded = np.zeros((t_in + 2 * pad, c_in), dtype=x.dtype)
    padded[pad:pad + t_in] = x.data
    kd = kernels.data
    data = np.zeros((t_out, kd.shape[2]), dtype=x.dtype)
    for i in range(k):
        seg = padded[i:i + stride * (t_out - 1) + 1:stride]
        data += seg @ kd[i]
    out = _result(data, x.requires_grad or kernels.requires_grad)

    def backward(g):
        gx = gk = None
        if kernels.requires_grad:
            gk = np.zeros_like(kd)
        if x.requires_grad:
            gpad = np.zeros_like(padded)
        for i in range(k):
            sl = slice(i, i + stride * (t_out - 1) + 1, stride)
            if kernels.requires_grad:
                gk[i] = padded[sl].T @ g
            if x.requires_grad:
                gpad[sl] += g @ kd[i].T
        if x.requires_grad:
            gx = gpad[pad:pad + t_in]
        return gx, gk

    _record(out, (x, kernels), backward)
    return out
