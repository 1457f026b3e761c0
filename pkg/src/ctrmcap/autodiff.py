"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it in
execution order. :func:`gradient` replays the tape backwards and returns the
derivative of a scalar output with respect to every named trainable leaf.

Without an active tape the same functions simply compute values, which is
what decoding and evaluation use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """Immutable float64 array, optionally a named trainable leaf."""

    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s == 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


@dataclass
class Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations (a computation record).

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    entries: list[Entry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [e.op for e in self.entries]


_ACTIVE: list[Tape] = []

# Test hook: maps op name -> multiplier applied to that op's input gradients.
_GRAD_CORRUPTION: dict[str, float] = {}


def corrupt_gradient(op: str, factor: float = 1.5) -> None:
    """Deliberately scale the backward pass of ``op`` (negative-control hook)."""
    _GRAD_CORRUPTION[op] = factor


def clear_corruption() -> None:
    _GRAD_CORRUPTION.clear()


def _wrap(arr: np.ndarray) -> Tensor:
    # ops always produce fresh arrays, so no defensive copy is needed
    t = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    t.data = arr
    t.name = None
    t.requires_grad = False
    return t


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    result = _wrap(out)
    if _ACTIVE:
        _ACTIVE[-1].entries.append(Entry(op, inputs, result, backward))
    return result


def gradient(record: Tape, loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Return d(loss)/d(p) for every named trainable leaf reached by ``record``.

    If ``params`` is given the result has exactly its keys, with zeros for
    parameters that did not influence the loss.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"gradient needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(record.entries):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        in_grads = entry.backward(g)
        factor = _GRAD_CORRUPTION.get(entry.op)
        for inp, ig in zip(entry.inputs, in_grads):
            if ig is None:
                continue
            if factor is not None:
                ig = ig * factor
            key = id(inp)
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig
            if inp.requires_grad and inp.name is not None:
                leaves[key] = inp
    if params is not None:
        out = {}
        for name, p in params.items():
            g = grads.get(id(p))
            out[name] = np.zeros(p.shape) if g is None else np.array(g, dtype=np.float64)
        return out
    return {t.name: np.array(grads[k], dtype=np.float64) for k, t in leaves.items()}


# --------------------------------------------------------------------------
# primitives


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., d] + bias[d]; the only broadcasting the library allows."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_row: cannot add bias {bias.shape} to rows of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _emit("add_row", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=axes)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over a shared leading axis for 3-D."""
    ok = (a.ndim == b.ndim == 2 or (a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0]))
    if not ok or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", (a, b), ad @ bd, backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
    return _emit("transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def split_heads(x: Tensor, n_heads: int, batch: int = 1) -> Tensor:
    """[batch * T, d] -> [batch * n_heads, T, d / n_heads] (sample-major, then head)."""
    rows, d = x.shape
    if d % n_heads or rows % batch:
        raise ShapeError(f"split_heads: {x.shape} does not split into {batch} x {n_heads} heads")
    t, dh = rows // batch, d // n_heads
    out = x.data.reshape(batch, t, n_heads, dh).transpose(0, 2, 1, 3).reshape(batch * n_heads, t, dh)

    def backward(g):
        return (g.reshape(batch, n_heads, t, dh).transpose(0, 2, 1, 3).reshape(rows, d),)

    return _emit("split_heads", (x,), out, backward)


def merge_heads(x: Tensor, batch: int = 1) -> Tensor:
    """[batch * n_heads, T, dh] -> [batch * T, n_heads * dh]."""
    bh, t, dh = x.shape
    if bh % batch:
        raise ShapeError(f"merge_heads: {bh} head slices do not split into {batch} samples")
    h = bh // batch
    out = x.data.reshape(batch, h, t, dh).transpose(0, 2, 1, 3).reshape(batch * t, h * dh)

    def backward(g):
        return (g.reshape(batch, t, h, dh).transpose(0, 2, 1, 3).reshape(bh, t, dh),)

    return _emit("merge_heads", (x,), out, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (boolean, broadcastable to ``x``) marks allowed entries; masked
    entries get probability exactly zero. Every row must keep one entry.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("row_softmax: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("row_softmax", (x,), p, backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs rows of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    axes = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("layer_norm", (x, gain, bias), xhat * gd + bias.data, backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; the gradient scatter-adds back into it."""
    idx = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("embedding: ids must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"embedding: id out of range for table with {n} rows")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("embedding", (table,), table.data[idx], backward)


def take(x: Tensor, flat_index: Sequence[int]) -> Tensor:
    """Pick elements by row-major flat index into a 1-D tensor."""
    idx = np.asarray(flat_index, dtype=np.int64)
    size = x.data.size
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= size:
        raise IndexError(f"take: bad flat indices for tensor of {size} elements")
    shape = x.shape

    def backward(g):
        gx = np.zeros(size)
        np.add.at(gx, idx, g)
        return (gx.reshape(shape),)

    return _emit("take", (x,), x.data.reshape(-1)[idx], backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _emit("sum", (a,), out,
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero-norm row")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit("l2_normalize", (x,), y, backward)


PRIMITIVES = (
    "add", "sub", "mul", "scale", "add_row", "matmul", "transpose", "reshape",
    "split_heads", "merge_heads", "relu", "log", "row_softmax", "log_softmax",
    "layer_norm", "embedding", "take", "concat", "sum", "l2_normalize",
)


# --------------------------------------------------------------------------
# finite differences


def numeric_gradient(fn: Callable[[dict[str, Tensor]], Tensor], values: Mapping[str, np.ndarray],
                     h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``fn`` at ``values`` (one element at a time)."""
    base = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(_as_params(base)).item()
            flat[i] = orig - h
            fm = fn(_as_params(base)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def analytic_gradient(fn: Callable[[dict[str, Tensor]], Tensor],
                      values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    params = _as_params(values)
    with Tape() as tape:
        loss = fn(params)
    return gradient(tape, loss, params)


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    """max |a - n| / max(1, |n|) over every element."""
    worst = 0.0
    for k in numeric:
        err = np.abs(analytic[k] - numeric[k]) / np.maximum(1.0, np.abs(numeric[k]))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def _as_params(values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: parameter(np.array(v), k) for k, v in values.items()}


def param_dict(tensors: Iterable[Tensor]) -> dict[str, Tensor]:
    return {t.name: t for t in tensors}
