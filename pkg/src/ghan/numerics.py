"""Dense float64 tensors with a reverse-mode gradient tape, the handful of
primitives the hypergraph model needs, Adam(W), and a finite-difference oracle.

Usage::

    with Tape() as tape:
        y = leaky_relu(x @ w)
        loss = mean(y)
    gx, gw = tape.gradient(loss, [x, w])

Every primitive called while a tape is active appends one record to it;
``Tape.gradient`` replays the records in exact reverse order. Tensors are
immutable: their ``data`` array is read-only.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .rng import stream


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class Tensor:
    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tapes() -> list:
    tapes = getattr(_local, "tapes", None)
    if tapes is None:
        tapes = _local.tapes = []
    return tapes


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class Tape:
    """Ordered record of primitive calls made while the tape is active.

    One tape belongs to one thread; tapes on different threads are independent.
    """

    records: list = field(default_factory=list)
    visit_order: list = field(default_factory=list)

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().remove(self)
        return False

    def gradient(self, target: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """d(target)/d(source) for each source; target must hold a single value.

        Sources not reachable from ``target`` get a zero array of their shape.
        """
        if target.size != 1:
            raise ShapeError(f"gradient target must be a scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape)}
        self.visit_order = []
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            self.visit_order.append(rec.op)
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros(s.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape))
        return out


def _emit(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor(data)
    tapes = _active_tapes()
    if tapes:
        rec = _Record(op, out, inputs, backward)
        for tape in tapes:
            tape.records.append(rec)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D @ 2-D, 2-D @ 1-D and 1-D @ 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.ndim + b.ndim < 3:
        raise ShapeError(f"matmul: unsupported operand ranks, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return b.data @ g, np.outer(a.data, g)

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _emit("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return _emit("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no tensors given")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", data, tuple(ts), backward)


def gather_rows(x, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate their gradients."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    n = x.shape[0]
    return _emit(
        "gather_rows",
        x.data[idx],
        (x,),
        lambda g: (kernels.segment_sum(np.ascontiguousarray(g), idx, n),),
    )


embedding_lookup = gather_rows


def segment_sum(x, seg, n_seg: int) -> Tensor:
    """Sum rows of ``x`` into ``n_seg`` groups given by ``seg``."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: {seg.shape[0]} group ids for {x.shape[0]} rows")
    return _emit(
        "segment_sum",
        kernels.segment_sum(np.ascontiguousarray(x.data), seg, n_seg),
        (x,),
        lambda g: (g[seg],),
    )


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _emit("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# normalisation, loss, regularisation
# ---------------------------------------------------------------------------


def _softmax_lastaxis(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax: input must be a non-empty vector or matrix")
    p = _softmax_lastaxis(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), backward)


def segment_softmax(logits, seg, n_seg: int) -> Tensor:
    """Softmax of a 1-D logit vector within each group of ``seg``."""
    logits = as_tensor(logits)
    seg = np.asarray(seg, dtype=np.int64)
    if logits.ndim != 1 or seg.shape != logits.shape:
        raise ShapeError(f"segment_softmax: logits {logits.shape} vs group ids {seg.shape}")
    p = kernels.segment_softmax(logits.data, seg, n_seg)
    return _emit(
        "segment_softmax",
        p,
        (logits,),
        lambda g: (kernels.segment_softmax_backward(p, np.ascontiguousarray(g), seg, n_seg),),
    )


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (n x C) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: label outside class range")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    rows = np.arange(n)
    value = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _emit("cross_entropy", np.asarray(value), (logits,), backward)


def dropout(x, p: float, seed, training: bool = True) -> Tensor:
    """Inverted dropout. ``seed`` is an int or a tuple naming an rng stream."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    labels = seed if isinstance(seed, tuple) else (seed,)
    keep = stream(*labels).random(x.shape) >= p
    factor = keep / (1.0 - p)
    return _emit("dropout", x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update with decoupled weight decay.

    ``params`` maps names to arrays (or Tensors); a new dict of arrays is
    returned and ``state`` is advanced in place. Update per entry::

        theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    if set(grads) != set(params):
        raise KeyError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    new = {}
    for name, value in params.items():
        theta = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {name} {theta.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.weight_decay * theta
        new[name] = theta - state.lr * update
    return new


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    wrap = isinstance(x, Tensor)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(base) if wrap else base.copy())
        flat[i] = orig - h
        down = f(Tensor(base) if wrap else base.copy())
        flat[i] = orig
        grad.reshape(-1)[i] = (_scalar(up) - _scalar(down)) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)
