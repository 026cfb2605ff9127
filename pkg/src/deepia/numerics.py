"""Dense float64 tensors with a reverse-mode gradient tape, plus Adam.

Operations record themselves on the active :class:`Tape` whenever at least
one input requires a gradient.  Outside a tape (or with only constant
inputs) they are plain numpy evaluations, which is what inference uses.

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "deepia_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended as operations execute, so the list is already in
    topological order and backward is a single reverse sweep.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, op, inputs, output, backward) -> None:
        output.node_id = len(self.entries)
        output.requires_grad = True
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        for entry in self.entries:
            entry.output.grad = None
        loss.grad = np.array(seed, dtype=np.float64)
        for entry in reversed(self.entries):
            g = entry.output.grad
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{entry.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi

    def __len__(self) -> int:
        return len(self.entries)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, tuple(inputs), out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0.  NaN propagates."""
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.maximum(a.data, 0.0), lambda g: (g * mask,))


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or rate == 0."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))


# linear algebra and shape ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """np.matmul semantics (batched, broadcasting leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul cannot broadcast {a.shape} x {b.shape}") from exc

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = np.matmul(g[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = ad[:, None] * g[..., None, :]
        elif bd.ndim == 1:
            ga = g[..., :, None] * bd
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., :, None])[..., 0]
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, backward)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand contraction, e.g. ``"bnd,hed->bhne"``.

    Unlike BLAS-backed matmul, numpy's einsum loop gives each output element
    a result that does not depend on where its row sits in the batch, which
    the attention code relies on for exact permutation invariance.  Every
    index of an operand must appear in the output or the other operand, and
    no index may repeat within one operand.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        ins, out_spec = spec.replace(" ", "").split("->")
        sa, sb = ins.split(",")
    except ValueError:
        raise ShapeError(f"einsum spec {spec!r} must look like 'ab,bc->ac'") from None
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or not set(s) <= set(out_spec) | set(other):
            raise ShapeError(f"unsupported einsum spec {spec!r}")
    try:
        out = np.einsum(f"{sa},{sb}->{out_spec}", a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r} cannot combine {a.shape} and {b.shape}") from exc

    def backward(g):
        return (np.einsum(f"{out_spec},{sb}->{sa}", g, b.data),
                np.einsum(f"{out_spec},{sa}->{sb}", g, a.data))

    return _emit("einsum", (a, b), out, backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _emit("stack", ts, out,
                 lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


def take(a, index) -> Tensor:
    """Gather rows: ``out[i...] = a[index[i...]]`` along axis 0."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (ga,)

    return _emit("take", (a,), a.data[idx], backward)


# reductions ------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, backward)


def ordered_sum(a, axis: int) -> Tensor:
    """Sum along one axis that does not depend on the order of the terms.

    Terms are sorted before adding, so any permutation of the inputs along
    ``axis`` gives a bit-identical result.  The gradient is that of a sum.
    """
    a = as_tensor(a)
    out = np.sort(a.data, axis=axis).sum(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("ordered_sum", (a,), out, backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis: int = -1, mask=None, order_free: bool = False) -> Tensor:
    """Normalized exponential along ``axis`` with max subtraction.

    ``mask`` (broadcastable boolean) marks valid entries; masked entries get
    weight exactly 0.  Every slice must keep at least one valid entry.
    ``order_free`` sorts before summing the normalizer (see ordered_sum).
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax mask leaves an empty slice")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True) if order_free else e.sum(axis=axis, keepdims=True)
    out = e / denom

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, backward)


def group_log_softmax(x, groups) -> Tensor:
    """Log-softmax over the last axis, normalized separately within each group.

    ``groups[k]`` is the group id of column k.  Columns sharing an id form one
    normalization set (a sibling group in the taxonomy).
    """
    x = as_tensor(x)
    groups = np.asarray(groups, dtype=np.int64)
    if groups.shape != (x.shape[-1],):
        raise ShapeError(f"groups length {groups.shape} does not match last axis of {x.shape}")
    ng = int(groups.max()) + 1 if groups.size else 0
    flat = x.data.reshape(-1, x.shape[-1])
    gmax = np.full((flat.shape[0], ng), -np.inf)
    np.maximum.at(gmax.T, groups, flat.T)
    z = flat - gmax[:, groups]
    gsum = np.zeros((flat.shape[0], ng))
    np.add.at(gsum.T, groups, np.exp(z).T)
    out = (z - np.log(gsum)[:, groups]).reshape(x.shape)

    def backward(g):
        gf = g.reshape(flat.shape)
        tot = np.zeros((flat.shape[0], ng))
        np.add.at(tot.T, groups, gf.T)
        return ((gf - np.exp(out.reshape(flat.shape)) * tot[:, groups]).reshape(x.shape),)

    return _emit("group_log_softmax", (x,), out, backward)


# initialization & optimization --------------------------------------------

def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    """Parameter drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    A ``None`` gradient is treated as zero.  Moment buffers are created on the
    first call and must keep matching shapes afterwards.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("Adam state tracks a different number of parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
