"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` and, when any input
requires a gradient, appends one node to the active :class:`Tape`.  Append
order is a topological order, so :func:`backward` simply walks the tape in
reverse.  A tape may be consumed exactly once.

Arrays are numpy ``float64`` throughout.  Ops broadcast like numpy; the
backward rules sum gradients back down to each input's shape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "AdamState", "ShapeError", "TapeStateError", "NumericError",
    "tensor", "constant", "add", "sub", "mul", "scale", "matmul", "relu",
    "row_softmax", "layer_norm", "embedding_lookup", "concat", "concat_last",
    "reshape", "transpose", "sum_all", "mean_all", "sum_axis", "cross_entropy",
    "backward", "no_grad", "reset_tape", "current_tape", "set_debug",
    "adam_step", "warmup_lr",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """Backward was requested on a tape that was already consumed."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where only finite values are allowed."""


_state = threading.local()


def _local():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.debug = False
    return _state


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf (slow; meant for tests)."""
    _local().debug = bool(flag)


class Tape:
    """Append-only record of the differentiable ops of one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape:
    return _local().tape


def reset_tape() -> Tape:
    """Discard the active tape and start a fresh one."""
    loc = _local()
    loc.tape = Tape()
    return loc.tape


@contextlib.contextmanager
def no_grad():
    """Run ops without recording anything on the tape."""
    loc = _local()
    prev = loc.grad_enabled
    loc.grad_enabled = False
    try:
        yield
    finally:
        loc.grad_enabled = prev


class Tensor:
    """A float64 array, optionally participating in differentiation.

    ``grad`` reads as a zero buffer of the same shape until backward has
    deposited something; it is ``None`` for tensors that do not require a
    gradient.
    """

    __slots__ = ("values", "requires_grad", "_grad", "_tape", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = requires_grad
        t._grad = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def constant(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor._wrap(np.asarray(values, dtype=np.float64))


def _record(out_values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    loc = _local()
    if loc.debug and not np.all(np.isfinite(out_values)):
        raise NumericError("op produced a non-finite value")
    needs = loc.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_values, needs)
    if needs:
        tape = loc.tape
        if tape.consumed:
            tape = reset_tape()
        tape.nodes.append((out, tuple(inputs), backward_fn))
        out._tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.values + b.values, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.values - b.values, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(a.values * b.values, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.values * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    on = x.values > 0
    return _record(np.where(on, x.values, 0.0), (x,), lambda g: (g * on,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules (both operands at least 2-D)."""
    a, b = constant(a), constant(b)
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.values, b.values)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), back)


# ---------------------------------------------------------------- normalisers

def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean array, True = keep) removes entries from
    the normalisation; masked entries come out as exact zeros.  Every row must
    keep at least one entry.
    """
    v = x.values
    if v.ndim == 0 or v.shape[-1] < 1:
        raise ShapeError(f"row_softmax needs a nonempty last axis, got {x.shape}")
    if mask is None:
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("row_softmax: a row has every entry masked")
        shifted = np.where(mask, v, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.values
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record(out, (x, gain, bias), back)


# ---------------------------------------------------------------- indexing / shape

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; output shape is ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if ids.size:
        bad = (ids < 0) | (ids >= n_rows)
        if bad.any():
            raise IndexError(f"embedding id {int(ids[bad].flat[0])} outside [0, {n_rows})")
    out = table.values[ids]

    def back(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _record(out, (table,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: leading dims differ, {ref} vs {t.shape}")
    out = np.concatenate([t.values for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record(out, tensors, back)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record(x.values.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _record(np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean_all(x: Tensor) -> Tensor:
    src, n = x.shape, x.values.size
    return _record(np.asarray(x.values.mean()), (x,),
                   lambda g: (np.broadcast_to(g / n, src).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    src = x.shape
    ax = axis % len(src)
    return _record(x.values.sum(axis=ax), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),))


# ---------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax(logits)."""
    if logits.values.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    b, v = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} for {b} rows")
    bad = (targets < 0) | (targets >= v)
    if bad.any():
        raise IndexError(f"target {int(targets[bad][0])} outside [0, {v})")
    z = logits.values
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, targets])

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / b),)

    return _record(np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeStateError("loss was not produced by a recorded forward pass")
    if tape.consumed:
        raise TapeStateError("tape already consumed by an earlier backward()")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out._grad = g
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._tape is tape:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                # leaf (parameter): accumulate across backward calls
                inp._grad = gi.copy() if inp._grad is None else inp._grad + gi
    tape.nodes = []
    if _local().tape is tape:
        reset_tape()


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, written into ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def warmup_lr(step: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear ramp to ``peak_lr`` over ``warmup_steps``, flat afterwards."""
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
    if step < 1:
        raise ValueError(f"step counts from 1, got {step}")
    return peak_lr * min(1.0, step / warmup_steps)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.values)) for p in params)
