"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive appends a record to the active :class:`Tape`
when at least one of its inputs requires a gradient.  Records are stored in
creation order, which is a valid topological order, so :func:`backward`
simply walks the tape from the loss back to the beginning.

Only the operations needed by small MLPs and prototype optimization are
provided.  There is no general broadcasting: the single exception is adding a
1-D bias to every row of a matrix.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError, OracleError

DEFAULT_EPS = 1e-12


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("values", "requires_grad", "grad", "_tape", "_index")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        other = _wrap(other)
        if other.values.size == 1 and self.values.size != 1:
            return scale(self, other)
        if self.values.size == 1 and other.values.size != 1:
            return scale(other, self)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name, out, inputs, vjp):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = model_loss(...)
            tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def clear(self) -> None:
        for rec in self.records:
            rec.out._tape = None
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        backward(loss)


_TAPE_STACK: list = [Tape()]
_RECORDING = [True]


def current_tape() -> Tape:
    return _TAPE_STACK[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording; results never require gradients."""
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


def _emit(name: str, values: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._tape = None
    out._index = -1
    out.requires_grad = _RECORDING[-1] and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = current_tape()
        out._tape = tape
        out._index = len(tape.records)
        tape.records.append(_Record(name, out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor) -> None:
    """Deposit d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls until ``zero_grad`` is called.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires a gradient")
    seed = np.ones_like(loss.values)
    if loss._tape is None:
        _accumulate(loss, seed)
        return
    tape = loss._tape
    pending = {id(loss): seed}
    for rec in reversed(tape.records[: loss._index + 1]):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                _accumulate(inp, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.values.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row added to each row of ``a``."""
    if a.shape == b.shape:
        return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        return _emit("add_bias", a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.values, (a,), lambda g: (-g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} are incompatible")
    return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single value held in ``s``."""
    if s.values.size != 1:
        raise DimensionError(f"scale: factor must hold one value, got shape {s.shape}")
    xv = x.values
    sv = float(s.values.reshape(()))

    def vjp(g):
        return g * sv, np.array(np.sum(g * xv)).reshape(s.shape)

    return _emit("scale", xv * sv, (x, s), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.values > 0
    return _emit("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    if np.any(xv <= 0):
        raise ContractError("log: input must be strictly positive")
    return _emit("log", np.log(xv), (x,), lambda g: (g / xv,))


def square(x: Tensor) -> Tensor:
    xv = x.values
    return _emit("square", xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit("sum", np.array(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.values.size
    return _emit("mean", np.array(x.values.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def l2_normalize_rows(x: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Scale each row of ``x`` to unit Euclidean norm.

    Raises DegenerateInputError when a row norm is at or below ``eps``: a
    vanishing embedding is treated as a collapse, never clamped.
    """
    if x.values.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected a matrix, got shape {x.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x.values, x.values))[:, None]
    if np.any(norms <= eps):
        bad = np.flatnonzero(norms[:, 0] <= eps).tolist()
        raise DegenerateInputError(f"rows {bad} have norm <= {eps}; embedding collapsed")
    y = x.values / norms

    def vjp(g):
        return ((g - y * np.einsum("ij,ij->i", y, g)[:, None]) / norms,)

    return _emit("l2_normalize_rows", y, (x,), vjp)


def _lse(v: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return out if axis is None else np.squeeze(out, axis=axis)


def log_sum_exp(v: Tensor) -> Tensor:
    """log(sum(exp(v))) of a 1-D tensor with the max-shift trick."""
    if v.values.ndim != 1 or v.values.size == 0:
        raise DimensionError(f"log_sum_exp: expected a non-empty vector, got shape {v.shape}")
    out = _lse(v.values).reshape(())
    p = np.exp(v.values - out)
    return _emit("log_sum_exp", out, (v,), lambda g: (g * p,))


def log_softmax_rows(v: Tensor) -> Tensor:
    """Row-wise ``v - LSE(v)``."""
    if v.values.ndim != 2 or v.shape[1] == 0:
        raise DimensionError(f"log_softmax_rows: expected a non-empty matrix, got shape {v.shape}")
    out = v.values - _lse(v.values, axis=1)[:, None]
    p = np.exp(out)
    return _emit("log_softmax_rows", out, (v,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def pick(x: Tensor, index) -> Tensor:
    """``out[i] = x[i, index[i]]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.values.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick: cannot index shape {x.shape} with {index.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _emit("pick", x.values[rows, index], (x,), vjp)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; rows not gathered receive zero gradient."""
    index = np.asarray(index, dtype=np.int64)
    if x.values.ndim != 2 or index.ndim != 1:
        raise DimensionError(f"take_rows: cannot index shape {x.shape} with {index.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("take_rows", x.values[index], (x,), vjp)


def sq_dists(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances, ``out[i, k] = |a_i - b_k|^2``."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"sq_dists: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ikm,ikm->ik", diff, diff)

    def vjp(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * av - g @ bv)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bv - g.T @ av)
        return ga, gb

    return _emit("sq_dists", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def _as_float(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                      skip: Callable[[Tensor, tuple], bool] | None = None) -> float:
    """Compare analytic gradients with central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over every entry
    of every parameter.  ``skip(param, index)`` may exclude entries, e.g.
    near the ReLU kink.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: step h must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        backward(loss)
        tape.clear()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        with no_grad():
            return _as_float(f())

    base = evaluate()
    if evaluate() != base:
        raise OracleError("finite_diff_check: f is not deterministic")

    worst = 0.0
    for p, grad in zip(params, analytic):
        p.values = np.ascontiguousarray(p.values)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            idx = np.unravel_index(i, p.shape)
            if skip is not None and skip(p, idx):
                continue
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for p in params:
        p.zero_grad()
    return worst
