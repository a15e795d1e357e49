"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a tape every operation is a
plain numpy computation, which is what inference and finite differencing use.

    >>> w = Parameter([1.0, 2.0])
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> backward(loss, tape)
    >>> w.grad
    array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


class Tensor:
    """Immutable dense array node."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, idx) -> "Tensor":
        return index(self, idx)

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient."""

    __slots__ = ("grad", "frozen", "name")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.frozen = frozen
        self.name = name

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


class Tape:
    """Ordered log of the differentiable operations of one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


class no_grad:
    """Suspend recording: operations inside compute values only."""

    def __enter__(self) -> "no_grad":
        _stack().append(None)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


class Module:
    """Container whose Parameter attributes are discovered in assignment order."""

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Parameter)]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not agree") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / y,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise operation by name (add, sub, mul, div, tanh, sigmoid)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------------- algebra


def matmul(a, b) -> Tensor:
    """Matrix product; 1-D operands act as row (left) or column (right) vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _result(ad @ bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _result(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def index(a: Tensor, idx) -> Tensor:
    """``a[idx]``; integer-array indices scatter-add in the backward pass."""
    shape = a.shape
    fancy = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx)
    )

    def vjp(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), vjp)


def concat(*parts: Tensor) -> Tensor:
    """Join vectors end to end."""
    parts = tuple(_as_tensor(p) for p in parts)
    for p in parts:
        if p.ndim != 1:
            raise DimensionError(f"concat takes vectors, got shape {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts]), parts, vjp)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Join two matrices with equal row counts side by side."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: shapes {a.shape} and {b.shape} do not agree")
    k = a.shape[1]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:]))


def stack(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-width vectors into a matrix, one row each."""
    if not rows:
        raise DomainError("stack of an empty sequence")
    rows = tuple(rows)
    width = rows[0].shape
    for r in rows:
        if r.shape != width:
            raise DimensionError(f"stack: row shapes {width} and {r.shape} differ")
    return _result(np.stack([r.data for r in rows]), rows, lambda g: tuple(g))


# -------------------------------------------------------------- nonlinearity


def softmax(v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax over the last axis.

    ``mask`` marks entries (True) that are excluded; they receive probability
    exactly zero.
    """
    x = v.data
    if x.size == 0 or x.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    if mask is not None:
        x = np.where(mask, -np.inf, x)
        if np.any(np.all(mask, axis=-1)):
            raise DomainError("softmax: every entry of a row is masked")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _result(p, (v,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def maxpool_rows(rows) -> Tensor:
    """Coordinatewise maximum over rows; ties route gradient to the lowest row index."""
    if isinstance(rows, Tensor):
        m = rows
        if m.ndim != 2:
            raise DimensionError(f"maxpool_rows needs a matrix, got shape {m.shape}")
        if m.shape[0] == 0:
            raise DomainError("maxpool_rows of an empty sequence")
    else:
        if len(rows) == 0:
            raise DomainError("maxpool_rows of an empty sequence")
        m = stack(rows)
    d = m.data
    arg = d.argmax(axis=0)
    cols = np.arange(d.shape[1])

    def vjp(g):
        full = np.zeros(d.shape)
        full[arg, cols] = g
        return (full,)

    return _result(d[arg, cols], (m,), vjp)


PROB_FLOOR = 1e-12


def cross_entropy(probs: Tensor, label) -> Tensor:
    """Negative log-probability of ``label``.

    For a matrix of probability rows, ``label`` is a sequence of class indices
    (or one index shared by every row) and the result is the mean over rows.
    """
    p = probs.data
    k = p.shape[-1]
    if p.ndim == 1:
        label = int(label)
        if not 0 <= label < k:
            raise DomainError(f"label {label} out of range for {k} classes")
        q = max(p[label], PROB_FLOOR)

        def vjp(g):
            full = np.zeros(k)
            if p[label] > PROB_FLOOR:
                full[label] = -g / q
            return (full,)

        return _result(np.asarray(-math.log(q)), (probs,), vjp)

    n = p.shape[0]
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,))
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"labels {labels.tolist()} out of range for {k} classes")
    rows = np.arange(n)
    picked = p[rows, labels]
    q = np.maximum(picked, PROB_FLOOR)

    def vjp(g):
        full = np.zeros(p.shape)
        full[rows, labels] = np.where(picked > PROB_FLOOR, -g / (n * q), 0.0)
        return (full,)

    return _result(np.asarray(-np.log(q).sum() / n), (probs,), vjp)


def dropout(t: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return mul(t, Tensor._wrap(keep))


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d loss / d param into every Parameter reached through ``tape``."""
    if loss.data.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    if isinstance(loss, Parameter):
        loss.grad += 1.0
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if not t.requires_grad:
                continue
            if isinstance(t, Parameter):
                t.grad += gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def global_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))


def clip_global_norm(params: Iterable[Parameter], threshold: float = 5.0) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``threshold``.

    Returns the factor applied, ``min(1, threshold / norm)``.
    """
    if threshold <= 0:
        raise DomainError(f"clip threshold must be positive, got {threshold}")
    params = list(params)
    norm = global_norm(params)
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for p in params:
        p.grad *= factor
    return factor


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], eps: float = 1e-5) -> float:
    """Worst relative disagreement between tape gradients and central differences.

    ``f`` recomputes the scalar objective from the current parameter values.
    Relative error per entry is ``|ga - gn| / max(1e-8, |ga| + |gn|)``.
    """
    return grad_check_mixtures(lambda: (f(),), params, [(1.0,)], eps)[0]


def grad_check_mixtures(
    terms: Callable[[], Sequence[Tensor]],
    params: Iterable[Parameter],
    weightings: Sequence[Sequence[float]],
    eps: float = 1e-5,
) -> list[float]:
    """:func:`grad_check` for several objectives ``sum_j w_j * term_j`` at once.

    Each objective gets its own taped backward pass.  The central differences
    are taken per term and combined with the weights, which is exact for a
    linear mixture and saves one pair of forward passes per extra weighting.
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    params = list(params)
    saved = [p.grad.copy() for p in params]
    analytic = []
    for w in weightings:
        zero_grad(params)
        with Tape() as tape:
            parts = terms()
            if len(parts) != len(w):
                raise DimensionError(f"{len(parts)} terms but {len(w)} weights")
            loss = scale(parts[0], w[0])
            for t, wj in zip(parts[1:], w[1:]):
                loss = loss + scale(t, wj)
        backward(loss, tape)
        analytic.append([p.grad.reshape(-1).copy() for p in params])
    for p, g in zip(params, saved):
        p.grad[...] = g

    weights = np.asarray(weightings, dtype=np.float64)
    worst = np.zeros(len(weightings))
    for j, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = np.array([t.item() for t in terms()])
            flat[i] = orig - eps
            fm = np.array([t.item() for t in terms()])
            flat[i] = orig
            diffs = (fp - fm) / (2.0 * eps)
            for k in range(len(weightings)):
                gn = float(weights[k] @ diffs)
                ga = analytic[k][j][i]
                worst[k] = max(worst[k], abs(ga - gn) / max(1e-8, abs(ga) + abs(gn)))
    return [float(x) for x in worst]
