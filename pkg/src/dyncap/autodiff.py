"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations are free functions (``matmul``, ``add``, ``sigmoid`` ...). When a
:class:`Tape` is active, every operation whose inputs depend on a trainable
tensor appends a node holding its vector-Jacobian product. :func:`backward`
walks the nodes in reverse and returns one gradient per requested leaf.

Broadcasting is limited to scalar-vs-tensor, plus two explicit row-wise ops
(:func:`add_row` for biases and :func:`gate_mix` for per-unit capacity gates).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sqrt",
    "square",
    "absolute",
    "mean",
    "sum",
    "sigmoid",
    "tanh",
    "log",
    "clamp",
    "add_row",
    "gate_mix",
    "backward",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Argument outside an operation's mathematical domain."""


class Tensor:
    """Immutable float64 array, optionally a trainable leaf.

    Only trainable leaves may change value, and only through :meth:`assign`
    between tapes (the optimizer's job).
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def assign(self, values) -> None:
        if not self.requires_grad:
            raise TypeError("only trainable leaf tensors can be reassigned")
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to tensor of shape {self.shape}")
        arr.setflags(write=False)
        self._data = arr

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of operations; use as a context manager."""

    nodes: list[_Node] = field(default_factory=list)
    _tracked: set[int] = field(default_factory=set)
    _prev: Tape | None = None

    def __enter__(self) -> Tape:
        self._prev = getattr(_active, "tape", None)
        _active.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _active.tape = self._prev
        self._prev = None

    def depends(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, op, out, inputs, vjp) -> None:
        self.nodes.append(_Node(op, out, inputs, vjp))
        self._tracked.add(id(out))

    def __len__(self) -> int:
        return len(self.nodes)


_active = threading.local()


def active_tape() -> Tape | None:
    return getattr(_active, "tape", None)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(tape.depends(t) for t in inputs):
        tape.record(op, result, tuple(inputs), vjp)
    return result


# --------------------------------------------------------------------------
# forward ops


def _same_or_scalar(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    A, B = a.data, b.data

    def vjp(g):
        ga = g @ B.T if B.ndim == 2 else np.multiply.outer(g, B)
        if A.ndim == 2:
            gb = A.T @ g
        else:
            gb = np.multiply.outer(A, g) if B.ndim == 2 else A * g
        return ga, gb

    return _emit("matmul", A @ B, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_or_scalar("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_or_scalar("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_or_scalar("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="raise"):
            return (g * 0.5 / out,)

    return _emit("sqrt", out, (a,), vjp)


def square(a: Tensor) -> Tensor:
    A = a.data
    return _emit("square", A * A, (a,), lambda g: (2.0 * A * g,))


def absolute(a: Tensor) -> Tensor:
    A = a.data
    return _emit("abs", np.abs(A), (a,), lambda g: (np.sign(A) * g,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit("mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free logistic
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    A = a.data
    return _emit("log", np.log(A), (a,), lambda g: (g / A,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes inside the band, zero outside."""
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    A = a.data
    inside = (A >= lo) & (A <= hi)
    return _emit("clamp", np.clip(A, lo, hi), (a,), lambda g: (g * inside,))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """``x + row`` with ``row`` (n,) repeated over the leading axis of ``x`` (..., n)."""
    if row.data.ndim != 1 or x.shape[-1] != row.shape[0]:
        raise ShapeError(f"add_row: shapes {x.shape} and {row.shape} do not match")
    lead = tuple(range(x.data.ndim - 1))
    return _emit("add_row", x.data + row.data, (x, row), lambda g: (g, g.sum(axis=lead) if lead else g))


def gate_mix(x: Tensor, lam: Tensor, noise: np.ndarray | None, grad_clip: float = 1e3) -> Tensor:
    """Per-unit capacity mix ``sqrt(lam) * x + sqrt(1 - lam) * noise``.

    ``lam`` has shape (n,) and applies along the last axis of ``x``. ``noise``
    is a constant array shaped like ``x`` (already scaled by the feature
    std), or None for the noise-free path. The gradient with respect to
    ``lam`` is clipped elementwise to ``grad_clip``.
    """
    L = lam.data
    if L.ndim != 1 or x.shape[-1] != L.shape[0]:
        raise ShapeError(f"gate_mix: shapes {x.shape} and {lam.shape} do not match")
    if noise is not None and noise.shape != x.shape:
        raise ShapeError(f"gate_mix: noise shape {noise.shape} differs from input {x.shape}")
    if np.any(L < 0) or np.any(L > 1):
        raise DomainError("gate_mix: capacity fractions must lie in [0, 1]")
    X = x.data
    s, r = np.sqrt(L), np.sqrt(1.0 - L)
    out = X * s if noise is None else X * s + noise * r
    lead = tuple(range(X.ndim - 1))

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = X * np.where(s > 0, 0.5 / s, 0.0)
            if noise is not None:
                d = d - noise * np.where(r > 0, 0.5 / r, 0.0)
        gl = (g * d).sum(axis=lead) if lead else g * d
        return g * s, np.clip(gl, -grad_clip, grad_clip)

    return _emit("gate_mix", out, (x, lam), vjp)


# --------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to trainable leaves.

    With ``params`` given, the result holds exactly those tensors, using
    zeros for any that the loss does not reach. Otherwise it holds every
    trainable leaf seen on the tape.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not tape.depends(inp):
                continue
            if inp.requires_grad:
                leaves[id(inp)] = inp
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else np.asarray(gi, dtype=np.float64)
    if loss.requires_grad:
        leaves[id(loss)] = loss
    if params is None:
        return {t: grads[id(t)] for t in leaves.values()}
    return {p: grads.get(id(p), np.zeros(p.shape)) for p in params}


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must rebuild its graph from the tensor it receives and any random
    draws inside it must be held fixed across calls.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if not np.isfinite(out.data).all():
        raise DomainError("f returned a non-finite value")
    analytic = backward(tape, out, [leaf])[leaf].reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        fp = f(Tensor(hi.reshape(x0.shape))).item()
        fm = f(Tensor(lo.reshape(x0.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DomainError(f"f is not finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * step)
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
