"""Dense float64 tensors with a reverse-mode gradient tape.

Operations executed while a :class:`Tape` is active are recorded in
execution order; :meth:`Tape.backward` replays them in exact reverse.
Outside a tape, operations simply compute values, which is what inference
uses.

    >>> x = Tensor(np.ones((4, 3)))
    >>> w = Tensor(np.ones((3, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(relu(matmul(x, w)))
    ...     grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "apply",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "add_bias",
    "concat",
    "slice_",
    "take_rows",
    "embedding",
    "transpose",
    "reshape",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "sum_",
    "mean",
    "dropout",
]


class ContractError(ValueError):
    """Raised when a primitive receives inputs that violate its contract."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


_LOCAL = threading.local()


def _tapes() -> list["Tape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def node_id(self) -> int | None:
        return self._node

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self) -> "Tensor":
        return sum_(self)

    def mean(self) -> "Tensor":
        return mean(self)


class Tape:
    """Ordered record of differentiable operations.

    A tape is consumed by a single call to :meth:`backward`.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def _push(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        if self.consumed:
            raise ContractError("cannot record on a tape that has already run backward")
        for p in parents:
            if isinstance(p, Tensor) and p.requires_grad and p._node is None:
                self.leaves.setdefault(id(p), p)
        out._node = len(self.records)
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
        """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

        Leaves listed in ``params`` that are not on the path receive zeros.
        Returns a mapping leaf -> gradient array.
        """
        if self.consumed:
            raise ContractError("backward: tape already consumed")
        if not isinstance(loss, Tensor) or loss.shape != ():
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward: loss must be a scalar tensor, got shape {shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        if loss.requires_grad and loss._node is None:
            self.leaves.setdefault(id(loss), loss)
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not (isinstance(p, Tensor) and p.requires_grad):
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in self.leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            result[leaf] = leaf.grad
        for p in params:
            if p not in result:
                p.grad = np.zeros_like(p.data)
                result[p] = p.grad
        self.records.clear()
        return result


def _active_tape() -> Tape | None:
    stack = _tapes()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def apply(name: str, out: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    """Wrap ``out`` as the result of primitive ``name`` and record it if needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name}: produced non-finite values")
    t = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        t.requires_grad = True
        tape._push(t, parents, backward)
    return t


def _need(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _shape_error(name: str, a, b) -> ContractError:
    return ContractError(f"{name}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _elementwise_pair(name, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise _shape_error(name, a.shape, b.shape)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _elementwise_pair("add", a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if _need(a) else None,
                _unbroadcast(g, b.shape) if _need(b) else None)

    return apply("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _elementwise_pair("sub", a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if _need(a) else None,
                _unbroadcast(-g, b.shape) if _need(b) else None)

    return apply("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _elementwise_pair("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if _need(a) else None,
                _unbroadcast(g * a.data, b.shape) if _need(b) else None)

    return apply("mul", a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g):
        ga = gb = None
        if A.ndim == 2 and B.ndim == 2:
            ga = g @ B.T if _need(a) else None
            gb = A.T @ g if _need(b) else None
        elif A.ndim == 1 and B.ndim == 2:
            ga = B @ g if _need(a) else None
            gb = np.outer(A, g) if _need(b) else None
        elif A.ndim == 2 and B.ndim == 1:
            ga = np.outer(g, B) if _need(a) else None
            gb = A.T @ g if _need(b) else None
        else:
            ga = g * B if _need(a) else None
            gb = g * A if _need(b) else None
        return ga, gb

    return apply("matmul", A @ B, (a, b), backward)


def add_bias(x, bias) -> Tensor:
    """``x + bias`` with ``bias`` (1-D) broadcast over the leading axes of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise _shape_error("add_bias", x.shape, bias.shape)

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if _need(bias) else None
        return (g if _need(x) else None), gb

    return apply("add_bias", x.data + bias.data, (x, bias), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis (default) or along axis 0."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat: no inputs")
    if axis not in (0, -1):
        raise ContractError(f"concat: unsupported axis {axis}")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.data.ndim != len(ref) or (axis == -1 and t.shape[:-1] != ref[:-1]) or (axis == 0 and t.shape[1:] != ref[1:]):
            raise _shape_error("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, cuts, axis=axis)
        return tuple(p if _need(t) else None for p, t in zip(parts, ts))

    return apply("concat", np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def slice_(x, index) -> Tensor:
    """Basic (view) indexing: ints and slices."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ContractError(f"slice: index {index!r} invalid for shape {x.shape}") from exc

    def backward(g):
        z = np.zeros_like(x.data)
        z[index] = g
        return (z,)

    return apply("slice", np.array(out), (x,), backward)


def take_rows(table, indices) -> Tensor:
    """Gather rows ``table[indices]``; repeated indices accumulate gradient."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim < 1 or idx.ndim != 1:
        raise ContractError(f"take_rows: table shape {table.shape}, index shape {idx.shape}")
    if idx.size and (idx.min() < -table.shape[0] or idx.max() >= table.shape[0]):
        raise ContractError(f"take_rows: index out of range for {table.shape[0]} rows")

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, idx, g)
        return (z,)

    return apply("take_rows", table.data[idx], (table,), backward)


embedding = take_rows


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"transpose: expected 2-D input, got shape {x.shape}")
    return apply("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    return apply("reshape", out.copy(), (x,), lambda g: (g.reshape(x.shape),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return apply("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return apply("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return apply("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def _softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _lse(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    s = _softmax(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return apply("softmax", s, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    out = x.data - _lse(x.data, -1, keepdims=True)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return apply("log_softmax", out, (x,), backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 0:
        raise ContractError("logsumexp: scalar input")
    out = _lse(x.data, axis)

    def backward(g):
        return (np.expand_dims(g, axis) * _softmax(x.data, axis),)

    return apply("logsumexp", out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-10) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.data.ndim else 0
    if x.data.ndim < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = None
        if _need(x):
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if _need(gain) else None
        gb = flat_g.sum(axis=0) if _need(bias) else None
        return gx, gg, gb

    return apply("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


def sum_(x) -> Tensor:
    x = as_tensor(x)
    return apply("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = max(x.data.size, 1)
    return apply("mean", np.asarray(x.data.mean() if x.data.size else 0.0), (x,),
                 lambda g: (np.full(x.shape, g / n),))


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: rate {p} outside [0, 1)")
    if p == 0.0 or not training:
        return x
    if rng is None:
        raise ContractError("dropout: an rng is required in training mode")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return apply("dropout", x.data * keep, (x,), lambda g: (g * keep,))
