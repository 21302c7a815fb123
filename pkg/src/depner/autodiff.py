"""Reverse-mode automatic differentiation over 64-bit numpy arrays.

A :class:`Tape` logs every operation whose output needs a gradient and
replays the log once, in reverse, to accumulate gradients.  Activating a
tape is explicit (``with Tape():``); outside of any tape the same
functions run forward-only, which is what inference uses.

All stochastic operations take an explicit ``numpy.random.Generator`` so
that runs are bit-reproducible from a seed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered log of differentiable operations, replayed once in reverse."""

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(tensor) into ``grad`` for every tensor on the
        tape that requires a gradient.  ``loss`` must be a scalar."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad[...] = 1.0
        for out, inputs, rule in reversed(self._records):
            g = out.grad
            if g is None:
                continue  # this output never reached the loss
            for inp, ig in zip(inputs, rule(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += ig


class Tensor:
    """A shaped float64 array, optionally tracked for reverse-mode gradients.

    Leaf tensors created with ``requires_grad=True`` (parameters) carry an
    eagerly allocated zero ``grad`` buffer; intermediate results receive one
    lazily during the backward pass that reaches them.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("division only supported by a plain scalar")
        return mul(self, 1.0 / float(c))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True  # grad buffer stays lazy for intermediates
        tape = active_tape()
        if tape is not None:
            tape._records.append((out, inputs, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _scatter_add(buf: np.ndarray, key, g: np.ndarray) -> None:
    # basic indexing never selects the same cell twice, so += is safe and
    # much faster than np.add.at; integer-array keys may repeat indices.
    basic = isinstance(key, (int, slice)) or (
        isinstance(key, tuple) and all(isinstance(k, (int, slice)) for k in key)
    )
    if basic:
        buf[key] += g
    else:
        np.add.at(buf, key, g)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def getitem(x, key) -> Tensor:
    x = _as_tensor(x)
    data = np.array(x.data[key], dtype=np.float64)  # copy: never alias x.data

    def rule(g):
        buf = np.zeros_like(x.data)
        _scatter_add(buf, key, g)
        return (buf,)

    return _make(data, (x,), rule)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack of an empty sequence")

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), rule)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, computed with max subtraction."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), rule)


def log_sum_exp(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) over all elements (axis=None) or along one axis,
    computed with max shifting."""
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ValueError("log_sum_exp of an empty tensor")
    m = x.data.max(axis=axis, keepdims=True)
    s = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    if axis is None:
        data = s if keepdims else s.reshape(())
    else:
        data = s if keepdims else np.squeeze(s, axis=axis)

    def rule(g):
        ge = np.asarray(g)
        full = s  # keepdims form of the output
        if axis is None:
            ge_full = ge.reshape((1,) * x.data.ndim)
        elif not keepdims:
            ge_full = np.expand_dims(ge, axis)
        else:
            ge_full = ge
        w = np.exp(x.data - full)
        return (w * ge_full,)

    return _make(data, (x,), rule)


def tsum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(data), (x,), rule)


def tmean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / count)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: in training, zero entries with probability ``rate``
    and scale survivors by 1/(1-rate); in evaluation, the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Compare the tape gradient of a scalar-valued ``f`` at ``x`` against
    central finite differences.

    Returns the max relative error, with denominator
    max(|analytic|, |numeric|, 1e-8) per component.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    if not x.requires_grad:
        raise ValueError("check_gradients needs a tensor with requires_grad=True")
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        if out.data.size != 1:
            raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
        tape.backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data)
        flat[i] = orig - step
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "getitem",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "sigmoid",
    "tanh",
    "relu",
    "softmax_rows",
    "log_sum_exp",
    "tsum",
    "tmean",
    "dropout",
    "check_gradients",
]
