"""Array-level reverse-mode automatic differentiation on top of numpy.

Operations executed inside an active :class:`GradientTape` are appended to
that tape in evaluation order; :meth:`GradientTape.gradient` walks the tape
backwards and accumulates vector-Jacobian products. Outside a tape the same
functions just compute values, which is what the planner uses.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE: list["GradientTape"] = []


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: GradientTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class GradientTape:
    """Records differentiable operations so the loss can be backpropagated.

    Use as a context manager; tapes may nest, the innermost one records.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "GradientTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._ops)

    def clear(self) -> None:
        self._ops.clear()
        self._ids.clear()

    def watch(self, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        return tensor

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        self._ops.append((out, inputs, vjp))
        self._ids.add(id(out))

    def gradient(self, loss: Tensor, sources: dict[str, Tensor] | Sequence[Tensor]):
        """Gradients of scalar ``loss`` w.r.t. ``sources``.

        Returns a dict keyed like ``sources`` (or a list when a sequence is
        passed). Sources the loss does not depend on get zero arrays.
        """
        if loss.data.size != 1:
            raise ValueError("loss must be a scalar")
        keyed = isinstance(sources, dict)
        items = list(sources.items()) if keyed else list(enumerate(sources))
        if id(loss) not in self._ids:
            if any(src is loss for _, src in items):
                grads = {k: np.ones_like(src.data) if src is loss else np.zeros_like(src.data)
                         for k, src in items}
                return grads if keyed else [grads[k] for k, _ in items]
            raise RuntimeError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parts = vjp(g)
            for inp, part in zip(inputs, parts):
                if part is None or not inp.requires_grad:
                    continue
                part = _unbroadcast(part, inp.data.shape)
                prev = grads.get(id(inp))
                grads[id(inp)] = part if prev is None else prev + part
            # keep source grads around (they are leaves)
        out_grads = {}
        for k, src in items:
            g = grads.get(id(src))
            out_grads[k] = np.zeros_like(src.data) if g is None else g
        return out_grads if keyed else [out_grads[k] for k, _ in items]


def backprop(tape: GradientTape, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``loss`` for every named parameter."""
    return tape.gradient(loss, params)


def _active() -> GradientTape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value: np.ndarray, inputs: Iterable[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    inputs = tuple(inputs)
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, vjp)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if a.data.ndim == 1:
            ga = g @ b.data.T
            gb = np.outer(a.data, g)
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where the clamp is inactive."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(np.stack([p.data for p in parts], axis=axis), parts, vjp)


def take(x, idx) -> Tensor:
    """Index into ``x`` (basic or integer-array indexing along axis 0)."""
    x = as_tensor(x)
    shape = x.data.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), vjp)


def stop_gradient(x) -> Tensor:
    """Same value, no path back into ``x``."""
    return Tensor(as_tensor(x).data.copy())


def bce_with_logits(logits, labels, lo: float = 1e-7) -> Tensor:
    """Elementwise binary cross-entropy on sigmoid(logits), scores clipped to [lo, 1-lo]."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    p = _sigmoid(logits.data)
    pc = np.clip(p, lo, 1.0 - lo)
    value = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    active = (p >= lo) & (p <= 1.0 - lo)

    def vjp(g):
        # d/dlogit of BCE(sigmoid(x)) is p - y while the clip is inactive
        return (g * (p - y) * active,)

    return _make(value, (logits,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
