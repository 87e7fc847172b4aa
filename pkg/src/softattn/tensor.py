"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a read-only ``numpy.float64`` array.  Operations
executed while a :class:`Tape` is active append a node to that tape whenever
at least one input is tracked (a trainable :class:`Parameter` or the output
of an earlier node on the same tape).  ``Tape.backward`` walks the nodes in
reverse order and accumulates gradients into the trainable parameters.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, or a right operand shaped ``(..., 1)`` against a left operand shaped
``(..., d)`` (a spatial map against a feature tensor).  Scalar gating goes
through :func:`scale`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AxisError, ContractError, NumericError, ParameterError, ShapeError

SeededRng = np.random.Generator


def seeded_rng(seed: int) -> SeededRng:
    """PCG64 generator; the stream is fixed by ``seed`` on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _check_dims(shape: tuple) -> None:
    if any(int(d) < 1 for d in shape):
        raise ShapeError(f"dimensions must be >= 1, got {tuple(shape)}")


class Tensor:
    """Immutable dense float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        _check_dims(arr.shape)
        arr.flags.writeable = False
        self.data = arr
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out._tape = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Mutable leaf tensor that accumulates gradients.

    ``value`` and ``data`` name the same array; optimizers update it in place.
    """

    __slots__ = ("grad", "trainable", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        _check_dims(arr.shape)
        self.data = arr
        self._tape = None
        self._node = None
        self.grad = np.zeros_like(arr)
        self.trainable = bool(trainable)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence]
    shape: tuple


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nodes are appended in execution order, so every
    node's inputs precede it.  A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: list | None = None

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: Tensor) -> bool:
        return t._tape is self or (isinstance(t, Parameter) and t.trainable)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every trainable parameter's grad."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss tensor was not recorded on this tape")
        grads: list = [None] * len(self.nodes)
        grads[loss._node] = np.ones_like(loss.data)
        for i in range(loss._node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if t._tape is self:
                    j = t._node
                    grads[j] = gi if grads[j] is None else grads[j] + gi
                elif isinstance(t, Parameter) and t.trainable:
                    t.grad += gi
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward's loss w.r.t. an intermediate tensor."""
        if self._grads is None:
            raise ContractError("backward has not been run on this tape")
        if t._tape is not self:
            raise ContractError("tensor was not recorded on this tape")
        g = self._grads[t._node]
        return np.zeros_like(t.data) if g is None else g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` and, if any input is tracked, append a node to the tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    res = Tensor._wrap(out)
    tape = active_tape()
    if tape is None or not any(tape.tracks(t) for t in inputs):
        return res
    tape.nodes.append(Node(op, tuple(inputs), backward, res.shape))
    res._tape = tape
    res._node = len(tape.nodes) - 1
    return res


# ---------------------------------------------------------------- creation


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("zeros needs at least one dimension")
    _check_dims(shape)
    return Tensor._wrap(np.zeros(shape))


def randn(shape: Sequence[int], rng: SeededRng, stddev: float = 1.0) -> Tensor:
    if not stddev > 0:
        raise ParameterError(f"stddev must be positive, got {stddev}")
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("randn needs at least one dimension")
    _check_dims(shape)
    return Tensor._wrap(rng.normal(0.0, stddev, size=shape))


# ---------------------------------------------------------------- elementwise


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim >= 1 and b.shape == a.shape[:-1] + (1,):
        return "map"
    raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")


def _reduce_like(g: np.ndarray, kind: str) -> np.ndarray:
    return g if kind == "same" else g.sum(axis=-1, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, _reduce_like(g, kind)))


ew_add = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_like(g, kind)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    return record(
        "mul", ad * bd, (a, b), lambda g: (g * bd, _reduce_like(g * ad, kind))
    )


ew_mul = mul


def scale(a: Tensor, s) -> Tensor:
    """Multiply every entry of ``a`` by a scalar (float or single-entry tensor)."""
    a = _as_tensor(a)
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale factor must have one entry, got shape {s.shape}")
        sv = s.data.reshape(-1)[0]
        ad = a.data
        return record(
            "scale",
            ad * sv,
            (a, s),
            lambda g: (g * sv, np.reshape(np.sum(g * ad), s.shape)),
        )
    sv = float(s)
    return record("scale", a.data * sv, (a,), lambda g: (g * sv,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return record("relu", np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if not (ad > 0).all():
        raise NumericError("log of a non-positive entry")
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------- structure


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    in_shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept_shape), in_shape).copy(),)

    return record("sum", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    _check_dims(out.shape)
    return record("reshape", out, (a,), lambda g: (g.reshape(in_shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    (ax,) = _norm_axes(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat needs matching dims off axis {ax}: "
                + ", ".join(str(t.shape) for t in tensors)
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record(
        "concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax))
    )


# ---------------------------------------------------------------- checking


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5
) -> float:
    """Max symmetric relative error between tape and central-difference grads.

    ``f`` rebuilds a scalar loss from the current parameter values each time
    it is called.  Grads of ``params`` are zeroed and left holding the
    analytic gradient.
    """
    if not h > 0:
        raise ParameterError(f"step h must be positive, got {h}")
    params = [p for p in params if p.trainable]
    base = f().item()
    again = f().item()
    if base != again:
        raise ContractError("f is not deterministic (is dropout enabled?)")
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
