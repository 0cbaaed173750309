"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives the toy encoders need are provided:
``matmul``, ``add``, ``mul``, ``relu``, ``tanh``, ``softmax``, ``log``,
``sum``, ``mean``, ``l2_normalize`` and ``transpose``.

Recording is opt-in. Inside ``recording()`` every primitive whose output
needs a gradient appends a node to the active :class:`Tape`; outside of it
nothing is recorded and outputs never require gradients.

Saved-activation accounting: a node counts a saved operand towards
``Tape.float_count`` only when that operand is itself an intermediate of the
recorded graph. Leaves (parameters, inputs, constants) and values computed
outside the graph are already resident and cost nothing extra, transposes
are views, and storage shared between nodes is counted once.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rules."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: tuple[Tensor, ...]
    saved_floats: int
    vjp: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    float_count: int = 0
    _stored: set = field(default_factory=set, repr=False)

    def append(self, node: Node) -> None:
        self.nodes.append(node)
        self.float_count += node.saved_floats

    def storage_cost(self, saved: Sequence[Tensor]) -> int:
        """Scalars newly kept alive by saving ``saved`` on this tape.

        Transposes are views of their input; storage already held by an
        earlier node is not counted twice.
        """
        total = 0
        for s in saved:
            s = _view_base(s)
            if s._tape is self and id(s) not in self._stored:
                self._stored.add(id(s))
                total += s.data.size
        return total


def _view_base(t: Tensor) -> Tensor:
    while t._node is not None and t._node.op == "transpose":
        t = t._node.inputs[0]
    return t


_active: list[Tape] = []


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Record primitives onto ``tape`` (a fresh one by default)."""
    tape = Tape() if tape is None else tape
    _active.append(tape)
    try:
        yield tape
    finally:
        _active.pop()


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording, e.g. for zeroth-order loss evaluations."""
    _active.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        _active.pop()


def active_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


def forward_eval(expr: Callable[[], Tensor], record: bool, tape: Optional[Tape] = None) -> Tensor:
    """Evaluate ``expr`` with or without tape participation."""
    if record:
        with recording(tape):
            return expr()
    with no_record():
        return expr()


def _emit(op, out_arr, inputs, saved, vjp, output_floats: int = 0) -> Tensor:
    """Wrap ``out_arr`` and record a node if a gradient must flow through it.

    ``output_floats`` is the number of scalars the backward keeps from the
    op's own output (always an intermediate when recorded).
    """
    out = Tensor._wrap(out_arr)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = tape
    if output_floats:
        tape._stored.add(id(out))
    floats = output_floats + tape.storage_cost(saved)
    if output_floats:
        saved = (out, *saved)
    node = Node(op, tuple(inputs), out, tuple(saved), floats, vjp)
    out._node = node
    tape.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # only leading-axis broadcasting is supported
    return g.reshape((-1,) + shape).sum(axis=0)


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    return a == b or a == () or b == () or a == b[-len(a):] or b == a[-len(b):]


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    saved = []
    if a.requires_grad:
        saved.append(b)
    if b.requires_grad:
        saved.append(a)

    def vjp(g):
        ga = g @ B.T if a.requires_grad else None
        gb = A.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", A @ B, (a, b), saved, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", a.data + b.data, (a, b), (), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError("mul", a.shape, b.shape)
    A, B = a.data, b.data
    saved = []
    if a.requires_grad:
        saved.append(b)
    if b.requires_grad:
        saved.append(a)

    def vjp(g):
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", A * B, (a, b), saved, vjp)


def relu(x: Tensor) -> Tensor:
    X = x.data

    def vjp(g):
        return (g * (X > 0),)

    return _emit("relu", np.maximum(X, 0.0), (x,), (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    Y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - Y * Y),)

    return _emit("tanh", Y, (x,), (), vjp, output_floats=Y.size)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    X = x.data
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    Y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (Y * (g - (g * Y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", Y, (x,), (), vjp, output_floats=Y.size)


def log(x: Tensor) -> Tensor:
    X = x.data

    def vjp(g):
        return (g / X,)

    return _emit("log", np.log(X), (x,), (x,), vjp)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum()), (x,), (), vjp)


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _emit("mean", np.asarray(x.data.mean()), (x,), (), vjp)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm."""
    X = x.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    Y = X / norm

    def vjp(g):
        return ((g - Y * (g * Y).sum(axis=-1, keepdims=True)) / norm,)

    # keeps the normalized rows plus one norm per row
    return _emit("l2_normalize", Y, (x,), (), vjp, output_floats=Y.size + norm.size)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose", x.shape)

    def vjp(g):
        return (g.T,)

    return _emit("transpose", x.data.T, (x,), (), vjp)


# -- backward -------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._node is None:
        raise TapeError("no tape: loss was not produced while recording")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


# -- random sources -------------------------------------------------------------


class Rng:
    """Seeded random stream (PCG64); identical seeds give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape))

    def rademacher(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.integers(0, 2, size=tuple(shape)).astype(np.float64) * 2.0 - 1.0

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams derived deterministically from this seed."""
        children = np.random.SeedSequence(self.seed).spawn(n)
        return [Rng(int(c.generate_state(1, np.uint64)[0])) for c in children]


def gaussian_probe(rng: Rng, shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(rng.normal(shape))


def rademacher_probe(rng: Rng, shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(rng.rademacher(shape))
