"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` whose backward rule is
itself written with tensor operations. Running the backward pass with
``create_graph=True`` therefore records new nodes, and the returned gradients
can be differentiated again (needed for gradient penalties).
"""

from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64

# process-wide so that node indices stay ordered even if tensors outlive a tape
_generation = itertools.count()
_local = threading.local()


class AutodiffError(ValueError):
    """Shape mismatch, unknown op kind or a malformed backward request."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tape:
    """Append-only record of graph nodes.

    Nodes carry a monotone ``index`` drawn from a process-wide counter, so
    parents always precede children. A tape entered as a context manager
    keeps the node list (useful for graph-size accounting); the implicit
    per-thread tape only hands out indices.
    """

    def __init__(self, record: bool = True):
        self.nodes: list[Function] | None = [] if record else None
        self.generation = 0

    def append(self, node: "Function") -> None:
        node.index = next(_generation)
        self.generation += 1
        if self.nodes is not None:
            self.nodes.append(node)

    def __len__(self) -> int:
        return self.generation

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


def _stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape(record=False)]
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _local.grad_enabled = mode
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def _check_finite(arr: np.ndarray, where: str) -> None:
    # a single reduction; NaN or Inf anywhere makes the sum non-finite
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        if np.isfinite(arr).all():
            return  # finite values whose sum overflowed
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """A dense real array, optionally attached to the tape through ``node``."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Function | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node = None
        return t

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; the op implementations live in ``ops``
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p: float):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A graph node: one application of a differentiable primitive."""

    kind = "function"

    def __init__(self):
        self.inputs: tuple[Tensor, ...] = ()
        self.index = -1
        self._out = None

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError

    @property
    def output(self) -> Tensor:
        out = self._out()
        if out is None:  # pragma: no cover - output is alive while reachable
            raise AutodiffError(f"{self.kind}: output tensor was released")
        return out

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        return cls.call(*inputs, **attrs)[0]

    @classmethod
    def call(cls, *inputs, **attrs) -> tuple[Tensor, "Function"]:
        """Like :meth:`apply` but also return the function object (recorded or not)."""
        fn = cls(**attrs)
        tensors = tuple(as_tensor(x) for x in inputs)
        arr = fn.forward(*(t.data for t in tensors))
        _check_finite(arr, cls.kind)
        out = Tensor._wrap(arr)
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            fn.inputs = tensors
            fn._out = weakref.ref(out)
            current_tape().append(fn)
            out.node = fn
            out.requires_grad = True
        return out, fn


def _key(t: Tensor):
    return t.node if t.node is not None else t


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Return d(output)/d(w) for every tensor in ``wrt``.

    ``output`` must be a scalar unless ``grad_output`` is given. A ``wrt``
    tensor that the output does not depend on gets a zero gradient rather
    than an error. With ``create_graph`` the backward computation is itself
    recorded, so the returned gradients are differentiable.
    """
    wrt = list(wrt)
    if grad_output is None:
        if output.size != 1:
            raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
        grad_output = Tensor._wrap(np.ones_like(output.data))
    elif grad_output.shape != output.shape:
        raise AutodiffError("grad_output shape does not match output")
    for w in wrt:
        if not w.requires_grad:
            raise AutodiffError("gradient requested for a tensor that is not tape-attached")

    nodes: dict[int, Function] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        fn = t.node
        if fn is None or id(fn) in nodes:
            continue
        nodes[id(fn)] = fn
        stack.extend(x for x in fn.inputs if x.requires_grad)
    order = sorted(nodes.values(), key=lambda f: f.index, reverse=True)

    grads: dict[object, Tensor] = {_key(output): grad_output}
    with set_grad_enabled(create_graph):
        for fn in order:
            g = grads.get(fn)
            if g is None:
                continue
            in_grads = fn.backward(g)
            for x, gx in zip(fn.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                if gx.shape != x.shape:
                    raise AutodiffError(
                        f"{fn.kind}: gradient shape {gx.shape} != input shape {x.shape}"
                    )
                k = _key(x)
                prev = grads.get(k)
                grads[k] = gx if prev is None else prev + gx
    out = []
    for w in wrt:
        g = grads.get(_key(w))
        out.append(Tensor._wrap(np.zeros_like(w.data)) if g is None else g)
    return out


def backward(tape: Tape | None, output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False):
    """Tape-explicit spelling of :func:`grad`; the tape argument is informational."""
    return grad(output, wrt, create_graph=create_graph)
