"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every value in the toolkit (images, weights, passports, activations) is a
:class:`Tensor`. Operations in :mod:`nnpassport.ops` record their inputs and a
backward rule on the output tensor; :func:`backward` linearises that graph into
a :class:`ComputationTape` and replays it in reverse.

Storage precision is float32 by default. :func:`precision` switches it for the
current context, which the finite-difference oracle uses to run in float64.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericsError, RangeError, ShapeError

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("nnpp_dtype", default=np.float32)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("nnpp_grad", default=True)


def default_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype newly created tensors are stored in."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation-only forward passes)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """n-dimensional array with an optional gradient buffer.

    ``data`` is a contiguous numpy array in the active storage dtype. ``grad``
    is ``None`` until :func:`backward` reaches the tensor, after which it has
    the same shape as ``data`` and accumulates across calls.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=default_dtype(), copy=True, order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(arr, dtype=arr.dtype if arr.dtype.kind == "f" else default_dtype())
        out.grad = None
        out.name = None
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self) -> "Tensor":
        """Debug check: raise NumericsError on NaN/Inf in data or grad."""
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in tensor {self.name or self._op}")
        if self.grad is not None:
            if self.grad.shape != self.data.shape:
                raise ShapeError("grad shape differs from data shape")
            if not np.all(np.isfinite(self.grad)):
                raise NumericsError(f"non-finite gradient in tensor {self.name or self._op}")
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # arithmetic sugar, implemented in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(other, -1.0))

    def sum(self):
        from . import ops
        return ops.tsum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputationTape:
    """Topologically ordered record of the operations leading to one output.

    ``nodes[i]`` only depends on tensors that appear earlier in ``nodes``.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def replay_backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: gradients land here and accumulate across calls
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> ComputationTape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf tensor on the graph.

    Intermediate results are not given a ``grad`` buffer.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = ComputationTape(loss)
    if loss.requires_grad:
        tape.replay_backward(np.ones_like(loss.data))
    return tape


def finite_diff_check(f: Callable[[Tensor], Tensor | float], x: Tensor, step: float = 1e-3,
                      eps: float = 1e-8) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps ``x`` to a scalar. The error per element is
    ``|a - c| / (|a| + |c| + eps)``.
    """
    if not step > 0:
        raise RangeError(f"finite-difference step must be positive, got {step}")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if not isinstance(out, Tensor):
        raise ShapeError("f must return a Tensor to differentiate")
    backward(out)
    analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    x.grad = None

    def evaluate() -> float:
        with no_grad():
            val = f(x)
        v = float(val.data.reshape(-1)[0]) if isinstance(val, Tensor) else float(val)
        if not np.isfinite(v):
            raise NumericsError("non-finite function value during finite differencing")
        return v

    flat = x.data.reshape(-1)
    central = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = evaluate()
        flat[i] = orig - step
        lo = evaluate()
        flat[i] = orig
        central[i] = (hi - lo) / (2.0 * step)
    a = analytic.reshape(-1)
    err = np.abs(a - central) / (np.abs(a) + np.abs(central) + eps)
    return float(err.max()) if err.size else 0.0
