"""Tensor type, precision control and the reverse-mode backward pass."""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class ParameterError(ValueError):
    """Raised for invalid scalar hyperparameters (eps <= 0, sigma <= 0, ...)."""


_PRECISIONS = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}


def set_precision(name: str) -> None:
    """Select the run-level floating point precision ('single' or 'double')."""
    if name not in _PRECISIONS:
        raise ParameterError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _state["dtype"] = _PRECISIONS[name]


def get_precision() -> str:
    return "double" if _state["dtype"] is np.float64 else "single"


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, benchmarking)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    """Dense array with an optional gradient and a link to the op that made it.

    ``data`` is a numpy array in the run-level dtype.  Non-leaf tensors keep
    their parents and a backward closure mapping the output gradient to one
    gradient (or None) per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic sugar (delegates to ops) ----------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)

    def backward(self, grad=None) -> "ComputationRecord":
        """Run reverse-mode differentiation from this tensor.

        Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated.
        Returns the record that was replayed.
        """
        record = ComputationRecord.from_output(self)
        record.backward(self, grad)
        return record


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, attaching graph links only when some parent needs them."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


class ComputationRecord:
    """Ordered record of the operations that produced an output.

    ``ops`` is a topological order (inputs before outputs); backward walks
    it in exact reverse.
    """

    def __init__(self, ops: list[Tensor]):
        self.ops = ops
        self.visited: list[str] = []

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; graphs are deep enough to hit recursion limits
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, out: Tensor, grad=None) -> None:
        if not out.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if out.size != 1:
                raise DimensionError(f"implicit gradient only for scalar outputs, got shape {out.shape}")
            grad = np.ones_like(out.data)
        else:
            grad = np.asarray(grad, dtype=out.data.dtype)
            if grad.shape != out.shape:
                raise DimensionError(f"gradient shape {grad.shape} does not match output shape {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): grad}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            self.visited.append(node.op)
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"backward of {node.op} produced grad {pg.shape} for input {parent.shape}"
                    )
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
