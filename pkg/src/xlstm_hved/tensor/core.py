"""Dense tensor with a recorded reverse-mode graph.

Every primitive produces a new :class:`Tensor` whose ``_node`` remembers its
inputs and a closure mapping the output gradient to input gradients. Calling
:meth:`Tensor.backward` on a scalar walks that graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericError(ArithmeticError):
    """A primitive produced NaN or Inf."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractViolation(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default dtype (used by 64-bit gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class BranchTape:
    """Branch decisions of nonsmooth primitives, in call order.

    Recording one evaluation and replaying it on another pins every leaky
    ReLU sign, max selection and clip state, so the replayed map is the
    smooth piece the recorded point lies on. Finite differences taken under
    replay do not jump across kinks.
    """

    def __init__(self):
        self.decisions: list[np.ndarray] = []
        self.cursor = 0
        self.replaying = False

    def decide(self, decision: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.decisions.append(decision.copy())
            return decision
        if self.cursor >= len(self.decisions):
            raise ContractViolation("branch replay ran past the recorded evaluation")
        recorded = self.decisions[self.cursor]
        if recorded.shape != decision.shape:
            raise ContractViolation(
                f"branch replay shape {decision.shape} differs from recorded {recorded.shape}")
        self.cursor += 1
        return recorded


_TAPE: BranchTape | None = None


@contextlib.contextmanager
def record_branches(tape: BranchTape):
    global _TAPE
    prev, _TAPE = _TAPE, tape
    tape.decisions.clear()
    tape.replaying = False
    try:
        yield tape
    finally:
        _TAPE = prev


@contextlib.contextmanager
def replay_branches(tape: BranchTape):
    global _TAPE
    prev, _TAPE = _TAPE, tape
    tape.replaying, tape.cursor = True, 0
    try:
        yield tape
    finally:
        tape.replaying = False
        _TAPE = prev


def branch(decision: np.ndarray) -> np.ndarray:
    """Pass a branch decision through the active tape, if any."""
    return decision if _TAPE is None else _TAPE.decide(decision)


@dataclass(eq=False)
class OpNode:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    """N-d float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            raise ContractViolation(f"unsupported tensor dtype {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: OpNode | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._node.op}" if self._node else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractViolation("backward() on a tensor that does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = t._node.backward(g)
            for parent, pg in zip(t._node.inputs, in_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ContractViolation(
                        f"{t._node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar (implemented in functional) -----------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; the mLSTM scan builds graphs far deeper than the recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.inputs):
                if isinstance(p, Tensor) and p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def make_result(data: np.ndarray, op: str, inputs: tuple, backward, **saved) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op``, recording the graph if needed."""
    check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = OpNode(op, inputs, backward, saved)
    return out
