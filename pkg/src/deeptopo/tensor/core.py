"""Reverse-mode automatic differentiation over dense numpy buffers."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


# Piecewise ops (relu, bilinear floors) route their branch choice through
# ``branch``; a finite-difference check records the pattern at the base point
# and replays it so every perturbed pass stays on the same smooth piece.
_branch_tape: Optional[list] = None
_branch_replay: Optional[Iterator[np.ndarray]] = None


def branch(live: np.ndarray) -> np.ndarray:
    if _branch_replay is not None:
        saved = next(_branch_replay, None)
        if saved is None or saved.shape != live.shape:
            raise RuntimeError("branch replay does not match the recorded pass")
        return saved
    if _branch_tape is not None:
        _branch_tape.append(live.copy())
    return live


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch pattern of every piecewise op run inside the block."""
    global _branch_tape
    prev, _branch_tape = _branch_tape, []
    try:
        yield _branch_tape
    finally:
        _branch_tape = prev


@contextlib.contextmanager
def replay_branches(tape: Sequence[np.ndarray]) -> Iterator[None]:
    """Reuse a recorded branch pattern, in order, instead of the live one."""
    global _branch_replay
    prev, _branch_replay = _branch_replay, iter(tape)
    try:
        yield
    finally:
        _branch_replay = prev


@dataclass(eq=False)
class OpRecord:
    """One node of the recorded graph.

    ``backward`` maps the output gradient to a tuple with one entry per
    input (``None`` where the input does not need a gradient).
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    output_id: int = -1
    saved: dict = field(default_factory=dict)

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(id(t) for t in self.inputs)


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._record: Optional[OpRecord] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def record(self) -> Optional[OpRecord]:
        return self._record

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        backward(self, grad)

    # -- operator sugar (implementations live in ops) ----------------------
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

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def log(self):
        from . import ops
        return ops.log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    op: str,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    saved: Optional[dict] = None,
) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it if any input needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = OpRecord(op, tuple(inputs), backward_fn, id(out), saved or {})
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for parent in reversed(node._record.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad: np.ndarray) -> None:
    if not root.requires_grad:
        raise ValueError("backward() called on a tensor that does not require grad")
    grad = np.asarray(grad, dtype=root.dtype)
    if grad.shape != root.shape:
        raise ValueError(f"seed gradient shape {grad.shape} != output shape {root.shape}")
    pending: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        rec = node._record
        if rec is None:
            continue
        in_grads = rec.backward(g)
        for parent, pg in zip(rec.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"{rec.op}: gradient shape {pg.shape} does not match input shape {parent.shape}"
                )
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg.astype(parent.dtype, copy=False)
