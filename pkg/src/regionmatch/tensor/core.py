"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default, float64 selectable for
gradient checking). Every differentiable operation records its inputs and a
local gradient rule on the output tensor; ``backward`` topologically orders
the recorded operations and replays the rules in reverse to accumulate
gradients into every reachable ``requires_grad`` tensor.

The recorded graph is confined to the thread that built it. Evaluating
distinct episodes concurrently is safe as long as each episode builds its
own graph (use ``no_grad`` for inference to skip recording entirely).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "backward",
    "no_grad",
    "checked_mode",
    "grad_enabled",
    "is_checked",
    "as_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message carries the dims."""


_state = threading.local()


def _local():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.checked = False
    return _state


def grad_enabled() -> bool:
    return _local().grad_enabled


def is_checked() -> bool:
    return _local().checked


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        st = _local()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local().grad_enabled = self._prev
        return False


class checked_mode:
    """Context manager enabling NaN/Inf rejection at op boundaries."""

    def __init__(self, enabled: bool = True):
        self._enabled = enabled

    def __enter__(self):
        st = _local()
        self._prev = st.checked
        st.checked = self._enabled
        return self

    def __exit__(self, *exc):
        _local().checked = self._prev
        return False


def _coerce_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense real-valued array with optional gradient tracking.

    Attributes:
        data: row-major numpy array holding the values.
        grad: accumulated gradient buffer (same shape as ``data``) or None.
        requires_grad: whether backward should deliver a gradient here.

    Non-leaf tensors additionally hold references to the input tensors and
    the local gradient rule of the operation that produced them; that pair
    is one record of the computation tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._inputs: tuple = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # --- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.data.shape}")

    def numpy(self) -> np.ndarray:
        """The underlying array (no copy); treat as read-only after forward."""
        return self.data

    # --- autograd ------------------------------------------------------------

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def _accumulate(self, g: np.ndarray):
        self.grad = g.astype(self.data.dtype, copy=True) if self.grad is None else self.grad + g


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Coerce scalars/arrays to a constant Tensor, matching ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


class ComputationTape:
    """Topologically ordered record of the operations behind one tensor.

    ``records`` lists every non-leaf tensor reachable from the root, ordered
    so that each entry's inputs appear before the entry itself. Replaying
    each record's gradient rule in reverse order yields exact chain-rule
    gradients for all reachable leaves.
    """

    def __init__(self, records: list):
        self.records = records

    def __len__(self):
        return len(self.records)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        """Collect the operation records behind ``root`` (iterative DFS)."""
        records: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                records.append(node)
                continue
            if id(node) in visited or node._vjp is None:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if parent._vjp is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(records)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(tensor) into every reachable requires_grad tensor.

    ``loss`` must be a scalar produced by at least one recorded operation.
    Gradients accumulate across calls; callers reset with ``zero_grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = ComputationTape.trace(loss)
    if not tape.records:
        raise ValueError("backward on a tensor with no recorded operations (empty tape)")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        input_grads = node._vjp(g)
        for parent, pg in zip(node._inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._vjp is None:
                parent._accumulate(pg)
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
    if is_checked():
        for node in tape.records:
            for parent in (node,) + node._inputs:
                if parent.requires_grad and parent.grad is not None and not np.all(
                    np.isfinite(parent.grad)
                ):
                    raise FloatingPointError("non-finite gradient produced during backward")
