"""Dense tensors and a replayable operation tape for reverse-mode gradients.

Values are plain numpy arrays in row-major order, single precision by
default. A ``Tape`` records every primitive op executed while it is active;
``backward`` replays the records in exact reverse execution order and
accumulates gradients additively into ``Tensor.grad``. The gradient-check
harness reruns identical graphs in double precision, so every op preserves
the dtype of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested op."""


class TapeError(ValueError):
    """Backward was asked for a value the tape cannot differentiate."""


class Tensor:
    """N-dimensional array value, optionally carrying an accumulated gradient."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is None:
            # Arrays keep their float precision (the gradcheck harness runs
            # the same graphs in float64); everything else becomes float32.
            is_float_array = isinstance(data, np.ndarray) and arr.dtype in FLOAT_DTYPES
            dtype = arr.dtype if is_float_array else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Copy on first write: backward fns may hand back views of the
        # downstream gradient buffer.
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"


@dataclass
class TapeNode:
    """One executed primitive: its operands, result, and pullback."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of primitive ops for one logical execution."""

    nodes: list = field(default_factory=list)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self.nodes.append(TapeNode(op, tuple(inputs), output, backward))

    def __enter__(self) -> "Tape":
        push_tape(self)
        return self

    def __exit__(self, *exc) -> None:
        pop_tape(self)

    def __len__(self) -> int:
        return len(self.nodes)


# The active-tape stack is module state; a tape is confined to one logical
# execution, and execution within a tape is sequential.
_TAPE_STACK: list = []


def push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise TapeError("tape stack corrupted: exiting a tape that is not active")
    _TAPE_STACK.pop()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward)
    return output


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(input) into ``.grad`` of every tensor on the tape.

    Visits the records in exact reverse execution order; a tensor feeding
    multiple consumers receives the sum of their contributions.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not produced on this tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        input_grads = node.backward(out_grad)
        for tensor, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            tensor.accumulate_grad(g)
