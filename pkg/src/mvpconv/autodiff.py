"""Dense tensors plus a replayable reverse-mode gradient tape.

A ``Tape`` records every differentiable operation in execution order as
(op name, inputs, output, backward rule).  Walking the records in reverse
and accumulating vector-Jacobian products yields gradients for every
grad-enabled leaf.  The tape is rebuilt on every forward pass; there is no
static graph.  Accumulation order is fixed (reverse execution order, one
contribution at a time), so repeated runs over identical data produce
bitwise-identical gradients.

``finite_diff_grad`` is the independent oracle used throughout the test
suite: central differences in 64-bit, never sharing code with the tape.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, OracleFailure, UnknownOutputError

Array = np.ndarray

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_uid_counter = itertools.count()
_tls = threading.local()


class Tensor:
    """Row-major dense real array, optionally participating in gradients.

    Data is immutable by convention while a tape over it is alive; the
    optimizer mutates parameter tensors in place between passes.
    """

    __slots__ = ("data", "grad_enabled", "uid")

    def __init__(self, data, dtype=None, grad_enabled: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: Array = np.ascontiguousarray(arr)
        self.grad_enabled = bool(grad_enabled)
        self.uid: int = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), grad_enabled=self.grad_enabled)

    def __repr__(self) -> str:
        flag = ", grad" if self.grad_enabled else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name}{flag})"


def parameter(data, dtype=None) -> Tensor:
    """A grad-enabled leaf tensor."""
    return Tensor(data, dtype=dtype, grad_enabled=True)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Single-writer log of ops; inputs are always recorded before outputs.

    Use as a context manager around a forward pass; ops record themselves
    onto the innermost active tape of the current thread.  Distinct tapes
    may run concurrently on distinct data.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: Callable[[Array], tuple],
    ) -> None:
        if output.uid in self._produced:
            raise ContractViolation(f"op {op!r}: output already produced on this tape")
        self._produced.add(output.uid)
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def produced(self, t: Tensor) -> bool:
        return t.uid in self._produced

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.stack.pop()


def active_tape() -> Tape | None:
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    output: Tensor,
    backward: Callable[[Array], tuple],
) -> Tensor:
    """Record ``output = op(inputs)`` on the active tape, if any.

    ``backward(grad_out)`` must return one gradient array (or None) per
    input, must not mutate ``grad_out``, and may return shared/borrowed
    arrays: the accumulator never writes into a first contribution.
    """
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward)
    return output


def backward_pass(
    tape: Tape,
    loss: Tensor,
    wrt: Iterable[Tensor] | None = None,
) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` with respect to tape leaves.

    Returns a mapping keyed by tensor identity.  With ``wrt`` given, every
    listed tensor gets an entry, zero-filled when the loss never touched
    it.  Without ``wrt``, all grad-enabled leaves reached by the sweep are
    returned.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise UnknownOutputError("loss tensor was not produced on this tape")

    # uid -> (tensor, grad array, owned).  A borrowed first contribution is
    # replaced by a fresh sum on the second one, never mutated in place.
    grads: dict[int, list] = {
        loss.uid: [loss, np.ones_like(loss.data), False]
    }

    for node in reversed(tape.nodes):
        entry = grads.pop(node.output.uid, None)
        if entry is None:
            continue  # branch not reached by the loss
        input_grads = node.backward(entry[1])
        if len(input_grads) != len(node.inputs):
            raise ContractViolation(
                f"op {node.op!r}: backward returned {len(input_grads)} grads "
                f"for {len(node.inputs)} inputs"
            )
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            if not (inp.grad_enabled or tape.produced(inp)):
                continue
            slot = grads.get(inp.uid)
            if slot is None:
                grads[inp.uid] = [inp, ig, False]
            elif slot[2]:
                slot[1] += ig
            else:
                slot[1] = slot[1] + ig
                slot[2] = True

    if wrt is None:
        return {
            t: Tensor(g) for t, g, _ in grads.values() if t.grad_enabled
        }
    out: dict[Tensor, Tensor] = {}
    for t in wrt:
        slot = grads.get(t.uid)
        if slot is None:
            out[t] = Tensor(np.zeros_like(t.data))
        else:
            out[t] = Tensor(slot[1])
    return out


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar map, evaluated in 64-bit.

    The oracle against which every backward rule is checked; deliberately
    shares nothing with the tape machinery.  ``f`` must be deterministic
    and pure with respect to its argument.
    """
    if h <= 0:
        raise ContractViolation("finite_diff_grad: h must be positive")
    base = np.asarray(x.data, dtype=np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _as_scalar(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = _as_scalar(f(Tensor(base.copy())))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleFailure(
                f"finite_diff_grad: non-finite evaluation at element {i}"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def _as_scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def max_rel_error(
    analytic: Array | Tensor,
    numeric: Array | Tensor,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Worst-element discrepancy between analytic and numeric gradients.

    Entries whose analytic magnitude is at least ``floor`` contribute their
    plain relative error; smaller entries are compared absolutely at the
    floor, rescaled so that the returned value stays on the relative-error
    scale.  Agreement under the convention used throughout the tests means
    ``max_rel_error(a, n) < tol``.
    """
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ContractViolation(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    diff = np.abs(a - n)
    small = np.abs(a) < floor
    err = np.where(small, diff / floor * tol, diff / np.maximum(np.abs(a), floor))
    return float(err.max())


# --------------------------------------------------------------------------
# Elementwise tape primitives.


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """out[i] = a[i] + b[i]; gradient passes through to both inputs."""
    if a.shape != b.shape:
        raise ContractViolation(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g: Array):
        return g, g

    return record_op("add", (a, b), out, backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g: Array):
        return g * b.data, g * a.data

    return record_op("mul", (a, b), out, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.data * factor)

    def backward(g: Array):
        return (g * factor,)

    return record_op("scale", (a,), out, backward)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, reduced in sequential index order."""
    out = Tensor(np.array(np.sum(a.data), dtype=a.dtype))

    def backward(g: Array):
        return (np.full(a.shape, g.reshape(())[()], dtype=a.dtype),)

    return record_op("sum", (a,), out, backward)
