"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` is an immutable array of 64-bit reals. Operations executed
while a `GradTape` is active are recorded as primitive entries; the tape
walks them in reverse to accumulate gradients of a scalar output with
respect to parameters and watched inputs. One tape serves one forward
pass and is never shared between threads (the active-tape stack is
thread-local, so concurrent inference with per-call tapes is safe).

Numeric heavy lifting is delegated to the active kernel backend (see
`attnpop.backend`); everything else is plain numpy.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend
from .errors import NonFiniteError, OracleError, ShapeError, TapeError

Array = np.ndarray

ACTIVATION_KINDS = ("tanh", "relu", "sigmoid")


class Tensor:
    """Immutable dense array of float64 values.

    All public operations reject NaN/Inf at construction, so any tensor
    in circulation is finite. The underlying numpy array is marked
    read-only; never mutate it.
    """

    __slots__ = ("data",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite (no NaN/Inf)")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: Array) -> "Tensor":
        """Adopt a freshly computed float64 array without copying."""
        arr = np.asarray(arr)  # rank-0 arithmetic yields array scalars
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced non-finite values")
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __len__(self) -> int:
        if self.data.ndim == 0:
            raise ShapeError("rank-0 tensor has no length")
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, values={self.data.tolist()!r})"

    # -- operator sugar over the primitive ops ---------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.shape))

    def __radd__(self, other):
        return add(_coerce(other, self.shape), self)

    def __sub__(self, other):
        return subtract(self, _coerce(other, self.shape))

    def __rsub__(self, other):
        return subtract(_coerce(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)


def _coerce(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


class Parameter:
    """A named tensor that an optimizer may update.

    `trainable=False` freezes it: gradients still flow through it during
    backward, but optimizers leave it untouched.
    """

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool = True):
        if not name:
            raise ValueError("parameter name must be non-empty")
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.trainable = bool(trainable)

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


class Op:
    """A differentiable primitive.

    `forward` computes on raw arrays; `backward` maps the output gradient
    to one gradient per input (or None for inputs that take no gradient,
    e.g. dropout masks). Instances are stateless; per-call state travels
    in the `ctx` dict recorded on the tape, which is what makes tape
    replay exact.
    """

    name = "op"

    def forward(self, *arrays: Array, **ctx) -> Array:
        raise NotImplementedError

    def backward(self, grad: Array, out: Array, *arrays: Array, **ctx):
        raise NotImplementedError


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op, inputs, output, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


_LOCAL = threading.local()


def _tape_stack():
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of one forward pass, walked backwards for gradients.

    Usage::

        with GradTape() as tape:
            tape.watch(x)
            loss = f(x)
        tape.backward(loss)
        g = tape.grad(x)
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._produced: set[int] = set()
        self._watched: dict[int, Tensor] = {}
        self._grads: dict[int, Array] | None = None

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def watch(self, tensor: Tensor) -> None:
        """Mark an input tensor whose gradient should be retained."""
        self._watched[id(tensor)] = tensor

    def _record(self, op, inputs, output, ctx) -> None:
        self._entries.append(_TapeEntry(op, inputs, output, ctx))
        self._produced.add(id(output))

    def backward(self, output: Tensor) -> None:
        """Accumulate gradients of a scalar `output` through the tape.

        Gradients for shared subexpressions add up. Results are read off
        with `grad()`; unreachable targets yield zero tensors.
        """
        if id(output) not in self._produced:
            raise TapeError("backward target was not produced on this tape")
        if output.size != 1:
            raise TapeError(f"backward target must be scalar, got shape {output.shape}")
        grads: dict[int, Array] = {id(output): np.ones(output.shape)}
        for entry in reversed(self._entries):
            out_grad = grads.get(id(entry.output))
            if out_grad is None:
                continue
            input_grads = entry.op.backward(
                out_grad, entry.output.data,
                *(t.data for t in entry.inputs), **entry.ctx)
            for tensor, g in zip(entry.inputs, input_grads):
                if g is None:
                    continue
                seen = grads.get(id(tensor))
                grads[id(tensor)] = g if seen is None else seen + g
        self._grads = grads

    def grad(self, target) -> Tensor:
        """Gradient of the last `backward()` output w.r.t. `target`.

        Accepts a Tensor or a Parameter. Targets the backward walk never
        reached get a zero tensor of matching shape.
        """
        if self._grads is None:
            raise TapeError("call backward() before reading gradients")
        tensor = target.value if isinstance(target, Parameter) else target
        arr = self._grads.get(id(tensor))
        if arr is None:
            return Tensor._wrap(np.zeros(tensor.shape))
        return Tensor._wrap(np.array(arr))

    def gradients(self, output: Tensor, params: Iterable[Parameter]) -> dict:
        """backward() + one gradient per parameter name."""
        self.backward(output)
        return {p.name: self.grad(p) for p in params}

    def replay(self) -> None:
        """Re-execute every recorded op and demand bit-identical outputs."""
        for i, entry in enumerate(self._entries):
            again = entry.op.forward(
                *(t.data for t in entry.inputs), **entry.ctx)
            if not np.array_equal(again, entry.output.data):
                raise TapeError(
                    f"replay diverged at entry {i} ({entry.op.name})")


def apply_op(op: Op, *inputs: Tensor, **ctx) -> Tensor:
    """Run a primitive and record it on the active tape, if any."""
    out = Tensor._wrap(op.forward(*(t.data for t in inputs), **ctx))
    tape = active_tape()
    if tape is not None:
        tape._record(op, inputs, out, ctx)
    return out


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes differ: {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad, out, a, b):
        return grad, grad


class _Subtract(Op):
    name = "subtract"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"subtract: shapes differ: {a.shape} vs {b.shape}")
        return a - b

    def backward(self, grad, out, a, b):
        return grad, -grad


class _Multiply(Op):
    name = "multiply"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"multiply: shapes differ: {a.shape} vs {b.shape}")
        return a * b

    def backward(self, grad, out, a, b):
        return grad * b, grad * a


class _Scale(Op):
    name = "scale"

    def forward(self, a, *, factor):
        return a * factor

    def backward(self, grad, out, a, *, factor):
        return (grad * factor,)


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        K = backend.kernels
        if a.ndim == 2 and b.ndim == 2:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(
                    f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
            return K.matmul(a, b)
        if a.ndim == 2 and b.ndim == 1:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(
                    f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
            return K.matvec(a, b)
        if a.ndim == 1 and b.ndim == 2:
            if a.shape[0] != b.shape[0]:
                raise ShapeError(
                    f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
            return K.vecmat(a, b)
        raise ShapeError(
            f"matmul expects rank-2 x rank-2/1 or rank-1 x rank-2 operands, "
            f"got {a.shape} x {b.shape}")

    def backward(self, grad, out, a, b):
        K = backend.kernels
        if a.ndim == 2 and b.ndim == 2:
            return K.matmul_nt(grad, b), K.matmul_tn(a, grad)
        if a.ndim == 2 and b.ndim == 1:
            return K.outer(grad, b), K.vecmat(grad, a)
        return K.matvec(b, grad), K.outer(a, grad)


class _Activation(Op):
    name = "activation"

    def forward(self, a, *, kind):
        K = backend.kernels
        fwd = {"tanh": K.tanh_fwd, "relu": K.relu_fwd, "sigmoid": K.sigmoid_fwd}[kind]
        return fwd(np.ascontiguousarray(a.reshape(-1))).reshape(a.shape)

    def backward(self, grad, out, a, *, kind):
        K = backend.kernels
        bwd = {"tanh": K.tanh_bwd, "relu": K.relu_bwd, "sigmoid": K.sigmoid_bwd}[kind]
        flat = bwd(np.ascontiguousarray(out.reshape(-1)),
                   np.ascontiguousarray(grad.reshape(-1)))
        return (flat.reshape(a.shape),)


class _Softmax(Op):
    name = "softmax"

    def forward(self, a):
        if a.ndim != 1:
            raise ShapeError(f"softmax expects a rank-1 tensor, got shape {a.shape}")
        return backend.kernels.softmax_fwd(a)

    def backward(self, grad, out, a):
        return (backend.kernels.softmax_bwd(out, np.ascontiguousarray(grad)),)


class _Concat(Op):
    name = "concat"

    def forward(self, *arrays):
        for arr in arrays:
            if arr.ndim != 1:
                raise ShapeError(f"concat expects rank-1 tensors, got shape {arr.shape}")
        return np.concatenate(arrays)

    def backward(self, grad, out, *arrays):
        pieces = []
        offset = 0
        for arr in arrays:
            pieces.append(np.array(grad[offset:offset + arr.shape[0]]))
            offset += arr.shape[0]
        return tuple(pieces)


class _Stack(Op):
    name = "stack"

    def forward(self, *arrays):
        first = arrays[0].shape
        for arr in arrays:
            if arr.ndim != 1 or arr.shape != first:
                raise ShapeError(
                    f"stack expects equal-length rank-1 tensors, got {first} vs {arr.shape}")
        return np.stack(arrays)

    def backward(self, grad, out, *arrays):
        return tuple(np.array(grad[i]) for i in range(len(arrays)))


class _SumAll(Op):
    name = "sum"

    def forward(self, a):
        return np.asarray(a.sum())

    def backward(self, grad, out, a):
        return (np.full(a.shape, float(grad)),)


_ADD = _Add()
_SUBTRACT = _Subtract()
_MULTIPLY = _Multiply()
_SCALE = _Scale()
_MATMUL = _MatMul()
_ACTIVATION = _Activation()
_SOFTMAX = _Softmax()
_CONCAT = _Concat()
_STACK = _Stack()
_SUM = _SumAll()


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(_ADD, a, b)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(_SUBTRACT, a, b)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    return apply_op(_MULTIPLY, a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_op(_SCALE, a, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also covers matrix-vector and vector-matrix."""
    return apply_op(_MATMUL, a, b)


def map_activation(t: Tensor, kind: str) -> Tensor:
    """Elementwise tanh / relu / sigmoid; 'identity' returns the input."""
    if kind == "identity":
        return t
    if kind not in ACTIVATION_KINDS:
        raise ValueError(f"unknown activation {kind!r}; expected one of "
                         f"{ACTIVATION_KINDS + ('identity',)}")
    return apply_op(_ACTIVATION, t, kind=kind)


def tanh(t: Tensor) -> Tensor:
    return map_activation(t, "tanh")


def relu(t: Tensor) -> Tensor:
    return map_activation(t, "relu")


def sigmoid(t: Tensor) -> Tensor:
    return map_activation(t, "sigmoid")


def stable_softmax(v: Tensor) -> Tensor:
    """Softmax with max-subtraction; safe for any finite input.

    Outputs are positive and sum to 1 within 1e-12; shifting the input by
    a constant leaves the result bit-identical because the shift cancels
    in the max-subtraction.
    """
    if v.size == 0 or v.rank != 1:
        raise ValueError(f"softmax needs a non-empty rank-1 tensor, got shape {v.shape}")
    return apply_op(_SOFTMAX, v)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    if len(tensors) == 1:
        return tensors[0]
    return apply_op(_CONCAT, *tensors)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack N rank-1 tensors into an [N x d] matrix."""
    if not tensors:
        raise ValueError("stack of an empty sequence")
    return apply_op(_STACK, *tensors)


def sum_all(t: Tensor) -> Tensor:
    """Sum of all elements, as a rank-0 tensor."""
    return apply_op(_SUM, t)


def weighted_sum(weights: Tensor, items: Sequence[Tensor]) -> Tensor:
    """Sum_i weights[i] * items[i] for rank-1 items."""
    if weights.rank != 1 or len(weights) != len(items):
        raise ShapeError(
            f"weighted_sum: {len(items)} items vs weight shape {weights.shape}")
    return matmul(weights, stack(items))


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def _scalar_of(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_difference_check(f: Callable[[], "Tensor | float"],
                            params: Sequence[Parameter],
                            eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` evaluates the scalar from the current parameter values; it must be
    deterministic (verified by evaluating it twice). Relative error per
    coordinate uses denominator max(|analytic|, |numeric|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    baseline = _scalar_of(f())
    if _scalar_of(f()) != baseline:
        raise OracleError("f is not deterministic: two baseline evaluations differ")

    with GradTape() as tape:
        out = f()
        if not isinstance(out, Tensor):
            raise OracleError("f must return a Tensor for the analytic pass")
        tape.backward(out)
    analytic = {p.name: tape.grad(p).data.reshape(-1) for p in params}

    worst = 0.0
    for p in params:
        original = p.value
        flat = original.data.reshape(-1)
        grads = analytic[p.name]
        for i in range(flat.size):
            for sign in (+1.0, -1.0):
                bumped = np.array(original.data)
                bumped.reshape(-1)[i] += sign * eps
                p.value = Tensor._wrap(bumped)
                if sign > 0:
                    f_plus = _scalar_of(f())
                else:
                    f_minus = _scalar_of(f())
            p.value = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(grads[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
