"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: exactly the primitives the estimator needs (affine maps,
tanh/softplus, softmax, scaled dot-product attention, reductions), recorded
on an explicit tape and replayed in reverse for gradients. One tape per
computation graph; evaluation without an active tape performs no recording
and is safe for inference.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .rng import Xoshiro256

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """A dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named trainable tensor. Names must be unique within one model."""

    __slots__ = ("tensor", "name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Tape:
    """Execution-ordered record of primitive operations.

    Ops are appended during the forward pass; backward() replays the record
    once, in reverse. Execution order is a topological order of the graph,
    so the reverse sweep sees every adjoint before it is consumed.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active on this thread")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every tensor reachable from loss through the tape."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if tape._consumed:
        raise ContractError("tape has already been replayed")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape._ops):
        op()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # copy on first store: g may be a view of the output's grad buffer
    t.grad = np.array(g) if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(out: Tensor, fn: Callable[[np.ndarray], None]) -> Tensor:
    """Attach a backward closure if a tape is active and grads are needed."""
    if _ACTIVE_TAPE is not None and out.requires_grad:

        def _bw():
            if out.grad is not None:
                fn(out.grad)

        _ACTIVE_TAPE.record(_bw)
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _record(out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c, a.requires_grad)

    def bw(g):
        _accumulate(a, g * c)

    return _record(out, bw)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, a.requires_grad)

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return _record(out, bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), numerically stable; output strictly positive."""
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data), a.requires_grad)

    def bw(g):
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return _record(out, bw)


def absolute(a: Tensor) -> Tensor:
    """|x| with sign subgradient (0 at 0)."""
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data), a.requires_grad)

    def bw(g):
        _accumulate(a, g * np.sign(a.data))

    return _record(out, bw)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis. Rows sum to 1."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _record(out, bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, bw)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.T.copy(), a.requires_grad)

    def bw(g):
        _accumulate(a, g.T)

    return _record(out, bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of zero tensors")
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        any(p.requires_grad for p in parts),
    )
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                _accumulate(p, g[tuple(idx)])
            offset += size

    return _record(out, bw)


def gather_cols(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select columns of a 2-D tensor; gradient scatters back."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_cols needs a matrix, got {a.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[:, idx], a.requires_grad)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None), idx), g)
        _accumulate(a, full)

    return _record(out, bw)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(), a.requires_grad)

    def bw(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _record(out, bw)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = Tensor(a.data.mean(), a.requires_grad)

    def bw(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return _record(out, bw)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error reduction to a scalar."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.float64((diff * diff).sum() / n),
                 pred.requires_grad or target.requires_grad)

    def bw(g):
        c = 2.0 * float(g) / n
        if pred.requires_grad:
            _accumulate(pred, c * diff)
        if target.requires_grad:
            _accumulate(target, -c * diff)

    return _record(out, bw)


def mae(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error reduction to a scalar."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.float64(np.abs(diff).sum() / n),
                 pred.requires_grad or target.requires_grad)

    def bw(g):
        c = float(g) / n
        s = np.sign(diff)
        if pred.requires_grad:
            _accumulate(pred, c * s)
        if target.requires_grad:
            _accumulate(target, -c * s)

    return _record(out, bw)


def attention(queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V, row-wise.

    Single head. Composed from recorded primitives, so it is differentiable
    end to end without a bespoke backward rule.
    """
    q, k, v = _as_tensor(queries), _as_tensor(keys), _as_tensor(values)
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise DimensionError(
            f"attention operands must share shape: "
            f"{q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    if q.data.ndim != 2 or q.data.shape[1] < 1:
        raise DimensionError(f"attention needs m x d with d >= 1, got {q.data.shape}")
    d = q.data.shape[1]
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    return matmul(softmax(logits), v)


# ---------------------------------------------------------------------------
# optimization


def sgd_step(params: Iterable[Parameter], rate: float) -> None:
    """p <- p - rate * grad for each trainable parameter, then clear grads."""
    if rate < 0:
        raise ContractError(f"learning rate must be non-negative, got {rate}")
    params = list(params)
    for p in params:
        if not p.trainable:
            continue
        if p.tensor.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    for p in params:
        if p.trainable:
            p.tensor.data = p.tensor.data - rate * p.tensor.grad
            p.tensor.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    params = [p for p in params if p.trainable and p.tensor.grad is not None]
    total = math.sqrt(sum(float((p.tensor.grad ** 2).sum()) for p in params))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for p in params:
            p.tensor.grad = p.tensor.grad * factor
    return total


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def xavier_uniform(rng: Xoshiro256, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)
