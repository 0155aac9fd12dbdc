"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation checks shapes explicitly. The only implicit broadcasting is
between a tensor and a Python scalar; anything else (a bias added to the last
axis, a weight shared across a batch) is its own named operation with its own
gradient rule.

Example
-------
>>> a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
>>> loss = sum_all(matmul(a, a))
>>> loss.backward()
>>> a.grad.tolist()
[[7.0, 11.0], [9.0, 13.0]]
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

PROB_FLOOR = 1e-12

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(dim < 1 for dim in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor into every leaf that requires them.

        Leaf gradients accumulate, so two calls without ``zero_grad`` double them.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        GradientTape.from_graph(self).run(self, np.asarray(grad, dtype=np.float64))

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with an explicit reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class GradientTape:
    """Operations reachable from a root, in topological order (parents first)."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_graph(cls, root: Tensor) -> GradientTape:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.node_id not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        if seed.shape != root.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != tensor shape {root.shape}")
        pending: dict[int, np.ndarray] = {root.node_id: seed}
        for node in reversed(self.entries):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + pg
                else:
                    pending[parent.node_id] = pg


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    live = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = live
    out._parents = parents if live else ()
    out._backward = backward if live else None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``; entries below the floor get no gradient."""
    clipped = np.maximum(a.data, floor)
    live = a.data >= floor
    return _result(np.log(clipped), (a,), lambda g: (np.where(live, g / clipped, 0.0),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must be identical."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``weight`` (in x out) and optional ``bias`` (out,) along the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    n_in, n_out = weight.shape
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, n_in).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def transpose_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last needs at least 2 axes, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size or any(s < 1 for s in shape):
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def take(a: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    axis = _check_axis(a, axis)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= a.shape[axis]:
        raise ShapeError(f"take: indices out of range for axis {axis} of {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(a.data, idx, axis=axis), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    axis = _check_axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis(a, axis)
    n = a.shape[axis]

    def backward(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _result(a.data.mean(axis=axis), (a,), backward)


# ---------------------------------------------------------------- nn primitives


def softmax_last(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_last: input contains non-finite values")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gx_hat = g * gain.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = g.reshape(-1, d)
        return gx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _result(xhat * gain.data + bias.data, (a, gain, bias), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / √d) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    weights = softmax_last(scale(matmul(q, transpose_last(k)), 1.0 / math.sqrt(d)))
    return matmul(weights, v)


def cross_entropy(pred: Tensor, onehot: Tensor) -> Tensor:
    """-Σ onehot·log(clamp(pred)) over the last axis; one value per leading index."""
    _same_shape(pred, onehot, "cross_entropy")
    if np.any(~np.isfinite(pred.data)):
        raise NumericError("cross_entropy: non-finite probabilities")
    clipped = np.clip(pred.data, PROB_FLOOR, 1.0)
    live = pred.data >= PROB_FLOOR
    out = -(onehot.data * np.log(clipped)).sum(axis=-1)

    def backward(g):
        gp = np.where(live, -onehot.data / clipped, 0.0) * np.expand_dims(g, -1)
        return gp, None

    return _result(np.asarray(out), (pred, onehot), backward)


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` must rebuild its scalar output from the current contents of ``params``
    on every call. Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as
    the denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: loss is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("grad_check: loss is not finite under perturbation")
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
