"""
Numerics - dense tensors with reverse-mode differentiation.

A `Tensor` wraps a row-major numpy array. Operations are `Function`
subclasses: `apply` runs the forward pass on raw arrays and records the
parents so `backward` can replay the graph in reverse topological order.
The op set is deliberately small; every attention formula in the lab is
composed from it.
"""

import contextlib
import logging
import math
from typing import Callable, Dict, Iterable, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit, logsumexp

from .errors import ShapeError

logger = logging.getLogger(__name__)

_default_dtype = np.dtype(np.float32)

IGNORE_INDEX = -100

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch float storage (float32 for training, float64 for checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Numeric array plus the graph bookkeeping needed for backward."""

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None,
                 name: Optional[str] = None):
        array = np.asarray(data)
        if array.dtype.kind not in "iub":
            array = array.astype(_default_dtype, copy=False)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        pending: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._ctx.backward(node_grad)
            for parent, parent_grad in zip(node._ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                # gradients keep their parent's storage dtype
                parent_grad = np.asarray(parent_grad).astype(parent.data.dtype, copy=False)
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # operators
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return Mul.apply(self, Pow.apply(other, exponent=-1.0))
        return Mul.apply(self, 1.0 / np.asarray(other, dtype=_default_dtype))

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return Transpose.apply(self, axes=tuple(axes))


def _topological_order(root: Tensor):
    """Parents before children; iterative so deep graphs do not hit the recursion limit."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


class Function:
    """One differentiable op. Subclasses implement `forward` and `backward`."""

    parents: Sequence[Tensor]

    @classmethod
    def apply(cls, *args, **kwargs) -> Tensor:
        ctx = cls()
        ctx.parents = [arg if isinstance(arg, Tensor) else Tensor(arg) for arg in args]
        output = ctx.forward(*[p.data for p in ctx.parents], **kwargs)
        requires_grad = any(p.requires_grad for p in ctx.parents)
        return Tensor(output, requires_grad=requires_grad, _ctx=ctx if requires_grad else None)

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return unbroadcast(grad * self.y, self.x.shape), unbroadcast(grad * self.x, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        self.count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return np.mean(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    """Basic and advanced indexing; gradients of repeated indices accumulate."""

    def forward(self, x, index):
        self.shape, self.dtype, self.index = x.shape, x.dtype, index
        return x[index]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Softmax(Function):
    """Subtract-max softmax; -inf entries map to 0 and all -inf slices to all zeros."""

    def forward(self, x, axis=-1):
        self.axis = axis
        peak = np.max(x, axis=axis, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0.0)
        shifted = np.exp(x - peak)
        total = shifted.sum(axis=axis, keepdims=True)
        self.y = shifted / np.where(total == 0, 1.0, total)
        return self.y

    def backward(self, grad):
        inner = np.sum(grad * self.y, axis=self.axis, keepdims=True)
        return (self.y * (grad - inner),)


class Sigmoid(Function):
    def forward(self, x):
        self.y = expit(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class L2Normalize(Function):
    """x / sqrt(sum(x^2) + eps^2) along `axis`."""

    def forward(self, x, axis=-1, eps=1e-6):
        self.axis = axis
        self.x = x
        self.norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True) + eps * eps)
        return x / self.norm

    def backward(self, grad):
        inner = np.sum(grad * self.x, axis=self.axis, keepdims=True)
        return (grad / self.norm - self.x * inner / self.norm ** 3,)


class LayerNorm(Function):
    """Normalization over the last axis with learnable gain and bias."""

    def forward(self, x, gain, bias, eps=1e-12):
        centered = x - x.mean(axis=-1, keepdims=True)
        variance = np.mean(centered * centered, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(variance + eps)
        self.x_hat = centered * self.inv_std
        self.gain_shape, self.bias_shape = gain.shape, bias.shape
        self.gain = gain
        return self.x_hat * gain + bias

    def backward(self, grad):
        grad_hat = grad * self.gain
        grad_x = self.inv_std * (
            grad_hat
            - grad_hat.mean(axis=-1, keepdims=True)
            - self.x_hat * np.mean(grad_hat * self.x_hat, axis=-1, keepdims=True)
        )
        return (
            grad_x,
            unbroadcast(grad * self.x_hat, self.gain_shape),
            unbroadcast(grad, self.bias_shape),
        )


class Gelu(Function):
    """Exact (erf) GELU."""

    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        return x * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.x * self.x) * _INV_SQRT_2PI
        return (grad * (self.cdf + self.x * pdf),)


class CrossEntropy(Function):
    """Mean negative log-likelihood over rows whose label is not `ignore_index`."""

    def forward(self, logits, labels, ignore_index=IGNORE_INDEX):
        self.shape = logits.shape
        flat = logits.reshape(-1, logits.shape[-1])
        labels = np.asarray(labels).reshape(-1)
        self.valid = labels != ignore_index
        self.labels = labels
        self.count = int(self.valid.sum())
        self.log_probs = flat - logsumexp(flat, axis=-1, keepdims=True)
        if self.count == 0:
            return np.zeros((), dtype=logits.dtype)
        rows = np.nonzero(self.valid)[0]
        picked = self.log_probs[rows, labels[rows]]
        return np.asarray(-picked.sum() / self.count, dtype=logits.dtype)

    def backward(self, grad):
        if self.count == 0:
            return (np.zeros(self.shape, dtype=self.log_probs.dtype),)
        probs = np.exp(self.log_probs)
        probs[~self.valid] = 0.0
        rows = np.nonzero(self.valid)[0]
        probs[rows, self.labels[rows]] -= 1.0
        return ((grad * probs / self.count).reshape(self.shape),)


def _gather_last(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    full_index = np.broadcast_to(index, x.shape[:-2] + index.shape)
    return np.take_along_axis(x, full_index, axis=-1)


def _scatter_last(x: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    lead = x.shape[:-2]
    rows = np.broadcast_to(np.arange(index.shape[0])[:, None], index.shape)
    flat = x.reshape((-1,) + index.shape)
    out = np.zeros((flat.shape[0], index.shape[0], size), dtype=x.dtype)
    np.add.at(out, (slice(None), rows, index), flat)
    return out.reshape(lead + (index.shape[0], size))


class RelativeGather(Function):
    """out[..., i, j] = x[..., i, index[i, j]] (relative axis -> absolute axis)."""

    def forward(self, x, index):
        self.index, self.size = index, x.shape[-1]
        return _gather_last(x, index)

    def backward(self, grad):
        return (_scatter_last(grad, self.index, self.size),)


class RelativeScatter(Function):
    """out[..., i, r] = sum of x[..., i, j] over j with index[i, j] == r."""

    def forward(self, x, index, size):
        self.index = index
        return _scatter_last(x, index, size)

    def backward(self, grad):
        return (_gather_last(grad, self.index),)


# functional surface

ArrayLike = Union[Tensor, np.ndarray, float]


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """(Batched) matrix product; a batch-less operand broadcasts over the other's batch axes."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b:
        try:
            np.broadcast_shapes(lead_a, lead_b)
        except ValueError:
            raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return L2Normalize.apply(x, axis=axis, eps=eps)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    return CrossEntropy.apply(logits, labels=labels, ignore_index=ignore_index)


def gather_rows(weight: Tensor, index: np.ndarray) -> Tensor:
    """weight[index] for an integer index array of any shape (embedding lookup)."""
    return GetItem.apply(weight, index=np.asarray(index))


def relative_gather(x: Tensor, index: np.ndarray) -> Tensor:
    return RelativeGather.apply(x, index=index)


def relative_scatter(x: Tensor, index: np.ndarray, size: int) -> Tensor:
    return RelativeScatter.apply(x, index=index, size=size)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(_default_dtype) / (1.0 - rate)
    return x * keep


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Clear leaf gradients, backpropagate a scalar loss and return {leaf: gradient}."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = [node for node in _topological_order(loss) if node._ctx is None and node.requires_grad]
    for leaf in leaves:
        leaf.zero_grad()
    loss.backward()
    return {leaf: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)) for leaf in leaves}


def finite_diff_check(f: Callable[[], Tensor],
                      params: Union[Mapping[str, Tensor], Iterable[Tensor]],
                      step: float = 1e-5,
                      *,
                      max_coords: Optional[int] = None,
                      seed: int = 0) -> float:
    """
    Compare analytic gradients with central differences.

    `f` rebuilds the loss from the current parameter values. Returns the worst
    relative error |a - n| / max(|a|, |n|, floor), where floor is 1e-3 of the
    largest gradient magnitude seen (keeps roundoff on tiny entries from
    dominating). `max_coords` samples that many coordinates per tensor.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    gradients = backward(f())
    rng = np.random.default_rng(seed)

    analytic, numeric = [], []
    for t in tensors:
        grad = gradients.get(t, np.zeros_like(t.data))
        coords = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            coords = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        for flat_index in coords:
            idx = np.unravel_index(int(flat_index), t.data.shape)
            original = t.data[idx]
            t.data[idx] = original + step
            plus = float(f().data)
            t.data[idx] = original - step
            minus = float(f().data)
            t.data[idx] = original
            numeric.append((plus - minus) / (2.0 * step))
            analytic.append(float(grad[idx]))

    if not analytic:
        return 0.0
    a, n = np.asarray(analytic), np.asarray(numeric)
    floor = max(1e-3 * max(np.abs(a).max(), np.abs(n).max()), 1e-12)
    error = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    worst = float(error.max())
    logger.debug("finite_diff_check over %d coordinates: worst relative error %.3e", len(a), worst)
    return worst
