"""Dense tensors with a reverse-mode automatic differentiation tape.

Every numeric quantity in the package is a :class:`Tensor` wrapping a numpy
array. Operations record their inputs and an adjoint closure on an implicit
tape (the graph of ``_parents`` links); :func:`backward` replays the tape in
reverse topological order and accumulates gradients into ``requires_grad``
leaves. Repeated ``backward`` calls sum into ``.grad`` until ``zero_grad``.

Precision is a process-global setting (:func:`set_default_dtype`): float64
for correctness work, float32 as an opt-in for faster training. Broadcasting
is deliberately restricted to scalars and trailing-shape ("row bias") cases;
anything looser raises ``ShapeError`` instead of silently expanding.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "set_default_dtype",
    "default_dtype",
    "no_grad",
    "backward",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "gelu",
    "softmax",
    "layer_norm",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "swap_last",
    "concat",
    "slice_axis",
    "tile_batch",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """An operation was called outside its stated preconditions."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_STATE = {"dtype": np.float64, "grad": True}

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    """Set the global scalar precision (numpy float32 or float64)."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported precision {dt}; use float32 or float64")
    _STATE["dtype"] = dt.type


def default_dtype():
    return _STATE["dtype"]


class no_grad:
    """Context manager that suspends tape recording (forward-only evaluation)."""

    def __enter__(self):
        self._prev = _STATE["grad"]
        _STATE["grad"] = False
        return self

    def __exit__(self, *exc):
        _STATE["grad"] = self._prev
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    # min/max poison on NaN and catch +/-inf; two scalar reductions beat
    # a full isfinite mask on the hot path
    if data.size == 0:
        return
    lo, hi = data.min(), data.max()  # NaN poisons both
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")


class Tensor:
    """A dense n-dimensional array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=default_dtype())
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

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
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A leaf view of the same values, cut off from the tape."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are plain Python numbers, arrays must be Tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not a primitive; divide by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


_MOVEMENT_OPS = frozenset({"reshape", "transpose", "concat", "slice", "tile_batch", "neg"})


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if op not in _MOVEMENT_OPS:  # data movement cannot break finiteness
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _accumulate(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over leading axes introduced by trailing-shape broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    # scalar against anything, or the smaller shape a trailing suffix of the larger
    if b.ndim == 0 or a.ndim == 0:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are neither equal nor scalar/suffix-broadcastable")


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(np.asarray(x, dtype=default_dtype()))
    raise ShapeError(f"expected a Tensor or scalar, got {type(x).__name__}")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")
    data = a.data + b.data

    def bw(g, grads):
        _accumulate(grads, a, _reduce_to(g, a.shape))
        _accumulate(grads, b, _reduce_to(g, b.shape))

    return _result(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "sub")
    data = a.data - b.data

    def bw(g, grads):
        _accumulate(grads, a, _reduce_to(g, a.shape))
        _accumulate(grads, b, _reduce_to(-g, b.shape))

    return _result(data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")
    data = a.data * b.data

    def bw(g, grads):
        _accumulate(grads, a, _reduce_to(g * b.data, a.shape))
        _accumulate(grads, b, _reduce_to(g * a.data, b.shape))

    return _result(data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    def bw(g, grads):
        _accumulate(grads, a, -g)

    return _result(-a.data, (a,), bw, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul operands must be Tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g, grads):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(grads, a, _reduce_to(ga, a.shape))
        _accumulate(grads, b, _reduce_to(gb, b.shape))

    return _result(data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map ``x @ w + b`` (bias broadcast over leading axes)."""
    if x.ndim < 2 or w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"linear expects x[..,k] w[k,n] b[n], got {x.shape} {w.shape} {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear inner extents disagree: {x.shape} x {w.shape}")
    data = np.matmul(x.data, w.data) + b.data

    def bw(g, grads):
        lead = tuple(range(g.ndim - 1))
        _accumulate(grads, b, g.sum(axis=lead))
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        _accumulate(grads, w, x2.T @ g2)
        _accumulate(grads, x, np.matmul(g, w.data.T))

    return _result(data, (x, w, b), bw, "linear")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * data)

    return _result(data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g / a.data)

    return _result(data, (a,), bw, "log")


def sigmoid(a: Tensor) -> Tensor:
    data = special.expit(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * data * (1.0 - data))

    return _result(data, (a,), bw, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) computed without overflow for large |x|
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g, grads):
        _accumulate(grads, a, g * special.expit(x))

    return _result(data, (a,), bw, "softplus")


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, no tanh shortcut)."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    data = x * cdf

    def bw(g, grads):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accumulate(grads, a, g * (cdf + x * pdf))

    return _result(data, (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(grads, a, (g - inner) * data)

    return _result(data, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def bw(g, grads):
        lead = tuple(range(g.ndim - 1))
        _accumulate(grads, bias, g.sum(axis=lead))
        _accumulate(grads, gain, (g * xhat).sum(axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(grads, x, (dxhat - m1 - xhat * m2) * inv)

    return _result(data, (x, gain, bias), bw, "layer_norm")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, grads):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accumulate(grads, a, np.broadcast_to(gg, a.shape).copy())

    return _result(data, (a,), bw, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g, grads):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accumulate(grads, a, np.broadcast_to(gg, a.shape) / count)

    return _result(data, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bw(g, grads):
        _accumulate(grads, a, g.reshape(a.shape))

    return _result(data, (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bw(g, grads):
        _accumulate(grads, a, np.transpose(g, inverse))

    return _result(data, (a,), bw, "transpose")


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes (matrix transpose on the trailing block)."""
    if a.ndim < 2:
        raise ShapeError(f"swap_last needs >=2-d input, got {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g, grads):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accumulate(grads, t, g[tuple(idx)])
            offset += n

    return _result(data, tuple(tensors), bw, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bw(g, grads):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(grads, a, full)

    return _result(data, (a,), bw, "slice")


def tile_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis (batch expansion of shared rows)."""
    if n < 1:
        raise ShapeError("tile_batch needs n >= 1")
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def bw(g, grads):
        _accumulate(grads, a, g.sum(axis=0))

    return _result(data, (a,), bw, "tile_batch")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    seen.add(id(root))
    while stack:
        node, child = stack[-1]
        if child < len(node._parents):
            stack[-1] = (node, child + 1)
            parent = node._parents[child]
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar. Gradients accumulate across calls; leaves the
    loss does not depend on are left untouched (their gradient is zero).
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            node._backward(g, grads)
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g
