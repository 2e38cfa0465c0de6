"""Dense fp64 tensors with reverse-mode differentiation.

Every differentiable op records its inputs and a local adjoint rule on the
output tensor. ``DTensor.backward`` walks the recorded graph in reverse
topological order exactly once and accumulates gradients.

Broadcasting is deliberately narrow: scalar-with-tensor and a per-row bias
over the last axis. Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_madds_counter: contextvars.ContextVar["MAddsCounter | None"] = contextvars.ContextVar(
    "madds_counter", default=None
)


class DTensor:
    """A dense float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[DTensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DTensor":
        return DTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}{flag})"

    # -- graph traversal --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor.

        Only rank-0 tensors may be differentiated without an explicit seed.
        """
        if grad is None:
            if self.ndim != 0:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones((), dtype=np.float64)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, DTensor):
            raise DimensionError("tensor / tensor is not supported; use mul with an explicit reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root: DTensor) -> list[DTensor]:
    order: list[DTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> DTensor:
    return DTensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(x)


def _make(data: np.ndarray, parents: tuple[DTensor, ...], backward) -> DTensor:
    out = DTensor.__new__(DTensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def zero_grad(params: Iterable[DTensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Multiply-add instrumentation
# ---------------------------------------------------------------------------


@dataclass
class MAddsCounter:
    """Tally of multiply-accumulates executed by matmul and convolution ops."""

    total: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_executed_madds() -> Iterator[MAddsCounter]:
    counter = MAddsCounter()
    token = _madds_counter.set(counter)
    try:
        yield counter
    finally:
        _madds_counter.reset(token)


def _tally(op: str, n: int) -> None:
    counter = _madds_counter.get()
    if counter is not None:
        counter.add(op, n)


# ---------------------------------------------------------------------------
# Elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def _is_scalar(x) -> bool:
    if isinstance(x, DTensor):
        return x.ndim == 0
    return np.ndim(x) == 0


def add(a, b) -> DTensor:
    """``a + b`` for equal shapes, a scalar operand, or a per-row bias on the last axis."""
    if not isinstance(a, DTensor):
        a, b = b, a
    if not isinstance(b, DTensor):
        if not _is_scalar(b):
            raise DimensionError(f"cannot add non-scalar constant of shape {np.shape(b)} to {a.shape}")
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 0 or a.ndim == 0:
        t, s = (a, b) if b.ndim == 0 else (b, a)
        return _make(t.data + s.data, (t, s), lambda g: (g, np.sum(g)))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return add(b, a)
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a: DTensor) -> DTensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> DTensor:
    if isinstance(b, DTensor):
        return add(a, neg(b))
    return add(a, -float(b))


def scale(a: DTensor, c: float) -> DTensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> DTensor:
    """Elementwise product of equal-shaped tensors, or tensor times scalar."""
    if not isinstance(a, DTensor):
        a, b = b, a
    if not isinstance(b, DTensor):
        if not _is_scalar(b):
            raise DimensionError(f"cannot multiply by non-scalar constant of shape {np.shape(b)}")
        return scale(a, b)
    if a.shape != b.shape:
        if b.ndim == 0:
            return _make(a.data * b.data, (a, b), lambda g: (g * b.data, np.sum(g * a.data)))
        if a.ndim == 0:
            return mul(b, a)
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: DTensor) -> DTensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: DTensor) -> DTensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _make(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def relu(x: DTensor) -> DTensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def glu(x: DTensor) -> DTensor:
    """Gated linear unit over the last axis: ``a * sigmoid(b)`` for ``x = [a | b]``."""
    c2 = x.shape[-1]
    if c2 % 2:
        raise DimensionError(f"glu needs an even last axis, got {c2}")
    c = c2 // 2
    a, b = x.data[..., :c], x.data[..., c:]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return _make(a * s, (x,), backward)


def exp(x: DTensor) -> DTensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: DTensor) -> DTensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sum(x: DTensor, axis: int | None = None) -> DTensor:  # noqa: A001
    if axis is None:
        shape = x.shape
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axis)
    shape = x.shape
    return _make(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x: DTensor, axis: int | None = None) -> DTensor:
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim)]
    return scale(sum(x, axis), 1.0 / n)


def masked_fill(x: DTensor, mask: np.ndarray, value: float) -> DTensor:
    """Replace entries where ``mask`` is true with a constant (no gradient flows there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)
    keep = ~mask
    return _make(out, (x,), lambda g: (g * keep,))


def dropout(x: DTensor, p: float, rng: np.random.Generator | None = None) -> DTensor:
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    rng = rng or np.random.default_rng()
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reshape(x: DTensor, shape: Sequence[int]) -> DTensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc
    old = x.shape
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: DTensor, axes: Sequence[int] | None = None) -> DTensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: DTensor) -> DTensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def pad(x: DTensor, axis: int, before: int, after: int, value: float = 0.0) -> DTensor:
    axis = _norm_axis(axis, x.ndim)
    if before < 0 or after < 0:
        raise DimensionError("padding amounts must be non-negative")
    if before == 0 and after == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    out = np.pad(x.data, widths, constant_values=value)
    n = x.shape[axis]

    def backward(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + n)
        return (g[tuple(idx)],)

    return _make(out, (x,), backward)


def slice_axis(x: DTensor, axis: int, start: int | None = None, stop: int | None = None,
               step: int | None = None) -> DTensor:
    axis = _norm_axis(axis, x.ndim)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop, step)
    idx = tuple(idx)
    out = x.data[idx]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def concat(tensors: Sequence[DTensor], axis: int = 0) -> DTensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    axis = _norm_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: DTensor, b: DTensor) -> DTensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, p]`` (shared) or
    ``[..., k, p]`` with the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _tally("matmul", out.size * a.shape[-1])

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: DTensor, weight: DTensor, bias: DTensor | None = None) -> DTensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def softmax(x: DTensor, axis: int = -1) -> DTensor:
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: DTensor, axis: int = -1) -> DTensor:
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


LN_EPS = 1e-5


def layer_norm(x: DTensor, gamma: DTensor, beta: DTensor, eps: float = LN_EPS) -> DTensor:
    """Normalise over the last axis, then apply a per-feature affine map."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty feature axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    """Return ``(n_out, left, right)`` for zero 'same' padding, ``n_out = ceil(n / stride)``.

    The left pad is always ``(k - 1) // 2`` so output ``j`` is centred on input ``j * stride``.
    """
    n_out = -(-n // stride)
    left = (k - 1) // 2
    right = max((n_out - 1) * stride + k - n - left, 0)
    return n_out, left, right


def conv1d(x: DTensor, weight: DTensor, bias: DTensor | None = None, stride: int = 1,
           mode: str = "depthwise") -> DTensor:
    """1-D convolution along axis 0 of ``x`` (``[n, c_in]``) with same padding.

    weight shapes: depthwise ``[k, c]``, pointwise ``[c_in, c_out]``,
    dense ``[k, c_in, c_out]``.
    """
    if x.ndim != 2:
        raise DimensionError(f"conv1d expects [n, c] input, got {x.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if mode == "pointwise":
        if weight.ndim != 2:
            raise DimensionError(f"pointwise weight must be [c_in, c_out], got {weight.shape}")
        xs = slice_axis(x, 0, None, None, stride) if stride > 1 else x
        return linear(xs, weight, bias)
    if mode not in ("depthwise", "dense"):
        raise ConfigError(f"unknown conv1d mode {mode!r}")

    k = weight.shape[0]
    if mode == "depthwise":
        if k % 2 == 0:
            raise ConfigError(f"depthwise kernel size must be odd, got {k}")
        if weight.shape != (k, x.shape[1]):
            raise DimensionError(f"depthwise weight {weight.shape} does not match input channels {x.shape[1]}")
    elif weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"dense weight {weight.shape} does not match input {x.shape}")

    n, c = x.shape
    n_out, left, right = same_padding(n, k, stride)
    xp = np.pad(x.data, ((left, right), (0, 0)))
    idx = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :]
    win = xp[idx]  # [n_out, k, c]
    wd = weight.data
    if mode == "depthwise":
        out = np.einsum("nkc,kc->nc", win, wd)
        _tally("conv1d_depthwise", n_out * k * c)
    else:
        out = np.tensordot(win, wd, axes=([1, 2], [0, 1]))
        _tally("conv1d_dense", out.size * k * c)

    def backward(g):
        if mode == "depthwise":
            gwin = g[:, None, :] * wd[None, :, :]
            gw = np.einsum("nkc,nc->kc", win, g)
        else:
            gwin = np.tensordot(g, wd, axes=([1], [2]))
            gw = np.tensordot(win, g, axes=([0], [0]))
        gxp = np.zeros_like(xp)
        np.add.at(gxp, idx, gwin)
        return gxp[left:left + n], gw

    out_t = _make(out, (x, weight), backward)
    return add(out_t, bias) if bias is not None else out_t


def conv2d(x: DTensor, weight: DTensor, bias: DTensor | None = None, stride: int = 2) -> DTensor:
    """2-D convolution over the first two axes of ``x`` (``[t, f, c_in]``), same padding.

    weight is ``[kt, kf, c_in, c_out]``; output is ``[ceil(t/s), ceil(f/s), c_out]``.
    """
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects [t, f, c] input, got {x.shape}")
    kt, kf, c_in, c_out = weight.shape
    if c_in != x.shape[2]:
        raise DimensionError(f"conv2d weight {weight.shape} does not match input channels {x.shape[2]}")
    t, f, _ = x.shape
    t_out, tl, tr = same_padding(t, kt, stride)
    f_out, fl, fr = same_padding(f, kf, stride)
    xp = np.pad(x.data, ((tl, tr), (fl, fr), (0, 0)))
    ti = (np.arange(t_out)[:, None] * stride + np.arange(kt)[None, :])[:, None, :, None]
    fi = (np.arange(f_out)[:, None] * stride + np.arange(kf)[None, :])[None, :, None, :]
    win = xp[ti, fi]  # [t_out, f_out, kt, kf, c_in]
    wd = weight.data
    out = np.tensordot(win, wd, axes=([2, 3, 4], [0, 1, 2]))
    _tally("conv2d", out.size * kt * kf * c_in)

    def backward(g):
        gw = np.tensordot(win, g, axes=([0, 1], [0, 1]))
        gwin = np.tensordot(g, wd, axes=([2], [3]))
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (ti, fi), gwin)
        return gxp[tl:tl + t, fl:fl + f], gw

    out_t = _make(out, (x, weight), backward)
    return add(out_t, bias) if bias is not None else out_t


def avg_pool(x: DTensor, stride: int = 2) -> DTensor:
    """Average pooling along axis 0 with window == stride; a ragged tail averages its valid rows."""
    n = x.shape[0]
    n_out = -(-n // stride)
    extra = n_out * stride - n
    rest = x.shape[1:]
    xp = np.concatenate([x.data, np.zeros((extra,) + rest)], axis=0) if extra else x.data
    counts = np.full(n_out, float(stride))
    counts[-1] = stride - extra
    counts = counts.reshape((n_out,) + (1,) * len(rest))
    out = xp.reshape((n_out, stride) + rest).sum(axis=1) / counts

    def backward(g):
        gx = np.repeat(g / counts, stride, axis=0)
        return (gx[:n],)

    return _make(out, (x,), backward)


def parameters_of(params: Iterable[DTensor]) -> list[DTensor]:
    return [p for p in params if p.requires_grad]
