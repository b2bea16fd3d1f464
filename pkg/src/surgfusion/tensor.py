"""Dense float64 tensors with reverse-mode gradients.

Every differentiable op builds a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks that record in reverse topological order.

Ops broadcast with numpy semantics; gradients are summed back to the
operand shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MASK_VALUE = -1e30
_MASK_THRESHOLD = -1e29
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An op was configured with an invalid hyperparameter."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(RuntimeError):
    """A caller broke an autograd usage contract."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array with an optional gradient slot.

    ``data`` is always a numpy float64 array; ``grad`` is ``None`` until a
    backward pass reaches this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Gradients accumulate into leaves. A loss may only be back-propagated once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this loss; rebuild the graph first")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def abs_(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at the kink."""
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; defaults to swapping the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def fn(g):
        idx = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(out, tensors, fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def inner(a: Tensor, b: Tensor, axes=(-2, -1)) -> Tensor:
    """Frobenius inner product over ``axes`` (kept as size-1 dims)."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.sum(a.data * b.data, axis=axes, keepdims=True)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), fn)


# --------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), fn)


def softmax_rows(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, with an optional additive mask.

    Masked entries carry ``MASK_VALUE`` (or -inf). A row without any
    unmasked entry raises :class:`DegenerateRowError`.
    """
    x = a.data
    if mask is not None:
        mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        x = x + mask
    if x.size and np.any(np.max(x, axis=-1) <= _MASK_THRESHOLD):
        raise DegenerateRowError("softmax row is fully masked")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (a,), fn)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward value ``hard`` exactly; gradient passes to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {soft.shape} vs {hard.shape}")
    return _make(hard.copy(), (soft,), lambda g: (g,))


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# temporal ops; layout [C, T] or [B, C, T]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected [C, T] or [B, C, T], got {x.shape}")
    return x, False


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation over the time axis.

    ``out[c, i] = bias[c] + sum_{j,u} kernel[c, j, u] * x_pad[j, i + u]``
    """
    kernel = as_tensor(kernel)
    c_out, c_in, kw = kernel.shape
    if kw % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {kw}")
    xb, squeeze = _batched(as_tensor(x))
    b, cx, t = xb.shape
    if cx != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {xb.shape}, kernel {kernel.shape}")
    pad = kw // 2
    xp = np.pad(xb.data, ((0, 0), (0, 0), (pad, pad)))
    # cols[b, i, j, u] = xp[b, j, i + u]
    cols = np.lib.stride_tricks.sliding_window_view(xp, kw, axis=2).transpose(0, 2, 1, 3)
    cols2 = cols.reshape(b * t, c_in * kw)
    w2 = kernel.data.reshape(c_out, c_in * kw)
    out = (cols2 @ w2.T).reshape(b, t, c_out).transpose(0, 2, 1)
    parents = [xb, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def fn(g):
        g2 = g.transpose(0, 2, 1).reshape(b * t, c_out)
        gk = (g2.T @ cols2).reshape(kernel.shape)
        gcols = (g2 @ w2).reshape(b, t, c_in, kw)
        gxp = np.zeros_like(xp)
        for u in range(kw):
            gxp[:, :, u:u + t] += gcols[:, :, :, u].transpose(0, 2, 1)
        grads = [gxp[:, :, pad:pad + t], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    res = _make(out, parents, fn)
    return reshape(res, res.shape[1:]) if squeeze else res


def avgpool1d(x: Tensor) -> Tensor:
    """Kernel-2 stride-2 mean over time; an odd trailing step passes through."""
    xb, squeeze = _batched(as_tensor(x))
    b, c, t = xb.shape
    half = t // 2
    odd = t % 2
    pairs = xb.data[:, :, : 2 * half].reshape(b, c, half, 2).mean(axis=3)
    out = np.concatenate([pairs, xb.data[:, :, t - 1:]], axis=2) if odd else pairs

    def fn(g):
        gx = np.empty((b, c, t))
        gx[:, :, : 2 * half] = np.repeat(g[:, :, :half] * 0.5, 2, axis=2)
        if odd:
            gx[:, :, t - 1] = g[:, :, half]
        return (gx,)

    res = _make(out, (xb,), fn)
    return reshape(res, res.shape[1:]) if squeeze else res


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and time.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance); eval mode is a fixed affine map.
    """
    xb, squeeze = _batched(as_tensor(x))
    b, c, t = xb.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm1d: input {xb.shape}, gamma {gamma.shape}, beta {beta.shape}")
    g_ = gamma.data[None, :, None]
    if train:
        n = b * t
        mu = xb.data.mean(axis=(0, 2))
        var = xb.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xb.data - mu[None, :, None]) * inv[None, :, None]
        out = g_ * xhat + beta.data[None, :, None]

        def fn(g):
            gxhat = g * g_
            gx = inv[None, :, None] * (
                gxhat
                - gxhat.mean(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2), keepdims=True)
            )
            return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xb.data - running_mean[None, :, None]) * inv[None, :, None]
        out = g_ * xhat + beta.data[None, :, None]

        def fn(g):
            return g * g_ * inv[None, :, None], (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    res = _make(out, (xb, gamma, beta), fn)
    return reshape(res, res.shape[1:]) if squeeze else res
