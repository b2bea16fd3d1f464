"""Divergence regulated attention.

Multi-head attention in which each head blends its score matrix with the
negated scores through a learned, content-dependent factor, and is then
pushed away from the head-averaged pattern before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, init_uniform, param
from .tensor import ConfigError, ContractError, ShapeError, Tensor


class DraParams(Module):
    """Projections plus one small mixing MLP per head.

    The mixing MLP maps the pooled head query ``d_h -> max(d_h // 2, 1) -> 1``
    with GELU; its output layer starts at zero so every head begins at
    alpha = 0.5.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, eps: float = 1e-8):
        super().__init__()
        if heads < 1 or d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        self.d, self.heads, self.eps = d, heads, eps
        dh = d // heads
        hid = max(dh // 2, 1)
        self.wq = param(init_uniform(rng, (d, d), d), "wq")
        self.wk = param(init_uniform(rng, (d, d), d), "wk")
        self.wv = param(init_uniform(rng, (d, d), d), "wv")
        self.wo = param(init_uniform(rng, (d, d), d), "wo")
        self.mix_w1 = param(init_uniform(rng, (heads, dh, hid), dh), "mix_w1")
        self.mix_b1 = param(np.zeros((heads, 1, hid)), "mix_b1")
        self.mix_w2 = param(np.zeros((heads, hid, 1)), "mix_w2")
        self.mix_b2 = param(np.zeros((heads, 1, 1)), "mix_b2")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def __call__(self, q, k, v, mask=None, **hooks):
        return dra_forward(self, q, k, v, mask, **hooks)


@dataclass
class AttentionTrace:
    """Per-head intermediates of one forward call, batch-first numpy arrays.

    ``alpha`` and ``beta`` are ``[B, H]``; the matrices are ``[B, H, s_q, s_k]``.
    """

    aplus: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    afinal: np.ndarray
    weights: np.ndarray

    def segment_mass(self, bounds) -> np.ndarray:
        """Attention mass per key segment, averaged over heads: ``[B, s_q, n_seg]``."""
        w = self.weights.mean(axis=1)
        return np.stack([w[..., lo:hi].sum(axis=-1) for lo, hi in zip(bounds[:-1], bounds[1:])], axis=-1)


def score_pair(qh: Tensor, kh: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled positive scores and their exact negation."""
    dh = qh.shape[-1]
    if dh == 0:
        raise ConfigError("head dimension is zero")
    if kh.shape[-1] != dh:
        raise ShapeError(f"query/key head dims differ: {qh.shape} vs {kh.shape}")
    aplus = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
    return aplus, T.neg(aplus)


def mixing_factor(qh: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """sigmoid(MLP(mean_t qh)), shape ``[..., 1, 1]``."""
    if qh.shape[-2] == 0:
        raise ContractError("mixing factor needs a non-empty query sequence")
    pooled = T.mean(qh, axis=-2, keepdims=True)
    hidden = T.gelu(T.add(T.matmul(pooled, w1), b1))
    return T.sigmoid(T.add(T.matmul(hidden, w2), b2))


def mix(aplus: Tensor, alpha) -> Tensor:
    """alpha * A+ + (1 - alpha) * (-A+), written as (2 alpha - 1) * A+."""
    return T.mul(T.sub(T.scale(T.as_tensor(alpha), 2.0), 1.0), aplus)


def diversify(amix, eps: float = 1e-8, head_axis: int = -3) -> tuple[Tensor, Tensor, dict]:
    """Push each head away from the mean head pattern.

    ``amix`` is either a list of per-head tensors or one tensor whose
    ``head_axis`` indexes heads. Returns the diversified scores, the
    per-head diversity factors and a dict with ``p_main``, ``coef`` and
    ``adivg`` for inspection.
    """
    if isinstance(amix, (list, tuple)):
        amix = T.concat([T.reshape(a, (1,) + a.shape) for a in amix], axis=0)
        head_axis = 0
    p_main = T.mean(amix, axis=head_axis, keepdims=True)
    coef = T.div(T.inner(amix, p_main), T.add(T.inner(p_main, p_main), eps))
    beta = T.sigmoid(T.sub(1.0, coef))
    adivg = T.sub(amix, T.mul(coef, p_main))
    afinal = T.add(amix, T.mul(beta, adivg))
    return afinal, beta, {"p_main": p_main, "coef": coef, "adivg": adivg}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _check_mask(mask, b: int, sq: int, sk: int) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape[-2:] != (sq, sk):
        raise ShapeError(f"mask shape {m.shape} does not match scores ({sq}, {sk})")
    if not np.all((m == 0.0) | (m <= T.MASK_VALUE)):
        raise ValueError("mask entries must be 0 or the mask sentinel")
    m = m.reshape((-1, 1, sq, sk)) if m.ndim == 3 else m.reshape((1, 1, sq, sk))
    if m.shape[0] not in (1, b):
        raise ShapeError(f"mask batch {m.shape[0]} does not match {b}")
    return m


def dra_forward(
    params: DraParams,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask=None,
    *,
    force_alpha: float | None = None,
    diversify_heads: bool = True,
) -> tuple[Tensor, AttentionTrace]:
    """Attend from ``q`` ``[(B,) s_q, d]`` over ``k``/``v`` ``[(B,) s_k, d]``.

    ``mask`` is additive (0 or ``MASK_VALUE``), shaped ``[(B,) s_q, s_k]``.
    Masked entries are also zeroed before diversification, so attending
    over a masked key set matches attending over the unmasked keys alone.
    ``force_alpha`` pins every head's mixing factor and
    ``diversify_heads=False`` skips the divergence step; both are test hooks.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
    b, sq, d = q.shape
    sk = k.shape[1]
    if d != params.d or k.shape[2] != d or v.shape[2] != d:
        raise ShapeError(f"DRA width {params.d}: got q {q.shape}, k {k.shape}, v {v.shape}")
    if v.shape[1] != sk:
        raise ShapeError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    h = params.heads
    qh = _split_heads(T.matmul(q, params.wq), h)
    kh = _split_heads(T.matmul(k, params.wk), h)
    vh = _split_heads(T.matmul(v, params.wv), h)

    aplus, _ = score_pair(qh, kh)
    if force_alpha is None:
        alpha = mixing_factor(qh, params.mix_w1, params.mix_b1, params.mix_w2, params.mix_b2)
    else:
        alpha = Tensor(np.full((b, h, 1, 1), float(force_alpha)))
    amix = mix(aplus, alpha)
    m = None if mask is None else _check_mask(mask, b, sq, sk)
    if m is not None:
        # masked keys are absent: keep them out of the head statistics too
        amix = T.mul(amix, Tensor((m == 0).astype(np.float64)))
    if diversify_heads:
        afinal, beta, _ = diversify(amix, params.eps, head_axis=1)
    else:
        afinal, beta = amix, Tensor(np.full((b, h, 1, 1), np.nan))

    weights = T.softmax_rows(afinal, m)
    heads = T.matmul(weights, vh)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, sq, d))
    out = T.matmul(merged, params.wo)
    if squeeze:
        out = T.reshape(out, (sq, d))
    trace = AttentionTrace(
        aplus=aplus.data,
        alpha=alpha.data.reshape(b, h),
        beta=beta.data.reshape(b, h),
        afinal=afinal.data,
        weights=weights.data,
    )
    return out, trace
