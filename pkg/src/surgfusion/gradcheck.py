"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_coords: int
    worst: tuple[str, tuple[int, ...]] | None = None
    per_leaf: dict[str, float] = field(default_factory=dict)


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``f`` rebuilds the graph from ``leaves`` and returns a scalar. The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    With ``max_coords`` set, at most that many coordinates per leaf are
    sampled (using ``rng``).
    """
    base = f()
    again = f()
    if base.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {base.shape}")
    if not np.array_equal(base.data, again.data):
        raise ContractError("function is not deterministic: two evaluations differ")

    for leaf in leaves:
        leaf.grad = None
    base.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    rng = rng or np.random.default_rng(0)
    worst_err, worst_at, n_coords = 0.0, None, 0
    per_leaf: dict[str, float] = {}
    for li, leaf in enumerate(leaves):
        label = leaf.name or f"leaf{li}"
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        leaf_err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[li].reshape(-1)[c]
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            n_coords += 1
            leaf_err = max(leaf_err, err)
            if err > worst_err:
                worst_err = err
                worst_at = (label, np.unravel_index(c, leaf.shape))
        per_leaf[label] = leaf_err
        leaf.grad = None
    return GradCheckReport(worst_err, worst_err <= tol, tol, n_coords, worst_at, per_leaf)


def jitter_parameters(params: Sequence[Tensor], rng: np.random.Generator, scale: float = 0.3) -> None:
    """Add Gaussian noise to every parameter in place.

    Fresh models sit at symmetric points (zero biases, zero residual
    branches, alpha = 0.5) where many true gradients are exactly zero and
    central differences see only round-off; checks run at a generic point.
    """
    for p in params:
        p.data = p.data + scale * rng.normal(size=p.shape)
