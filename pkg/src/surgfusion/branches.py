"""Unimodal branches: three residual 1-D conv stages and a regression head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import MODALITIES, FeatureSequence
from .nn import Linear, Module, init_uniform, param
from .tensor import ConfigError, ShapeError, Tensor


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = param(np.ones(channels), "gamma")
        self.beta = param(np.zeros(channels), "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             train=self.training, momentum=self.momentum, eps=self.eps)


class ConvBNGelu(Module):
    def __init__(self, d: int, width: int, rng: np.random.Generator, zero: bool = False,
                 momentum: float = 0.1):
        super().__init__()
        shape = (d, d, width)
        self.kernel = param(init_uniform(rng, shape, d * width), "kernel")
        self.bias = param(np.zeros(d), "bias")
        self.bn = BatchNorm1d(d, momentum)
        if zero:
            # zero scale: normalized output is beta = 0 and GELU(0) = 0, so the stage emits zeros
            self.bn.gamma.data[:] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return T.gelu(self.bn(T.conv1d(x, self.kernel, self.bias)))


class StageParams(Module):
    """Residual block weights; the second stage starts with a zero batch-norm scale so the block is an identity."""

    def __init__(self, d: int, rng: np.random.Generator, width: int = 3, momentum: float = 0.1):
        super().__init__()
        self.d = d
        self.conv1 = ConvBNGelu(d, width, rng, momentum=momentum)
        self.conv2 = ConvBNGelu(d, width, rng, zero=True, momentum=momentum)


def residual_block(x: Tensor, p: StageParams) -> Tensor:
    """``x + Conv(Conv(x))`` on ``[(B,) d, T]``."""
    if x.shape[-2] != p.d:
        raise ConfigError(f"residual block expects {p.d} channels, got input {x.shape}")
    return T.add(x, p.conv2(p.conv1(x)))


def stage_forward(x: Tensor, p: StageParams) -> Tensor:
    return T.avgpool1d(residual_block(x, p))


class RegressionHead(Module):
    """Temporal mean, dropout, linear d->1, sigmoid.

    Dropout acts on the pooled features rather than the scalar logit.
    """

    def __init__(self, d: int, rng: np.random.Generator, dropout: float = 0.3):
        super().__init__()
        self.linear = Linear(d, 1, rng)
        self.dropout = dropout


def regression_head(x: Tensor, head: RegressionHead, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Score in (0, 1) per batch element from ``[(B,) d, T]``."""
    if x.shape[-1] < 1:
        raise ShapeError("regression head needs T >= 1")
    pooled = T.mean(x, axis=-1)
    pooled = T.dropout(pooled, head.dropout, train, rng)
    logit = head.linear(pooled)
    return T.sigmoid(T.reshape(logit, logit.shape[:-1]))


class UnimodalBranch(Module):
    def __init__(self, modality: str, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}")
        self.modality = modality
        self.d = cfg.d
        self.stages = [StageParams(cfg.d, rng, cfg.kernel_width, cfg.bn_momentum) for _ in range(3)]
        self.head = RegressionHead(cfg.d, rng, cfg.dropout)
        self.frozen = False
        self.rng = rng

    def freeze(self) -> "UnimodalBranch":
        super().freeze()
        self.frozen = True
        return self.eval()


def _as_batch(features) -> tuple[np.ndarray, bool]:
    if isinstance(features, FeatureSequence):
        features = features.data
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"features must be [T, d] or [B, T, d], got {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("empty feature sequence (T == 0)")
    return x, single


def unimodal_forward(branch: UnimodalBranch, features) -> tuple[Tensor, list[Tensor]]:
    """Score and the three post-stage feature maps ``[B, d, T_i]``.

    ``features`` is a :class:`FeatureSequence`, ``[T, d]`` or ``[B, T, d]``;
    the score has shape ``[B]`` (``[]`` for a single sequence).
    """
    x, single = _as_batch(features)
    if x.shape[2] != branch.d:
        raise ShapeError(f"{branch.modality} branch expects d={branch.d}, got {x.shape}")
    h = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1)))
    outputs = []
    for p in branch.stages:
        h = stage_forward(h, p)
        outputs.append(h)
    score = regression_head(h, branch.head, branch.training, branch.rng)
    if single:
        score = T.reshape(score, ())
    return score, outputs
