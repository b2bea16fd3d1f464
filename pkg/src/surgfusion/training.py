"""Loss, label scaling, optimizers and the two-phase training protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .branches import unimodal_forward
from .data import MODALITIES, VideoRecord, fit_length, stack_modality
from .fusion import SurgFusionNet, fusion_forward
from .tensor import ConfigError, ContractError, Tensor

log = logging.getLogger(__name__)


class RangeError(ValueError):
    """A raw label lies outside the scaler bounds."""


class TrainingDiverged(RuntimeError):
    def __init__(self, phase: str, epoch: int, batch: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} in phase {phase}, epoch {epoch}, batch {batch}, lr {lr:.3g}")
        self.phase, self.epoch, self.batch, self.lr = phase, epoch, batch, lr


# --------------------------------------------------------------------------
# loss and labels


def hybrid_loss(pred, target, alpha: float = 0.5) -> Tensor:
    """``alpha * MSE + (1 - alpha) * MAE`` averaged over the batch."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"loss alpha must be in [0, 1], got {alpha}")
    diff = T.sub(T.as_tensor(pred), T.as_tensor(target))
    return T.add(T.scale(T.mean(T.mul(diff, diff)), alpha), T.scale(T.mean(T.abs_(diff)), 1.0 - alpha))


@dataclass(frozen=True)
class LabelScaler:
    """Affine map of raw scores onto [0, 0.5]."""

    y_min: float = 6.0
    y_max: float = 30.0

    def __post_init__(self):
        if not self.y_min < self.y_max:
            raise ConfigError(f"label bounds must satisfy y_min < y_max, got ({self.y_min}, {self.y_max})")

    def normalize(self, y):
        y = np.asarray(y, dtype=np.float64)
        if np.any((y < self.y_min) | (y > self.y_max)):
            raise RangeError(f"label outside [{self.y_min}, {self.y_max}]: {y}")
        out = 0.5 * (y - self.y_min) / (self.y_max - self.y_min)
        return float(out) if out.ndim == 0 else out

    def denormalize(self, y):
        out = self.y_min + 2.0 * np.asarray(y, dtype=np.float64) * (self.y_max - self.y_min)
        return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# schedules and optimizers


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        raise ConfigError("cosine schedule needs a positive horizon")
    t = min(max(t, 0.0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def _check(w, g, *state):
    for s in (g,) + state:
        if np.shape(s) != np.shape(w):
            raise ContractError(f"optimizer shape mismatch: weight {np.shape(w)} vs {np.shape(s)}")


def sgd_momentum_step(w, grad, velocity, lr, momentum=0.9, weight_decay=1e-4):
    """Coupled decay: ``v = mu v + g + wd w``; ``w -= lr v``. Returns ``(w, v)``."""
    _check(w, grad, velocity)
    v = momentum * velocity + grad + weight_decay * w
    return w - lr * v, v


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(w, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
    """Adam moments with bias correction plus decoupled decay. Returns ``(w, state)``."""
    _check(w, grad, state.m, state.v)
    t = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    w = w - lr * weight_decay * w
    w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return w, AdamState(m, v, t)


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.state = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            p.data, self.state[i] = sgd_momentum_step(p.data, g, self.state[i], lr, self.momentum, self.weight_decay)


class AdamW:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.state = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            p.data, self.state[i] = adamw_step(p.data, g, self.state[i], lr, *self.betas, self.eps,
                                               self.weight_decay)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm > 0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)
    return total


# --------------------------------------------------------------------------
# protocol


@dataclass
class PhaseConfig:
    optimizer: str
    lr_max: float
    lr_min: float
    epochs: int
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def validate(self, name: str) -> None:
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"{name}.optimizer must be 'sgd' or 'adamw'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"{name}: epochs and batch_size must be >= 1")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"{name}: need 0 <= lr_min <= lr_max")


def _phase1_default():
    return PhaseConfig("sgd", 1e-2, 5e-6, 100)


def _phase2_default():
    return PhaseConfig("adamw", 1e-3, 5e-6, 100)


@dataclass
class TrainConfig:
    phase1: PhaseConfig = field(default_factory=_phase1_default)
    phase2: PhaseConfig = field(default_factory=_phase2_default)
    loss_alpha: float = 0.5
    seed: int = 0
    segments: int | None = None
    grad_clip: float | None = None

    def validate(self) -> None:
        self.phase1.validate("phase1")
        self.phase2.validate("phase2")
        if not 0.0 <= self.loss_alpha <= 1.0:
            raise ConfigError(f"loss_alpha must be in [0, 1], got {self.loss_alpha}")
        if self.segments is not None and self.segments < 1:
            raise ConfigError("segments must be >= 1")


PAPER_TRAIN = dict(epochs=300, batch_size=16)


def _make_optimizer(cfg: PhaseConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.momentum, cfg.weight_decay)
    return AdamW(params, weight_decay=cfg.weight_decay)


def _batch_features(records, modality, segments, rng) -> np.ndarray:
    if segments is None:
        return stack_modality(records, modality)
    out = []
    for r in records:
        x = np.asarray(r.features[modality], dtype=np.float64)
        start = int(rng.integers(0, x.shape[0] - segments + 1)) if x.shape[0] > segments else 0
        out.append(fit_length(x[start:], segments))
    return np.stack(out)


def _run_epochs(phase: str, cfg: PhaseConfig, n: int, params, step_fn, rng, loss_alpha, grad_clip, logbook,
                on_epoch=None):
    opt = _make_optimizer(cfg, params)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = rng.permutation(n)
        losses = []
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            for p in params:
                p.grad = None
            loss = step_fn(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(phase, epoch, bi, lr, value)
            loss.backward()
            if grad_clip:
                clip_grad_norm(params, grad_clip)
            opt.step(lr)
            losses.append(value)
        rec = {"phase": phase, "epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        logbook.append(rec)
        log.debug("%s", rec)
        if on_epoch is not None:
            on_epoch(phase, epoch)


def train_unimodal(model: SurgFusionNet, records: Sequence[VideoRecord], cfg: TrainConfig, logbook: list,
                   scaler: LabelScaler, on_epoch=None) -> None:
    """Phase 1: each branch regresses the normalized label on its own."""
    y = scaler.normalize([r.raw_label for r in records])
    for j, m in enumerate(MODALITIES):
        branch = model.branch(m)
        branch.train()
        rng = np.random.default_rng([cfg.seed, 100 + j])

        def step(idx, branch=branch, m=m, rng=rng):
            x = _batch_features([records[i] for i in idx], m, cfg.segments, rng)
            score, _ = unimodal_forward(branch, x)
            return hybrid_loss(score, Tensor(y[idx]), cfg.loss_alpha)

        _run_epochs(f"1-{m}", cfg.phase1, len(records), branch.trainable(), step, rng, cfg.loss_alpha,
                    cfg.grad_clip, logbook, on_epoch)
        branch.freeze()


def train_fusion(model: SurgFusionNet, records: Sequence[VideoRecord], cfg: TrainConfig, logbook: list,
                 scaler: LabelScaler, on_epoch=None) -> None:
    """Phase 2: frozen branches feed the fusion branch, which alone is trained."""
    for m in MODALITIES:
        model.branch(m).freeze()
    y = scaler.normalize([r.raw_label for r in records])
    rng = np.random.default_rng([cfg.seed, 200])
    fusion = model.fusion
    fusion.train()
    fusion.rng = np.random.default_rng([cfg.seed, 201])
    cache = None
    if cfg.segments is None:
        cache = model.unimodal_features({m: stack_modality(records, m) for m in MODALITIES})

    def step(idx):
        if cache is not None:
            feats = {m: [Tensor(t.data[idx]) for t in cache[m]] for m in MODALITIES}
        else:
            sub = [records[i] for i in idx]
            feats = model.unimodal_features({m: _batch_features(sub, m, cfg.segments, rng) for m in MODALITIES})
        score, _ = fusion_forward(fusion, feats)
        return hybrid_loss(score, Tensor(y[idx]), cfg.loss_alpha)

    _run_epochs("2", cfg.phase2, len(records), fusion.trainable(), step, rng, cfg.loss_alpha, cfg.grad_clip,
                logbook, on_epoch)
    fusion.eval()


def train_two_phase(cfg: TrainConfig, records: Sequence[VideoRecord], model: SurgFusionNet,
                    on_epoch: Callable[[str, int], None] | None = None) -> tuple[SurgFusionNet, list[dict]]:
    """Train the unimodal branches, freeze them, then train the fusion branch.

    Returns the model and a per-epoch log of ``{phase, epoch, lr, loss}``.
    """
    cfg.validate()
    if not records:
        raise ConfigError("no training records")
    scaler = LabelScaler(model.cfg.y_min, model.cfg.y_max)
    logbook: list[dict] = []
    train_unimodal(model, records, cfg, logbook, scaler, on_epoch)
    train_fusion(model, records, cfg, logbook, scaler, on_epoch)
    return model, logbook


def predict(model: SurgFusionNet, records: Sequence[VideoRecord], scaler: LabelScaler | None = None
            ) -> dict[str, np.ndarray]:
    """Raw-unit predictions of the fusion branch and each unimodal branch (eval mode).

    Videos are run one at a time so every segment is used.
    """
    scaler = scaler or LabelScaler(model.cfg.y_min, model.cfg.y_max)
    model.eval()
    out = {k: [] for k in ("fusion",) + MODALITIES}
    with T.no_grad():
        for r in records:
            feats = {m: np.asarray(r.features[m], dtype=np.float64)[None] for m in MODALITIES}
            for m in MODALITIES:
                s, _ = unimodal_forward(model.branch(m), feats[m])
                out[m].append(s.data[0])
            s, _ = fusion_forward(model.fusion, model.unimodal_features(feats))
            out["fusion"].append(s.data[0])
    return {k: np.asarray(scaler.denormalize(np.array(v))) for k, v in out.items()}
