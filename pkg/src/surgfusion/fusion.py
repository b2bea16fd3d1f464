"""Multimodal fusion branch.

Zero-initialised fusion features pass through three stages. Each stage
runs a residual block, then a cross-stage fusion block (attention over the
concatenated unimodal stage outputs), then a dynamic fusion block
(attention over K candidate modality mixtures, one of which a policy
network unmasks). The result is pooled before the next stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .branches import RegressionHead, StageParams, UnimodalBranch, regression_head, residual_block, unimodal_forward
from .config import ModelConfig
from .data import MODALITIES
from .dra import AttentionTrace, DraParams, dra_forward
from .nn import Linear, Module, param
from .tensor import ConfigError, ShapeError, Tensor


class FusionNet(Module):
    """Linear map from pooled modality features to three mixing logits."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(3 * d, 3, rng)


class PolicyNet(Module):
    def __init__(self, d: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(d, k, rng)
        self.k = k


class FusionStage(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.d
        self.residual = StageParams(d, rng, cfg.kernel_width, cfg.bn_momentum)
        self.csfb_q = Linear(d, d, rng, bias=False)
        self.csfb_k = Linear(d, d, rng, bias=False)
        self.csfb_v = Linear(d, d, rng, bias=False)
        self.csfb_dra = DraParams(d, cfg.heads, rng, cfg.eps)
        self.dfb_q = Linear(2 * d, d, rng, bias=False)
        self.dfb_k = Linear(d, d, rng, bias=False)
        self.dfb_v = Linear(d, d, rng, bias=False)
        self.dfb_dra = DraParams(d, cfg.heads, rng, cfg.eps)
        self.fusion_nets = [FusionNet(d, rng) for _ in range(cfg.fusion_nets)]
        self.policy = PolicyNet(d, cfg.fusion_nets, rng)


def _tokens(x) -> Tensor:
    x = T.as_tensor(x)
    return T.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


# --------------------------------------------------------------------------
# cross-stage fusion block


@dataclass
class CsfbTrace:
    attention: AttentionTrace
    modality_mass: np.ndarray  # [B, s_q, 3]


def csfb_forward(stage: FusionStage, f_tilde, f_r, f_f, f_m, **hooks) -> tuple[Tensor, CsfbTrace]:
    """Fusion stream ``[B, T_i, d]`` attends over the three stage outputs.

    Keys and values come from the modality outputs concatenated along the
    sequence axis, so each modality owns one contiguous third of the keys.
    """
    f_tilde = _tokens(f_tilde)
    mods = [_tokens(f) for f in (f_r, f_f, f_m)]
    if any(m.shape != mods[0].shape for m in mods) or mods[0].shape[-1] != f_tilde.shape[-1]:
        raise ConfigError(f"modality shapes differ: {[m.shape for m in mods]} vs query {f_tilde.shape}")
    if mods[0].shape[0] != f_tilde.shape[0]:
        raise ShapeError(f"batch mismatch: {mods[0].shape} vs {f_tilde.shape}")
    f_sm = T.concat(mods, axis=1)
    out, tr = dra_forward(stage.csfb_dra, stage.csfb_q(f_tilde), stage.csfb_k(f_sm), stage.csfb_v(f_sm), **hooks)
    n = mods[0].shape[1]
    return out, CsfbTrace(tr, tr.segment_mass([0, n, 2 * n, 3 * n]))


# --------------------------------------------------------------------------
# dynamic fusion block


def fusionnet_weights(net: FusionNet, f_r, f_f, f_m, forced_logits=None) -> tuple[Tensor, Tensor]:
    """Convex modality weights ``[B, 3]`` and the mixture ``[B, T, d]``."""
    mods = [_tokens(f) for f in (f_r, f_f, f_m)]
    if any(m.shape != mods[0].shape for m in mods):
        raise ShapeError(f"modality shapes differ: {[m.shape for m in mods]}")
    b = mods[0].shape[0]
    if forced_logits is None:
        pooled = T.concat([T.mean(m, axis=1) for m in mods], axis=1)
        logits = net.linear(pooled)
    else:
        logits = Tensor(np.broadcast_to(np.asarray(forced_logits, dtype=np.float64), (b, 3)).copy())
    w = T.softmax_rows(logits)
    stacked = T.concat([T.reshape(m, (b, 1) + m.shape[1:]) for m in mods], axis=1)
    mixed = T.sum_(T.mul(stacked, T.reshape(w, (b, 3, 1, 1))), axis=1)
    return w, mixed


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


def policy_mask(
    policy: PolicyNet,
    context,
    k: int,
    train: bool,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    forced_logits=None,
) -> Tensor:
    """One-hot selection ``[B, K]`` over the K fusion strategies.

    Training draws a Gumbel-softmax sample whose forward value is the hard
    one-hot and whose gradient is that of the relaxed sample
    (straight-through). Evaluation takes the argmax and carries no gradient.
    """
    if k < 1:
        raise ConfigError("policy needs K >= 1")
    if temperature <= 0:
        raise ConfigError(f"policy temperature must be > 0, got {temperature}")
    if forced_logits is not None:
        ctx = _tokens(context)
        logits = Tensor(np.broadcast_to(np.asarray(forced_logits, dtype=np.float64), (ctx.shape[0], k)).copy())
    else:
        logits = policy.linear(T.mean(_tokens(context), axis=1))
    if logits.shape[-1] != k:
        raise ShapeError(f"policy produced {logits.shape[-1]} logits, expected {k}")
    eye = np.eye(k)
    if not train:
        return Tensor(eye[np.argmax(logits.data, axis=-1)])
    if rng is None:
        raise T.ContractError("training-mode policy sampling needs an rng")
    noisy = T.add(logits, Tensor(_gumbel(rng, logits.shape)))
    soft = T.softmax_rows(T.scale(noisy, 1.0 / temperature))
    return T.straight_through(soft, eye[np.argmax(soft.data, axis=-1)])


def block_mask(selection: np.ndarray, block_len: int, s_q: int) -> np.ndarray:
    """Additive mask ``[B, s_q, K * block_len]`` leaving only the selected blocks open."""
    open_keys = np.repeat(selection, block_len, axis=-1)
    m = np.where(open_keys > 0.5, 0.0, T.MASK_VALUE)
    return np.broadcast_to(m[:, None, :], (m.shape[0], s_q, m.shape[1])).copy()


@dataclass
class DfbTrace:
    attention: AttentionTrace
    selection: np.ndarray  # [B] selected strategy index
    fusion_weights: np.ndarray  # [B, K, 3]


def dfb_forward(
    stage: FusionStage,
    f_tilde,
    f_bar,
    f_r,
    f_f,
    f_m,
    train: bool = False,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    force_policy: int | None = None,
    force_policy_logits=None,
    force_fusion_logits=None,
    **hooks,
) -> tuple[Tensor, DfbTrace]:
    """Dynamic fusion: attend over the policy-selected modality mixture.

    The query is the feature-axis concatenation of ``f_tilde`` and
    ``f_bar``; keys/values are the K mixtures concatenated along the
    sequence axis, masked down to the selected block. The selection also
    gates its value block (forward value exactly 1) so the policy receives
    a gradient.
    """
    f_tilde, f_bar = _tokens(f_tilde), _tokens(f_bar)
    b, s_q, d = f_tilde.shape
    k = len(stage.fusion_nets)
    weights, blocks = [], []
    for i, net in enumerate(stage.fusion_nets):
        forced = None if force_fusion_logits is None else force_fusion_logits[i]
        w, mixed = fusionnet_weights(net, f_r, f_f, f_m, forced)
        weights.append(w.data)
        blocks.append(mixed)
    block_len = blocks[0].shape[1]
    f_cs = T.concat(blocks, axis=1)

    if force_policy is not None:
        sel = Tensor(np.tile(np.eye(k)[force_policy], (b, 1)))
    else:
        sel = policy_mask(stage.policy, f_tilde, k, train, temperature, rng, force_policy_logits)

    q = stage.dfb_q(T.concat([f_tilde, f_bar], axis=2))
    keys = stage.dfb_k(f_cs)
    values = stage.dfb_v(f_cs)
    gate = T.reshape(sel, (b, k, 1, 1))
    values = T.reshape(T.mul(T.reshape(values, (b, k, block_len, d)), gate), (b, k * block_len, d))
    mask = block_mask(sel.data, block_len, s_q)
    out, tr = dra_forward(stage.dfb_dra, q, keys, values, mask, **hooks)
    return out, DfbTrace(tr, np.argmax(sel.data, axis=-1), np.stack(weights, axis=1))


# --------------------------------------------------------------------------
# full fusion branch


class FusionBranch(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stages = [FusionStage(cfg, rng) for _ in range(cfg.stages)]
        self.head = RegressionHead(cfg.d, rng, cfg.dropout)
        self.init_features = param(np.zeros((cfg.d, 1)), "init_features") if cfg.learnable_fusion_init else None
        self.rng = rng


@dataclass
class StageTrace:
    csfb: CsfbTrace
    dfb: DfbTrace


@dataclass
class ForwardHooks:
    """Test hooks applied to every stage of a fusion forward."""

    force_policy: int | None = None
    force_alpha: float | None = None
    diversify_heads: bool = True
    extra: dict = field(default_factory=dict)


def fusion_forward(
    fusion: FusionBranch,
    unimodal: dict[str, list],
    hooks: ForwardHooks | None = None,
) -> tuple[Tensor, list[StageTrace]]:
    """Run the fusion branch on precomputed unimodal features.

    ``unimodal[m]`` lists the stage-1 input followed by the three stage
    outputs of modality ``m``, each ``[B, T_i, d]`` (token layout).
    """
    hooks = hooks or ForwardHooks()
    missing = [m for m in MODALITIES if m not in unimodal]
    if missing:
        raise ConfigError(f"fusion needs all three modalities; missing {missing}")
    cfg = fusion.cfg
    feats = {m: [_tokens(x) for x in unimodal[m]] for m in MODALITIES}
    b, t1, d = feats["rgb"][0].shape
    train = fusion.training
    dra_hooks = {"diversify_heads": hooks.diversify_heads}
    if hooks.force_alpha is not None:
        dra_hooks["force_alpha"] = hooks.force_alpha

    if fusion.init_features is None:
        h = Tensor(np.zeros((b, d, t1)))
    else:
        h = T.add(Tensor(np.zeros((b, d, t1))), fusion.init_features)
    traces = []
    for i, stage in enumerate(fusion.stages):
        f_tilde = T.transpose(residual_block(h, stage.residual), (0, 2, 1))
        outs = [feats[m][i + 1] for m in MODALITIES]
        f_bar, csfb_tr = csfb_forward(stage, f_tilde, *outs, **dra_hooks)
        src = [feats[m][i] for m in MODALITIES] if cfg.fusionnet_source == "inputs" else outs
        f_hat, dfb_tr = dfb_forward(stage, f_tilde, f_bar, *src, train=train, rng=fusion.rng,
                                    temperature=cfg.policy_temperature, force_policy=hooks.force_policy,
                                    **hooks.extra, **dra_hooks)
        h = T.avgpool1d(T.transpose(f_hat, (0, 2, 1)))
        traces.append(StageTrace(csfb_tr, dfb_tr))
    score = regression_head(h, fusion.head, train, fusion.rng)
    return score, traces


class SurgFusionNet(Module):
    """Three unimodal branches plus the fusion branch."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.branches = [UnimodalBranch(m, cfg, np.random.default_rng([seed, j])) for j, m in enumerate(MODALITIES)]
        self.fusion = FusionBranch(cfg, np.random.default_rng([seed, 3]))

    def branch(self, modality: str) -> UnimodalBranch:
        return self.branches[MODALITIES.index(modality)]

    def unimodal_features(self, features: dict) -> dict[str, list[Tensor]]:
        """Frozen-branch stage outputs in token layout, as constants."""
        out = {}
        with T.no_grad():
            for m in MODALITIES:
                if m not in features:
                    raise ConfigError(f"fusion needs all three modalities; missing {m!r}")
                x = features[m]
                x = np.asarray(getattr(x, "data", x), dtype=np.float64)
                x = x[None] if x.ndim == 2 else x
                br = self.branch(m)
                was_training = br.training
                br.eval()
                try:
                    _, stage_outs = unimodal_forward(br, x)
                finally:
                    br.train(was_training)
                out[m] = [Tensor(x)] + [Tensor(np.ascontiguousarray(s.data.transpose(0, 2, 1))) for s in stage_outs]
        return out


def multimodal_forward(model: SurgFusionNet, features_r, features_f, features_m,
                       hooks: ForwardHooks | None = None) -> tuple[Tensor, list[StageTrace]]:
    """Fused score in (0, 1) per batch element and per-stage traces."""
    if any(f is None for f in (features_r, features_f, features_m)):
        raise ConfigError("fusion needs all three modalities")
    feats = model.unimodal_features(dict(zip(MODALITIES, (features_r, features_f, features_m))))
    return fusion_forward(model.fusion, feats, hooks)
