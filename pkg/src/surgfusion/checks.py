"""The finite-difference gradient suite: every op, DRA, and the fusion pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import MODALITIES
from .dra import DraParams, dra_forward
from .fusion import ForwardHooks, SurgFusionNet, fusion_forward
from .gradcheck import GradCheckReport, grad_check, jitter_parameters
from .tensor import Tensor


def _leaf(a, name):
    return Tensor(a, requires_grad=True, name=name)


def op_cases(rng: np.random.Generator) -> dict:
    """One scalar function per differentiable op on fresh random leaves: name -> (f, leaves)."""

    def w(shape):
        return Tensor(rng.normal(size=shape))

    cases = {}
    a, b = _leaf(rng.normal(size=(3, 4)), "a"), _leaf(rng.normal(size=(4, 2)), "b")
    r = w((3, 2))
    cases["matmul"] = (lambda: T.sum_(T.matmul(a, b) * r), [a, b])
    bm = _leaf(rng.normal(size=(2, 3, 4)), "bm")
    r2 = w((2, 3, 2))
    cases["matmul_batched_broadcast"] = (lambda: T.sum_(T.matmul(bm, b) * r2), [bm, b])
    s = _leaf(rng.normal(size=(2, 3, 5)), "s")
    r3 = w((2, 3, 5))
    mask = np.where(rng.random((2, 3, 5)) < 0.3, T.MASK_VALUE, 0.0)
    mask[..., 0] = 0.0
    cases["softmax_rows"] = (lambda: T.sum_(T.softmax_rows(s) * r3), [s])
    cases["softmax_masked"] = (lambda: T.sum_(T.softmax_rows(s, mask) * r3), [s])
    x = _leaf(rng.normal(size=(2, 3, 6)), "x")
    k, kb = _leaf(rng.normal(size=(4, 3, 3)), "k"), _leaf(rng.normal(size=4), "kb")
    r4 = w((2, 4, 6))
    cases["conv1d"] = (lambda: T.sum_(T.conv1d(x, k, kb) * r4), [x, k, kb])
    e = _leaf(rng.normal(size=(3, 5)) * 2, "e")
    r5 = w((3, 5))
    cases["sigmoid"] = (lambda: T.sum_(T.sigmoid(e) * r5), [e])
    cases["gelu"] = (lambda: T.sum_(T.gelu(e) * r5), [e])
    gam, bet = _leaf(rng.uniform(0.5, 1.5, 3), "gamma"), _leaf(rng.normal(size=3), "beta")
    r6 = w((2, 3, 6))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    # running stats are scratch copies so repeated evaluations stay identical
    cases["batchnorm_train"] = (
        lambda: T.sum_(T.batchnorm1d(x, gam, bet, np.zeros(3), np.ones(3), train=True) * r6), [x, gam, bet])
    cases["batchnorm_eval"] = (lambda: T.sum_(T.batchnorm1d(x, gam, bet, rm, rv, train=False) * r6), [x, gam, bet])
    y = _leaf(rng.normal(size=(2, 3, 7)), "y")
    r7 = w((2, 3, 4))
    cases["avgpool1d"] = (lambda: T.sum_(T.avgpool1d(y) * r7), [y])
    c1, c2 = _leaf(rng.normal(size=(2, 3)), "c1"), _leaf(rng.normal(size=(2, 4)), "c2")
    r8 = w((2, 7))
    cases["concat"] = (lambda: T.sum_(T.concat([c1, c2], axis=1) * r8), [c1, c2])
    r9 = w((3, 1))
    cases["mean"] = (lambda: T.sum_(T.mean(e, axis=1, keepdims=True) * r9), [e])
    f1, f2 = _leaf(rng.normal(size=(3, 5)), "f1"), _leaf(rng.normal(size=(1, 5)), "f2")
    cases["add_mul_scale"] = (lambda: T.sum_(T.scale(f1 * f2 + f1, 0.7) * r5 - f2), [f1, f2])
    pos = _leaf(rng.uniform(0.5, 2.0, size=(1, 5)), "pos")
    cases["div"] = (lambda: T.sum_(T.div(f1, pos) * r5), [f1, pos])
    cases["inner"] = (lambda: T.sum_(T.inner(f1, e)), [f1, e])
    cases["abs"] = (lambda: T.sum_(T.abs_(f1) * r5), [f1])
    t4 = _leaf(rng.normal(size=(2, 3, 4)), "t4")
    r10 = w((4, 2, 3))
    cases["transpose_reshape"] = (
        lambda: T.sum_(T.reshape(T.transpose(t4, (2, 0, 1)), (4, 6)) * T.reshape(r10, (4, 6))), [t4])
    return cases


def dra_case(rng: np.random.Generator, heads: int | None = None):
    """Full DRA forward reduced by a random weighting; projections, mixing MLP and inputs are leaves."""
    heads = heads or int(rng.choice([1, 2, 4]))
    p = DraParams(8, heads, rng)
    jitter_parameters(p.parameters(), rng)
    b = int(rng.integers(1, 3))
    q, k, v = (_leaf(rng.normal(size=(b, n, 8)), name) for n, name in ((3, "q"), (5, "k"), (5, "v")))
    r = rng.normal(size=(b, 3, 8))
    return (lambda: T.sum_(T.mul(dra_forward(p, q, k, v)[0], r)),
            p.parameters() + [q, k, v])


def pipeline_case(rng: np.random.Generator, seed: int):
    """Residual -> CSFB -> DFB stages -> head of the fusion branch, dropout off, policy fixed.

    Leaves are every fusion-branch parameter plus the unimodal feature maps
    it consumes.
    """
    k = 3
    cfg = ModelConfig(d=4, fusion_nets=k, heads=int(rng.choice([1, 2])), dropout=0.0,
                      fusionnet_source=str(rng.choice(["inputs", "outputs"])))
    model = SurgFusionNet(cfg, seed=seed)
    jitter_parameters(model.parameters(), rng)
    model.eval()
    raw = {m: rng.normal(size=(2, 8, 4)) for m in MODALITIES}
    feats = model.unimodal_features(raw)
    inputs = []
    for m in MODALITIES:
        feats[m] = [_leaf(t.data, f"{m}{i}") for i, t in enumerate(feats[m])]
        inputs += feats[m]
    model.fusion.train()
    hooks = ForwardHooks(force_policy=int(rng.integers(k)))
    return (lambda: T.sum_(fusion_forward(model.fusion, feats, hooks)[0]),
            model.fusion.parameters() + inputs)


@dataclass
class SuiteResult:
    name: str
    seeds: int
    worst: float
    failures: list[tuple[int, GradCheckReport]]
    seconds: float

    @property
    def passed(self) -> bool:
        return not self.failures


def run_suite(seeds: int = 100, start: int = 0, tol: float = 1e-4, pipeline_leaves: int = 12,
              pipeline_coords: int = 2) -> list[SuiteResult]:
    """Check every op, DRA and the fusion pipeline over ``seeds`` seeds.

    Each pipeline seed perturbs ``pipeline_coords`` coordinates in each of
    ``pipeline_leaves`` randomly chosen leaves; op and DRA cases are checked
    in full.
    """
    names = sorted(op_cases(np.random.default_rng(0)))
    results = {n: [0.0, [], 0.0] for n in names + ["dra", "pipeline"]}

    def record(name, seed, rep, t0):
        slot = results[name]
        slot[0] = max(slot[0], rep.max_rel_error)
        if not rep.passed:
            slot[1].append((seed, rep))
        slot[2] += time.perf_counter() - t0

    for seed in range(start, start + seeds):
        cases = op_cases(np.random.default_rng([seed, 0]))
        for n in names:
            t0 = time.perf_counter()
            f, leaves = cases[n]
            record(n, seed, grad_check(f, leaves, tol=tol), t0)
        t0 = time.perf_counter()
        f, leaves = dra_case(np.random.default_rng([seed, 1]))
        record("dra", seed, grad_check(f, leaves, tol=tol), t0)
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, 2])
        f, leaves = pipeline_case(rng, seed)
        chosen = [leaves[i] for i in sorted(rng.choice(len(leaves), min(pipeline_leaves, len(leaves)),
                                                        replace=False))]
        record("pipeline", seed, grad_check(f, chosen, tol=tol, max_coords=pipeline_coords, rng=rng), t0)
    return [SuiteResult(n, seeds, w, fails, secs) for n, (w, fails, secs) in results.items()]
