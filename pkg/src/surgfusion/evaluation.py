"""Metrics, fold construction and the cross-validation harness."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .config import ModelConfig
from .data import MODALITIES, VideoRecord
from .fusion import SurgFusionNet, multimodal_forward
from .tensor import ContractError
from .training import LabelScaler, TrainConfig, predict, train_two_phase

log = logging.getLogger(__name__)

BRANCHES = ("fusion",) + MODALITIES


class UndefinedCorrelation(ValueError):
    """Correlation requested for a constant sequence."""


class DataError(ValueError):
    """Records are missing a field required by the requested operation."""


# --------------------------------------------------------------------------
# metrics


def spearman_scc(pred, label) -> float:
    """Pearson correlation of average ranks (ties share the mean rank)."""
    p, y = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(label, dtype=np.float64).ravel()
    if p.size != y.size:
        raise ContractError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size < 2:
        raise UndefinedCorrelation("SCC needs at least two items")
    if np.ptp(p) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelation("SCC undefined: constant input")
    rp, ry = rankdata(p) - (p.size + 1) / 2, rankdata(y) - (y.size + 1) / 2
    return float(np.clip(rp @ ry / math.sqrt((rp @ rp) * (ry @ ry)), -1.0, 1.0))


def mae_metric(pred_raw, label_raw) -> float:
    p, y = np.asarray(pred_raw, dtype=np.float64).ravel(), np.asarray(label_raw, dtype=np.float64).ravel()
    if p.size != y.size or p.size == 0:
        raise ContractError(f"MAE needs equal non-empty lengths, got {p.size} and {y.size}")
    return float(np.mean(np.abs(p - y)))


def fisher_z_aggregate(correlations) -> float:
    r = np.asarray(correlations, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no correlations to aggregate")
    if np.any(np.abs(r) >= 1.0):
        raise ValueError(f"Fisher z is unbounded at |rho| = 1: {r.tolist()}")
    return float(np.tanh(np.mean(np.arctanh(r))))


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    fold_id: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    group: str | None = None


def parse_scheme(scheme: str) -> tuple[str, int | None]:
    s = scheme.strip().lower()
    if s in ("loso", "louo"):
        return s, None
    if s.startswith("kfold"):
        k = s[5:].lstrip(":(").rstrip(")") or "4"
        if not k.isdigit() or int(k) < 2:
            raise T.ConfigError(f"kfold needs k >= 2, got {scheme!r}")
        return "kfold", int(k)
    raise T.ConfigError(f"unknown scheme {scheme!r}; use loso, louo or kfold:<k>")


def make_folds(records: Sequence[VideoRecord], scheme: str, seed: int = 0) -> list[Fold]:
    kind, k = parse_scheme(scheme)
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("video ids are not unique")
    if kind == "kfold":
        if k > len(ids):
            raise T.ConfigError(f"kfold:{k} needs at least {k} records, got {len(ids)}")
        order = np.random.default_rng(seed).permutation(len(ids))
        parts = [sorted(ids[i] for i in chunk) for chunk in np.array_split(order, k)]
        groups = [None] * k
    else:
        attr = "supertrial_id" if kind == "loso" else "user_id"
        missing = [r.video_id for r in records if getattr(r, attr) in (None, "")]
        if missing:
            raise DataError(f"{kind} needs {attr} on every record; missing for {missing[:5]}")
        by_group: dict = {}
        for r in records:
            by_group.setdefault(getattr(r, attr), []).append(r.video_id)
        groups = sorted(by_group, key=lambda g: (str(type(g)), g))
        parts = [by_group[g] for g in groups]
    folds = []
    for i, (test, g) in enumerate(zip(parts, groups)):
        tset = set(test)
        folds.append(Fold(i, tuple(x for x in ids if x not in tset), tuple(test), None if g is None else str(g)))
    return folds


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold_id: int
    branch: str
    test_ids: tuple[str, ...]
    predictions: np.ndarray
    labels: np.ndarray
    scc: float | None
    mae: float
    error: str | None = None


@dataclass
class CVResult:
    scheme: str
    folds: list[FoldResult]
    mean_scc: dict[str, float | None]
    mean_mae: dict[str, float | None]
    skipped: list[str] = field(default_factory=list)
    epoch_curves: dict[str, list[float]] = field(default_factory=dict)
    best_epoch: dict | None = None

    def records(self) -> list[dict]:
        """Line-delimited machine-readable form; also the input of :meth:`digest`."""
        out = [{"kind": "fold", "fold": f.fold_id, "branch": f.branch, "scc": f.scc, "mae": f.mae,
                "error": f.error, "test_ids": list(f.test_ids),
                "predictions": [float(v) for v in f.predictions]} for f in self.folds]
        for b in self.mean_scc:
            out.append({"kind": "summary", "branch": b, "mean_scc": self.mean_scc[b], "mean_mae": self.mean_mae[b]})
        for s in self.skipped:
            out.append({"kind": "skipped", "reason": s})
        if self.best_epoch is not None:
            out.append({"kind": "best_epoch", **self.best_epoch})
        return out

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def digest(self) -> str:
        return hashlib.sha256(self.jsonl().encode()).hexdigest()

    def table(self) -> str:
        lines = [f"scheme {self.scheme}", f"{'branch':<8} {'mean SCC':>9} {'mean MAE':>9} {'folds':>6}"]
        for b in self.mean_scc:
            n = sum(1 for f in self.folds if f.branch == b and f.scc is not None)
            scc, mae = self.mean_scc[b], self.mean_mae[b]
            lines.append(f"{b:<8} {_fmt(scc):>9} {_fmt(mae):>9} {n:>6}")
        for f in self.folds:
            if f.error:
                lines.append(f"  fold {f.fold_id} {f.branch}: {f.error}")
        for s in self.skipped:
            lines.append(f"  skipped: {s}")
        if self.best_epoch:
            be = self.best_epoch
            lines.append(f"best epoch (select after averaging): epoch {be['epoch_after_mean']} "
                         f"SCC {_fmt(be['scc_after_mean'])}; per-fold best then mean: SCC {_fmt(be['scc_per_fold'])}")
        return "\n".join(lines)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


Predictor = Callable[[list[VideoRecord], list[VideoRecord], int], dict[str, np.ndarray]]


def fold_seed(seed: int, fold_id: int) -> int:
    return int(np.random.SeedSequence([seed, fold_id]).generate_state(1)[0])


@dataclass
class _TrainJob:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    eval_every: int

    def __call__(self, train: list[VideoRecord], test: list[VideoRecord], seed: int):
        model = SurgFusionNet(copy.deepcopy(self.model_cfg), seed=seed)
        tcfg = copy.deepcopy(self.train_cfg)
        tcfg.seed = seed
        curve = []

        def on_epoch(phase, epoch):
            if phase == "2" and self.eval_every and (epoch + 1) % self.eval_every == 0:
                was = model.fusion.training
                p = predict(model, test)["fusion"]
                model.fusion.train(was)
                curve.append(_safe_scc(p, [r.raw_label for r in test])[0])

        train_two_phase(tcfg, train, model, on_epoch=on_epoch)
        out = predict(model, test)
        out["_curve"] = curve
        return out


def _safe_scc(pred, label):
    try:
        return spearman_scc(pred, label), None
    except UndefinedCorrelation as e:
        return None, str(e)


def _run_fold(args):
    fold, train, test, predictor, seed = args
    return fold.fold_id, predictor(train, test, seed)


def run_cross_validation(
    records: Sequence[VideoRecord],
    scheme: str,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    seed: int = 0,
    jobs: int = 1,
    predictor: Predictor | None = None,
    eval_every: int = 0,
) -> CVResult:
    """Train a fresh model per fold and score every branch on the held-out videos.

    ``predictor(train, test, seed)`` replaces model training (test hook); it
    returns raw-unit predictions keyed by branch. Folds are independent and
    run in ``jobs`` worker processes; results are merged by fold id.
    ``eval_every > 0`` also scores the fusion branch on the test fold every
    that many phase-2 epochs, for best-epoch reporting.
    """
    folds = make_folds(records, scheme, seed)
    by_id = {r.video_id: r for r in records}
    scaler = LabelScaler(model_cfg.y_min, model_cfg.y_max)
    for r in records:
        scaler.normalize(r.raw_label)
    predictor = predictor or _TrainJob(model_cfg, train_cfg, eval_every)

    tasks, skipped = [], []
    for f in folds:
        if len(f.test_ids) < 2:
            msg = f"fold {f.fold_id} ({f.group or 'kfold'}) has {len(f.test_ids)} test record(s); SCC needs 2"
            log.warning(msg)
            skipped.append(msg)
            continue
        tasks.append((f, [by_id[i] for i in f.train_ids], [by_id[i] for i in f.test_ids], predictor,
                      fold_seed(seed, f.fold_id)))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            raw = dict(pool.map(_run_fold, tasks))
    else:
        raw = dict(_run_fold(t) for t in tasks)

    results: list[FoldResult] = []
    curves = {}
    for f, _, test, _, _ in tasks:
        preds = raw[f.fold_id]
        labels = np.array([r.raw_label for r in test])
        if preds.get("_curve"):
            curves[str(f.fold_id)] = preds["_curve"]
        for b in BRANCHES:
            if b not in preds:
                continue
            p = np.asarray(preds[b], dtype=np.float64)
            scc, err = _safe_scc(p, labels)
            results.append(FoldResult(f.fold_id, b, f.test_ids, p, labels, scc, mae_metric(p, labels), err))

    mean_scc, mean_mae = {}, {}
    for b in BRANCHES:
        rs = [r for r in results if r.branch == b]
        if not rs:
            continue
        sccs = [r.scc for r in rs if r.scc is not None]
        mean_scc[b] = float(np.mean(sccs)) if sccs else None
        mean_mae[b] = float(np.mean([r.mae for r in rs]))
    out = CVResult(scheme, results, mean_scc, mean_mae, skipped, curves)
    if curves:
        out.best_epoch = best_epoch_summary(curves, eval_every)
    return out


def best_epoch_summary(curves: dict[str, list], eval_every: int) -> dict:
    """Best-epoch SCC selected after averaging folds, and per fold before averaging."""
    mat = np.array([[np.nan if v is None else v for v in c] for c in curves.values()], dtype=np.float64)
    mean_curve = np.nanmean(mat, axis=0)
    i = int(np.nanargmax(mean_curve))
    return {"epoch_after_mean": (i + 1) * eval_every, "scc_after_mean": float(mean_curve[i]),
            "scc_per_fold": float(np.mean(np.nanmax(mat, axis=1)))}


def across_tasks(results: dict[str, CVResult]) -> dict[str, dict]:
    """Fisher-z aggregate of per-task mean SCC and plain mean of per-task MAE, per branch."""
    out = {}
    for b in BRANCHES:
        sccs = [r.mean_scc.get(b) for r in results.values()]
        if not sccs or any(s is None for s in sccs):
            continue
        maes = [r.mean_mae[b] for r in results.values()]
        try:
            agg = fisher_z_aggregate(sccs)
        except ValueError:
            agg = None
        out[b] = {"scc": agg, "mae": float(np.mean(maes))}
    return out


def heads_ablation(records, scheme, train_cfg, model_cfg, heads=(1, 2, 4, 8), seed=0, jobs=1
                   ) -> tuple[str, dict[int, CVResult]]:
    """Cross-validate once per head count and tabulate the fusion branch."""
    res = {}
    for h in heads:
        mc = copy.deepcopy(model_cfg)
        mc.heads = h
        mc.validate()
        res[h] = run_cross_validation(records, scheme, train_cfg, mc, seed, jobs)
    lines = [f"{'heads':>5} {'SCC':>8} {'MAE':>8}"]
    for h, r in res.items():
        lines.append(f"{h:>5} {_fmt(r.mean_scc.get('fusion')):>8} {_fmt(r.mean_mae.get('fusion')):>8}")
    return "\n".join(lines), res


# --------------------------------------------------------------------------
# attention traces


def export_traces(model: SurgFusionNet, records: Sequence[VideoRecord], out_dir: str) -> list[str]:
    """Per video and stage, the CSFB attention mass on each modality for every query window.

    Writes ``<video>_stage<i>.csv`` with columns ``window,rgb,flow,mask``.
    """
    os.makedirs(out_dir, exist_ok=True)
    model.eval()
    paths = []
    with T.no_grad():
        for r in records:
            _, traces = multimodal_forward(model, *(r.features[m] for m in MODALITIES))
            for i, tr in enumerate(traces, start=1):
                path = os.path.join(out_dir, f"{r.video_id}_stage{i}.csv")
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(("window",) + MODALITIES)
                    for t, row in enumerate(tr.csfb.modality_mass[0]):
                        w.writerow([t] + [repr(float(v)) for v in row])
                paths.append(path)
    return paths
