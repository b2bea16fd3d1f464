import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surgfusion import tensor as T
from surgfusion.config import ModelConfig
from surgfusion.data import MODALITIES, VideoRecord
from surgfusion.evaluation import (
    DataError,
    UndefinedCorrelation,
    across_tasks,
    best_epoch_summary,
    export_traces,
    fisher_z_aggregate,
    mae_metric,
    make_folds,
    run_cross_validation,
    spearman_scc,
)
from surgfusion.fusion import SurgFusionNet
from surgfusion.training import PhaseConfig, TrainConfig


def textbook_rho(x, y):
    """1 - 6 sum d^2 / (n (n^2 - 1)) on tie-free data."""
    rx = {v: i for i, v in enumerate(sorted(x))}
    ry = {v: i for i, v in enumerate(sorted(y))}
    n = len(x)
    return 1 - 6 * sum((rx[a] - ry[b]) ** 2 for a, b in zip(x, y)) / (n * (n * n - 1))


class TestSpearman:
    def test_hand_value(self):
        assert spearman_scc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_extremes(self):
        assert spearman_scc([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
        assert spearman_scc([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    @given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=12, unique=True))
    def test_textbook_and_rank_invariance(self, x):
        rng = np.random.default_rng(len(x))
        y = list(rng.permutation(len(x)).astype(float))
        assert spearman_scc(x, y) == pytest.approx(textbook_rho(x, y), abs=1e-12)
        assert spearman_scc(np.exp(np.array(x) / 100.0), y) == pytest.approx(spearman_scc(x, y), abs=1e-12)
        assert spearman_scc(x, x) == pytest.approx(1.0, abs=1e-12)
        assert spearman_scc(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-12)

    def test_ties_use_average_ranks(self):
        # ranks [1.5, 1.5, 3] vs [1, 2, 3]: pearson of centred ranks
        rp, ry = np.array([-0.5, -0.5, 1.0]), np.array([-1.0, 0.0, 1.0])
        expect = rp @ ry / math.sqrt((rp @ rp) * (ry @ ry))
        assert spearman_scc([5, 5, 9], [1, 2, 3]) == pytest.approx(expect, abs=1e-15)

    def test_errors(self):
        with pytest.raises(UndefinedCorrelation):
            spearman_scc([2, 2, 2], [1, 2, 3])
        with pytest.raises(UndefinedCorrelation):
            spearman_scc([1], [1])
        with pytest.raises(T.ContractError):
            spearman_scc([1, 2], [1, 2, 3])


class TestMaeFisher:
    def test_mae(self):
        assert mae_metric([20, 24], [18, 27]) == 2.5
        assert mae_metric([3.0], [1.0]) == 2.0
        assert mae_metric([1, 2], [1, 2]) == 0.0
        with pytest.raises(T.ContractError):
            mae_metric([1, 2], [1])

    def test_fisher(self):
        assert fisher_z_aggregate([0.8, 0.6]) == pytest.approx(0.71430, abs=1e-4)
        expect = math.tanh((math.atanh(0.8) + math.atanh(0.6)) / 2)
        assert fisher_z_aggregate([0.8, 0.6]) == pytest.approx(expect, abs=1e-15)
        assert fisher_z_aggregate([0, 0]) == 0.0
        assert fisher_z_aggregate([0.37]) == pytest.approx(0.37, abs=1e-15)
        assert fisher_z_aggregate([0.5, 0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)
        with pytest.raises(ValueError):
            fisher_z_aggregate([1.0, 0.5])


def records(n, users=8, supertrials=5, d=4, t=8, seed=0):
    rng = np.random.default_rng(seed)
    return [VideoRecord(f"v{i:02d}", f"u{i % users}", i // users % supertrials + 1, "task",
                        float(rng.uniform(6, 30)), {m: rng.normal(size=(t, d)) for m in MODALITIES})
            for i in range(n)]


class TestFolds:
    def _partition(self, folds, ids):
        tests = [i for f in folds for i in f.test_ids]
        assert sorted(tests) == sorted(ids)
        for f in folds:
            assert not set(f.train_ids) & set(f.test_ids)
            assert sorted(f.train_ids + f.test_ids) == sorted(ids)

    def test_louo_loso(self):
        recs = records(40)
        ids = [r.video_id for r in recs]
        louo = make_folds(recs, "louo")
        assert len(louo) == 8
        self._partition(louo, ids)
        loso = make_folds(recs, "loso")
        assert len(loso) == 5 and all(len(f.test_ids) == 8 for f in loso)
        self._partition(loso, ids)

    def test_kfold(self):
        recs = records(36)
        folds = make_folds(recs, "kfold:4", seed=3)
        assert [len(f.test_ids) for f in folds] == [9, 9, 9, 9]
        self._partition(folds, [r.video_id for r in recs])
        assert folds == make_folds(recs, "kfold:4", seed=3)
        assert folds != make_folds(recs, "kfold:4", seed=4)

    def test_missing_group_and_bad_scheme(self):
        recs = records(6)
        recs[2].user_id = None
        with pytest.raises(DataError):
            make_folds(recs, "louo")
        with pytest.raises(T.ConfigError):
            make_folds(recs, "leave-one-out")


def oracle(train, test, seed):
    y = np.array([r.raw_label for r in test])
    return {b: y.copy() for b in ("fusion",) + MODALITIES}


def constant(train, test, seed):
    return {b: np.full(len(test), 12.0) for b in ("fusion",) + MODALITIES}


class TestCrossValidation:
    cfg = TrainConfig(PhaseConfig("sgd", 1e-2, 5e-6, 1, 8), PhaseConfig("adamw", 1e-3, 5e-6, 1, 8))

    def test_perfect_predictor(self):
        res = run_cross_validation(records(16), "kfold:4", self.cfg, ModelConfig(d=4), predictor=oracle)
        assert res.mean_scc["fusion"] == 1.0 and res.mean_mae["fusion"] == 0.0
        assert len([f for f in res.folds if f.branch == "fusion"]) == 4

    def test_constant_predictor_reports_errors(self):
        res = run_cross_validation(records(16), "kfold:4", self.cfg, ModelConfig(d=4), predictor=constant)
        assert res.mean_scc["fusion"] is None
        assert all(f.scc is None and "constant" in f.error for f in res.folds)
        assert "n/a" in res.table()

    def test_small_folds_skipped(self, caplog):
        recs = records(10, users=8)
        res = run_cross_validation(recs, "louo", self.cfg, ModelConfig(d=4), predictor=oracle)
        assert len(res.skipped) == 6
        assert "SCC needs 2" in caplog.text
        assert {f.fold_id for f in res.folds} == {0, 1}

    def test_trained_run_is_deterministic(self):
        recs = records(12, d=4)
        mc = ModelConfig(d=4, fusion_nets=2)
        a = run_cross_validation(recs, "kfold:3", self.cfg, mc, seed=5)
        b = run_cross_validation(recs, "kfold:3", self.cfg, mc, seed=5)
        assert a.digest() == b.digest()
        assert set(a.mean_scc) == {"fusion", "rgb", "flow", "mask"}
        c = run_cross_validation(recs, "kfold:3", self.cfg, mc, seed=5, jobs=2)
        assert c.digest() == a.digest()

    def test_best_epoch(self):
        recs = records(12, d=4)
        cfg = TrainConfig(PhaseConfig("sgd", 1e-2, 5e-6, 1, 8), PhaseConfig("adamw", 1e-3, 5e-6, 4, 8))
        res = run_cross_validation(recs, "kfold:3", cfg, ModelConfig(d=4, fusion_nets=2), eval_every=2)
        assert res.best_epoch["epoch_after_mean"] in (2, 4)
        assert all(len(c) == 2 for c in res.epoch_curves.values())
        s = best_epoch_summary({"0": [0.1, 0.5], "1": [0.4, 0.2]}, 1)
        assert s["epoch_after_mean"] == 2 and s["scc_after_mean"] == pytest.approx(0.35)
        assert s["scc_per_fold"] == pytest.approx(0.45)

    def test_across_tasks(self):
        res = {t: run_cross_validation(records(16, seed=i), "kfold:4", self.cfg, ModelConfig(d=4), predictor=p)
               for i, (t, p) in enumerate((("a", oracle), ("b", oracle)))}
        # perfect SCC 1.0 is a Fisher-z boundary: reported as None rather than inf
        assert across_tasks(res)["fusion"]["scc"] is None


def test_trace_export(tmp_path):
    model = SurgFusionNet(ModelConfig(d=4, fusion_nets=2), seed=0)
    recs = records(2, d=4, t=16)
    paths = export_traces(model, recs, str(tmp_path))
    assert len(paths) == 6
    with open(paths[0]) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "window,rgb,flow,mask"
    assert len(lines) == 17
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    np.testing.assert_array_equal(rows[:, 0], np.arange(16))
    np.testing.assert_allclose(rows[:, 1:].sum(axis=1), 1.0, atol=1e-12)
    assert os.path.basename(paths[3]) == "v01_stage1.csv"
