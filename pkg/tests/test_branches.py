import math

import numpy as np
import pytest

from surgfusion import tensor as T
from surgfusion.branches import (
    RegressionHead,
    StageParams,
    UnimodalBranch,
    regression_head,
    residual_block,
    stage_forward,
    unimodal_forward,
)
from surgfusion.config import ModelConfig
from surgfusion.data import FeatureSequence
from surgfusion.gradcheck import grad_check
from surgfusion.tensor import Tensor


def scalar_conv_bn_gelu(x, kernel, bias, gamma, beta, eps=1e-5):
    """Loop implementation of conv1d (same pad) -> batchnorm (batch stats) -> exact GELU on [C][T]."""
    c_out, c_in, kw = len(kernel), len(kernel[0]), len(kernel[0][0])
    t_len, pad = len(x[0]), kw // 2
    conv = [[bias[c] + sum(kernel[c][j][u] * (x[j][i + u - pad] if 0 <= i + u - pad < t_len else 0.0)
                           for j in range(c_in) for u in range(kw))
             for i in range(t_len)] for c in range(c_out)]
    out = []
    for c in range(c_out):
        mu = sum(conv[c]) / t_len
        var = sum((v - mu) ** 2 for v in conv[c]) / t_len
        row = []
        for v in conv[c]:
            z = gamma[c] * (v - mu) / math.sqrt(var + eps) + beta[c]
            row.append(0.5 * z * (1 + math.erf(z / math.sqrt(2))))
        out.append(row)
    return out


class TestResidualBlock:
    def test_fresh_block_is_identity(self):
        rng = np.random.default_rng(0)
        p = StageParams(6, rng)
        x = rng.normal(size=(2, 6, 9))
        assert np.array_equal(residual_block(Tensor(x), p).data, x)
        p.eval()
        assert np.array_equal(residual_block(Tensor(x[0]), p).data, x[0])

    @pytest.mark.parametrize("t", [1, 2, 5, 16])
    def test_shape_preserved(self, t):
        rng = np.random.default_rng(t)
        p = StageParams(4, rng)
        p.conv2.bn.gamma.data = rng.uniform(0.5, 1.5, 4)
        assert residual_block(Tensor(rng.normal(size=(3, 4, t))), p).shape == (3, 4, t)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        d = 3
        p = StageParams(d, rng)
        for conv in (p.conv1, p.conv2):
            conv.kernel.data = rng.normal(size=conv.kernel.shape)
            conv.bias.data = rng.normal(size=d)
            conv.bn.gamma.data = rng.uniform(0.5, 1.5, d)
            conv.bn.beta.data = rng.normal(size=d)
        x = np.ones((d, 4))
        x[:, 1] = 2.0
        x[0, 3] = -1.0
        params = [(c.kernel.data.tolist(), c.bias.data.tolist(), c.bn.gamma.data.tolist(), c.bn.beta.data.tolist())
                  for c in (p.conv1, p.conv2)]
        h = scalar_conv_bn_gelu(x.tolist(), *params[0])
        h = scalar_conv_bn_gelu(h, *params[1])
        expected = np.array(x) + np.array(h)
        np.testing.assert_allclose(residual_block(Tensor(x), p).data, expected, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(T.ConfigError):
            residual_block(Tensor(np.ones((3, 4))), StageParams(4, np.random.default_rng(0)))


class TestStage:
    def test_halving(self):
        p = StageParams(4, np.random.default_rng(0))
        assert stage_forward(Tensor(np.ones((4, 8))), p).shape == (4, 4)
        assert stage_forward(Tensor(np.ones((4, 1))), p).shape == (4, 1)
        assert stage_forward(Tensor(np.ones((4, 7))), p).shape == (4, 4)

    def test_constant_input(self):
        p = StageParams(4, np.random.default_rng(0))
        x = np.full((4, 6), 2.5)
        np.testing.assert_array_equal(stage_forward(Tensor(x), p).data, np.full((4, 3), 2.5))


class TestHead:
    def test_zero_weights(self):
        head = RegressionHead(5, np.random.default_rng(0))
        head.linear.weight.data[:] = 0
        assert regression_head(Tensor(np.random.default_rng(1).normal(size=(5, 3))), head).item() == 0.5

    def test_range_and_determinism(self):
        rng = np.random.default_rng(2)
        head = RegressionHead(5, rng)
        head.linear.weight.data = rng.normal(size=(5, 1)) * 50
        x = Tensor(rng.normal(size=(8, 5, 3)) * 100)
        a, b = regression_head(x, head).data, regression_head(x, head).data
        assert np.array_equal(a, b)
        assert np.all((a >= 0) & (a <= 1))
        head.linear.weight.data /= 50
        x = Tensor(rng.normal(size=(8, 5, 3)))
        s = regression_head(x, head, train=True, rng=rng).data
        assert np.all((s > 0) & (s < 1))


class TestUnimodal:
    def test_stage_lengths(self):
        cfg = ModelConfig(d=8)
        br = UnimodalBranch("rgb", cfg, np.random.default_rng(0))
        score, outs = unimodal_forward(br, FeatureSequence(np.ones((32, 8)), "rgb"))
        assert score.shape == ()
        assert [o.shape for o in outs] == [(1, 8, 16), (1, 8, 8), (1, 8, 4)]
        _, outs = unimodal_forward(br, np.ones((3, 5, 8)))
        assert [o.shape[-1] for o in outs] == [3, 2, 1]

    def test_empty_input(self):
        br = UnimodalBranch("flow", ModelConfig(d=8), np.random.default_rng(0))
        with pytest.raises(ValueError):
            unimodal_forward(br, np.zeros((0, 8)))

    def test_golden_score(self):
        # value generated once by this implementation (seed 1, eval mode) and pinned
        cfg = ModelConfig(d=8)
        rng = np.random.default_rng(1)
        br = UnimodalBranch("mask", cfg, rng)
        for st in br.stages:
            st.conv2.bn.gamma.data = rng.uniform(0.1, 0.3, 8)
        br.eval()
        x = np.random.default_rng(2).normal(size=(16, 8))
        score, _ = unimodal_forward(br, x)
        assert score.item() == pytest.approx(GOLDEN_SCORE, abs=1e-12)

    def test_gradcheck_full_branch(self):
        cfg = ModelConfig(d=4, dropout=0.0)
        rng = np.random.default_rng(3)
        br = UnimodalBranch("rgb", cfg, rng)
        for st in br.stages:
            st.conv2.bn.gamma.data = rng.uniform(0.2, 0.5, 4)
            st.conv2.bn.beta.data = rng.normal(size=4) * 0.1
        x = rng.normal(size=(3, 8, 4))
        rep = grad_check(lambda: T.sum_(unimodal_forward(br, x)[0]), br.parameters())
        assert rep.passed, rep
        br.eval()
        rep = grad_check(lambda: T.sum_(unimodal_forward(br, x)[0]), br.parameters())
        assert rep.passed, rep


GOLDEN_SCORE = 0.4891490004745393
