import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surgfusion import tensor as T
from surgfusion.checks import op_cases
from surgfusion.gradcheck import grad_check
from surgfusion.tensor import Tensor


def leaf(a, name=None):
    return Tensor(a, requires_grad=True, name=name)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_zero_annihilates(self):
        out = T.matmul(Tensor(np.zeros((3, 2))), Tensor(np.random.default_rng(0).normal(size=(2, 4))))
        assert not out.data.any()

    def test_shape_error_names_both(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)

    def test_ln2(self):
        out = T.softmax_rows(Tensor([[math.log(2), 0.0]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_masked_limit(self):
        np.testing.assert_array_equal(T.softmax_rows(Tensor([[0.0, -np.inf]])).data, [[1.0, 0.0]])

    def test_additive_mask(self):
        out = T.softmax_rows(Tensor([[3.0, 1.0, 2.0]]), mask=[[0.0, T.MASK_VALUE, 0.0]]).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out[0, [0, 2]], [math.e / (math.e + 1), 1 / (math.e + 1)])

    def test_fully_masked_row(self):
        with pytest.raises(T.DegenerateRowError):
            T.softmax_rows(Tensor([[0.0, 0.0], [1.0, 2.0]]), mask=[[T.MASK_VALUE] * 2, [0.0, 0.0]])
        with pytest.raises(T.DegenerateRowError):
            T.softmax_rows(Tensor([[-np.inf, -np.inf]]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


class TestConv1d:
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 7))
        out = T.conv1d(Tensor(x), Tensor([[[1.0]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel(self):
        out = T.conv1d(Tensor(np.ones((2, 5))), Tensor(np.zeros((3, 2, 3))), Tensor(np.zeros(3)))
        assert out.shape == (3, 5) and not out.data.any()

    def test_hand_example(self):
        out = T.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 0.0, -1.0]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, [[-2.0, -2.0, 2.0]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x, k, b = rng.normal(size=(2, 3, 6)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
        out = T.conv1d(Tensor(x), Tensor(k), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
        ref = np.zeros((2, 4, 6))
        for n in range(2):
            for c in range(4):
                for i in range(6):
                    ref[n, c, i] = b[c] + sum(k[c, j, u] * xp[n, j, i + u] for j in range(3) for u in range(5))
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(T.ConfigError):
            T.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 2))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                  elements=st.floats(-1e6, 1e6)))
    def test_identity_kernel_property(self, x):
        c = x.shape[0]
        k = np.zeros((c, c, 3))
        k[np.arange(c), np.arange(c), 1] = 1.0
        np.testing.assert_array_equal(T.conv1d(Tensor(x), Tensor(k), Tensor(np.zeros(c))).data, x)


class TestPoolingAndNorm:
    def test_avgpool_even_odd(self):
        np.testing.assert_array_equal(T.avgpool1d(Tensor([[1.0, 3.0, 5.0, 7.0]])).data, [[2.0, 6.0]])
        np.testing.assert_array_equal(T.avgpool1d(Tensor([[1.0, 3.0, 5.0]])).data, [[2.0, 5.0]])
        np.testing.assert_array_equal(T.avgpool1d(Tensor([[4.0]])).data, [[4.0]])

    def test_batchnorm_train_stats(self):
        rng = np.random.default_rng(0)
        x = rng.normal(2.0, 3.0, size=(4, 3, 5))
        rm, rv = np.zeros(3), np.ones(3)
        out = T.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, train=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2)), x.var(axis=(0, 2)) / (x.var(axis=(0, 2)) + 1e-5))
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))

    def test_batchnorm_eval_is_fixed(self):
        rng = np.random.default_rng(1)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        g, b = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
        x = Tensor(rng.normal(size=(3, 6)))
        a1 = T.batchnorm1d(x, g, b, rm, rv, train=False).data
        a2 = T.batchnorm1d(x, g, b, rm, rv, train=False).data
        assert np.array_equal(a1, a2)
        np.testing.assert_allclose(a1, g.data[:, None] * (x.data - rm[:, None]) / np.sqrt(rv[:, None] + 1e-5)
                                   + b.data[:, None])

    def test_dropout(self):
        x = Tensor(np.ones((200, 50)))
        assert T.dropout(x, 0.3, train=False, rng=None) is x
        out = T.dropout(x, 0.3, train=True, rng=np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 1 / 0.7}
        assert abs(out.mean() - 1.0) < 0.02


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        T.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self):
        x = leaf(3.0)
        (x * x).backward()
        assert x.grad == 6.0

    def test_sigmoid_at_zero(self):
        x = leaf(0.0)
        T.sigmoid(x).backward()
        assert x.grad == 0.25

    def test_non_scalar_rejected(self):
        with pytest.raises(T.ContractError):
            (leaf(np.ones(3)) * 2.0).backward()

    def test_repeat_without_rebuild_rejected(self):
        x = leaf(2.0)
        y = x * x
        y.backward()
        with pytest.raises(T.ContractError):
            y.backward()

    def test_shared_node_visited_once(self):
        x = leaf(2.0)
        y = x * 3.0
        z = y * y + y  # dz/dx = (2y + 1) * 3 = 39
        z.backward()
        assert x.grad == 39.0

    def test_no_grad(self):
        x = leaf(1.0)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestGradCheck:
    def test_bilinear_near_exact(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        rep = grad_check(lambda: T.sum_(T.matmul(a, b)), [a, b])
        assert rep.passed and rep.max_rel_error < 1e-6

    def test_wrong_gelu_gradient_fails(self, monkeypatch):
        x = leaf(np.random.default_rng(0).normal(size=5))

        def bad_gelu(a):
            out = T.gelu(a)
            out._backward = lambda g: (g * 0.5,)
            return out

        rep = grad_check(lambda: T.sum_(bad_gelu(x)), [x])
        assert not rep.passed

    def test_nondeterministic_function_rejected(self):
        x = leaf(np.ones(3))
        rng = np.random.default_rng(0)
        with pytest.raises(T.ContractError):
            grad_check(lambda: T.sum_(T.dropout(x, 0.5, True, rng)), [x])


OPS = sorted(op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_over_100_seeds(op):
    worst = 0.0
    for seed in range(100):
        f, leaves = op_cases(np.random.default_rng(seed))[op]
        rep = grad_check(f, leaves, tol=1e-4)
        worst = max(worst, rep.max_rel_error)
        assert rep.passed, (op, seed, rep)
    assert worst < 1e-4
