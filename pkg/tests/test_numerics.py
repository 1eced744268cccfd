import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uwbguard import numerics as nx
from uwbguard.numerics import BatchNormState, Mode


def central_diff(f, x, idx, h=1e-5):
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def bn_state(rng):
    return BatchNormState(
        gamma=rng.uniform(0.5, 1.5, 3),
        beta=rng.normal(size=3),
        running_mean=rng.normal(size=3),
        running_var=rng.uniform(0.5, 2.0, 3),
    )


class TestBatchNorm:
    def test_self_stats_on_standardized_input_is_identity(self, rng):
        x = rng.normal(size=(3, 256))
        x = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
        out, _ = nx.batchnorm_forward(x, BatchNormState.fresh(3), Mode.SELF)
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_constant_input_self_stats_gives_zero(self):
        out, _ = nx.batchnorm_forward(np.full((3, 16), 4.2), BatchNormState.fresh(3), Mode.SELF)
        assert np.all(out == 0)

    def test_running_equals_self_when_stats_match(self, rng):
        x = rng.normal(2.0, 3.0, size=(3, 256))
        state = BatchNormState(
            gamma=rng.uniform(0.5, 1.5, 3), beta=rng.normal(size=3), running_mean=x.mean(-1), running_var=x.var(-1)
        )
        a, _ = nx.batchnorm_forward(x, state, Mode.RUNNING)
        b, _ = nx.batchnorm_forward(x, state, Mode.SELF)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_running_mode_formula(self, rng, bn_state):
        x = rng.normal(size=(2, 3, 8))
        out, _ = nx.batchnorm_forward(x, bn_state, Mode.RUNNING)
        for n in range(3):
            expected = (x[:, n] - bn_state.running_mean[n]) / np.sqrt(bn_state.running_var[n] + 1e-5)
            np.testing.assert_allclose(out[:, n], bn_state.gamma[n] * expected + bn_state.beta[n], rtol=1e-12)

    def test_channel_mismatch(self, bn_state):
        with pytest.raises(ValueError, match="channels"):
            nx.batchnorm_forward(np.zeros((4, 8)), bn_state)

    def test_non_positive_epsilon(self):
        with pytest.raises(ValueError, match="epsilon_bn"):
            BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), epsilon_bn=0.0)

    def test_negative_running_var_rejected(self):
        with pytest.raises(ValueError):
            BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))

    def test_momentum_update(self, bn_state):
        new = bn_state.updated(np.zeros(3), np.zeros(3))
        np.testing.assert_allclose(new.running_mean, 0.9 * bn_state.running_mean)
        np.testing.assert_allclose(new.running_var, 0.9 * bn_state.running_var)

    @pytest.mark.parametrize("mode", list(Mode))
    def test_backward_matches_finite_differences(self, rng, bn_state, mode):
        x = rng.normal(size=(2, 3, 7))
        w = rng.normal(size=x.shape)
        out, cache = nx.batchnorm_forward(x, bn_state, mode)
        dx, dgamma, dbeta = nx.batchnorm_backward(w, cache)

        def f(xx):
            return np.sum(w * nx.batchnorm_forward(xx, bn_state, mode)[0])

        for idx in [(0, 0, 0), (1, 2, 6), (0, 1, 3), (1, 0, 4)]:
            assert rel_err(dx[idx], central_diff(f, x, idx)) < 1e-6

        def fg(g):
            s = BatchNormState(g, bn_state.beta, bn_state.running_mean, bn_state.running_var)
            return np.sum(w * nx.batchnorm_forward(x, s, mode)[0])

        for n in range(3):
            assert rel_err(dgamma[n], central_diff(fg, bn_state.gamma.copy(), n)) < 1e-6
        np.testing.assert_allclose(dbeta, w.sum(axis=(0, 2)))


class TestMeanVarSubtract:
    def test_zero_input(self):
        out, _ = nx.mean_var_subtract_forward(np.zeros((6, 256)))
        assert np.all(out == 0)

    def test_constant_row(self):
        out, _ = nx.mean_var_subtract_forward(np.full((2, 9), -3.5))
        np.testing.assert_allclose(out, 0.0, atol=1e-15)

    def test_population_variance_worked_example(self):
        # mean 1, population variance 1 -> [0 - 1 - 1, 2 - 1 - 1]
        out, _ = nx.mean_var_subtract_forward(np.array([[0.0, 2.0]]))
        np.testing.assert_array_equal(out, [[-2.0, 0.0]])

    def test_against_loop_oracle(self, rng):
        x = rng.normal(size=(3, 11))
        out, _ = nx.mean_var_subtract_forward(x)
        for n in range(3):
            row = list(x[n])
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            np.testing.assert_allclose(out[n], [v - mu - var for v in row], rtol=1e-12)

    def test_backward(self, rng):
        x = rng.normal(size=(2, 3, 9))
        w = rng.normal(size=x.shape)
        _, cache = nx.mean_var_subtract_forward(x)
        dx = nx.mean_var_subtract_backward(w, cache)

        def f(xx):
            return np.sum(w * nx.mean_var_subtract_forward(xx)[0])

        for idx in [(0, 0, 0), (1, 2, 8), (0, 1, 4)]:
            assert rel_err(dx[idx], central_diff(f, x, idx)) < 1e-6


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(6, 20))
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        out, _ = nx.conv2d_same_forward(x, k, 0.0)
        np.testing.assert_array_equal(out, x)

    def test_all_ones_overlap_counts(self):
        out, _ = nx.conv2d_same_forward(np.ones((6, 10)), np.ones((3, 3)), 0.0)
        assert out[2, 5] == 9
        assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 4
        assert out[0, 5] == 6

    def test_zero_kernel_gives_bias(self, rng):
        out, _ = nx.conv2d_same_forward(rng.normal(size=(4, 5)), np.zeros((3, 3)), 0.75)
        assert np.all(out == 0.75)

    def test_against_loop_oracle(self, rng):
        x = rng.normal(size=(3, 5))
        k = rng.normal(size=(3, 3))
        out, _ = nx.conv2d_same_forward(x, k, 0.1)
        for h in range(3):
            for w in range(5):
                acc = 0.1
                for i in range(3):
                    for j in range(3):
                        hh, ww = h + i - 1, w + j - 1
                        if 0 <= hh < 3 and 0 <= ww < 5:
                            acc += k[i, j] * x[hh, ww]
                assert out[h, w] == pytest.approx(acc, abs=1e-12)

    def test_bad_kernel(self):
        with pytest.raises(ValueError, match="3x3"):
            nx.conv2d_same_forward(np.zeros((3, 5)), np.zeros((2, 2)), 0.0)

    def test_backward(self, rng):
        x = rng.normal(size=(2, 4, 6))
        k = rng.normal(size=(3, 3))
        w = rng.normal(size=x.shape)
        _, cache = nx.conv2d_same_forward(x, k, 0.3)
        dx, dk, db = nx.conv2d_same_backward(w, cache)
        f = lambda xx: np.sum(w * nx.conv2d_same_forward(xx, k, 0.3)[0])
        fk = lambda kk: np.sum(w * nx.conv2d_same_forward(x, kk, 0.3)[0])
        for idx in [(0, 0, 0), (1, 3, 5), (0, 2, 3)]:
            assert rel_err(dx[idx], central_diff(f, x, idx)) < 1e-7
        for idx in [(0, 0), (1, 1), (2, 0)]:
            assert rel_err(dk[idx], central_diff(fk, k, idx)) < 1e-7
        assert db == pytest.approx(w.sum())


class TestDense:
    def test_zero_weights(self, rng):
        b = rng.normal(size=4)
        out, _ = nx.dense_forward(rng.normal(size=7), np.zeros((7, 4)), b)
        np.testing.assert_array_equal(out, b)

    def test_unit_vector_selects_row(self, rng):
        w = rng.normal(size=(7, 4))
        b = rng.normal(size=4)
        out, _ = nx.dense_forward(np.eye(7)[3], w, b)
        np.testing.assert_allclose(out, w[3] + b, rtol=1e-15)

    def test_against_dot_product_oracle(self, rng):
        x, w, b = rng.normal(size=50), rng.normal(size=(50, 6)), rng.normal(size=6)
        out, _ = nx.dense_forward(x, w, b)
        expected = [sum(x[i] * w[i, c] for i in range(50)) + b[c] for c in range(6)]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            nx.dense_forward(np.zeros(5), np.zeros((4, 2)), np.zeros(2))

    def test_squared_loss_input_gradient_closed_form(self, rng):
        x, w, b, t = rng.normal(size=8), rng.normal(size=(8, 3)), rng.normal(size=3), rng.normal(size=3)
        out, cache = nx.dense_forward(x, w, b)
        dx, _, _ = nx.dense_backward(out - t, cache)
        np.testing.assert_allclose(dx, w @ (x @ w + b - t), atol=1e-10)


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(np.full(6, 2.5)), np.full(6, 1 / 6), rtol=1e-15)

    def test_two_class_closed_form(self):
        np.testing.assert_allclose(nx.softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75], rtol=1e-14)

    @given(
        arrays(np.float64, 6, elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_shift_invariance_and_simplex(self, logits, c):
        p = nx.softmax(logits)
        np.testing.assert_allclose(p, nx.softmax(logits + c), atol=1e-12)
        assert abs(p.sum() - 1) < 1e-9
        assert np.all(p > 0)

    def test_cross_entropy_values(self):
        assert nx.cross_entropy(np.eye(6)[2], 2) == 0
        assert nx.cross_entropy(np.full(6, 1 / 6), 4) == pytest.approx(np.log(6), abs=1e-12)
        assert nx.cross_entropy(np.array([0.25, 0.75]), 0) == pytest.approx(np.log(4), abs=1e-12)

    def test_cross_entropy_floor(self):
        assert nx.cross_entropy(np.array([0.0, 1.0]), 0) == pytest.approx(-np.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            nx.cross_entropy(np.full(6, 1 / 6), 6)

    def test_softmax_cross_entropy_gradient(self, rng):
        z = rng.normal(size=6)
        g = nx.softmax_cross_entropy_backward(nx.softmax(z), 3)
        f = lambda zz: float(nx.cross_entropy(nx.softmax(zz), 3))
        for i in range(6):
            assert rel_err(g[i], central_diff(f, z, i)) < 1e-7


def test_sigmoid_is_stable_at_extremes():
    s = nx.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])
