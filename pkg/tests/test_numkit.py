"""Forward/backward/optimizer checks against independent references."""

import numpy as np
import numpy.testing as npt
import pytest

from evotune import numkit

REL_TOL = 1e-4
FD_STEP = 1e-5


def make_net(rng, sizes, output="identity"):
    return numkit.init_mlp(rng, sizes, output_activation=output)


def reference_forward(params, x):
    """Scratch re-implementation with explicit loops (oracle)."""
    out = np.zeros((x.shape[0], params.out_dim))
    for r in range(x.shape[0]):
        a = x[r]
        for k, (w, b) in enumerate(params.layers):
            z = np.array([float(np.dot(w[j], a)) + b[j] for j in range(w.shape[0])])
            if k < len(params.layers) - 1:
                a = np.array([max(v, 0.0) for v in z])
            elif params.output_activation == "tanh":
                a = np.tanh(z)
            else:
                a = z
        out[r] = a
    return out


class TestForward:
    def test_zero_net_zero_output(self):
        params = numkit.MlpParams([(np.zeros((3, 2)), np.zeros(3))])
        out, _ = numkit.mlp_forward(params, np.ones((4, 2)))
        npt.assert_array_equal(out, np.zeros((4, 3)))

    def test_single_affine_layer(self):
        params = numkit.MlpParams([(np.array([[2.0]]), np.array([1.0]))])
        out, _ = numkit.mlp_forward(params, np.array([[3.0]]))
        npt.assert_allclose(out, [[7.0]])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_reference_forward(self, seed):
        rng = np.random.default_rng(seed)
        params = make_net(rng, [3, 8, 2], output="tanh" if seed % 2 else "identity")
        x = rng.uniform(-1, 1, size=(4, 3))
        out, _ = numkit.mlp_forward(params, x)
        npt.assert_allclose(out, reference_forward(params, x), rtol=1e-12, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        params = make_net(rng, [4, 6, 3])
        x = rng.uniform(-1, 1, size=(5, 4))
        a, _ = numkit.mlp_forward(params, x)
        b, _ = numkit.mlp_forward(params, x)
        npt.assert_array_equal(a, b)

    def test_tanh_output_bounded(self):
        rng = np.random.default_rng(7)
        params = make_net(rng, [3, 16, 4], output="tanh")
        x = rng.uniform(-3, 3, size=(32, 3))
        out, _ = numkit.mlp_forward(params, x)
        assert np.all(out > -1.0) and np.all(out < 1.0)
        # extreme inputs saturate to +-1.0 in float64 but never overshoot
        big, _ = numkit.mlp_forward(params, np.full((2, 3), 1e6))
        assert np.all(np.abs(big) <= 1.0)

    def test_shape_error(self):
        rng = np.random.default_rng(0)
        params = make_net(rng, [3, 2])
        with pytest.raises(ValueError):
            numkit.mlp_forward(params, np.zeros((2, 4)))

    def test_bad_layer_chain_rejected(self):
        with pytest.raises(ValueError):
            numkit.MlpParams([(np.zeros((3, 2)), np.zeros(3)),
                              (np.zeros((1, 4)), np.zeros(1))])


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(1)
        params = make_net(rng, [3, 5, 2])
        x = rng.uniform(-1, 1, size=(4, 3))
        _, cache = numkit.mlp_forward(params, x)
        grads, input_grad = numkit.mlp_backward(params, cache, np.zeros((4, 2)))
        for dw, db in grads:
            npt.assert_array_equal(dw, np.zeros_like(dw))
            npt.assert_array_equal(db, np.zeros_like(db))
        npt.assert_array_equal(input_grad, np.zeros((4, 3)))

    def test_squared_weight_chain(self):
        # two 1x1 layers both holding w=3 compute w*w; the total sensitivity to
        # the shared value is the sum of per-layer gradients: 3 + 3 = 6
        params = numkit.MlpParams([(np.array([[3.0]]), np.zeros(1)),
                                   (np.array([[3.0]]), np.zeros(1))])
        out, cache = numkit.mlp_forward(params, np.array([[1.0]]))
        npt.assert_allclose(out, [[9.0]])
        grads, _ = numkit.mlp_backward(params, cache, np.ones((1, 1)))
        npt.assert_allclose(grads[0][0], [[3.0]])
        npt.assert_allclose(grads[1][0], [[3.0]])
        assert grads[0][0][0, 0] + grads[1][0][0, 0] == pytest.approx(6.0)

    def test_upstream_shape_error(self):
        rng = np.random.default_rng(2)
        params = make_net(rng, [3, 2])
        x = rng.uniform(-1, 1, size=(4, 3))
        _, cache = numkit.mlp_forward(params, x)
        with pytest.raises(ValueError):
            numkit.mlp_backward(params, cache, np.zeros((4, 3)))

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_finite_differences(self, seed):
        # random nets up to 3 layers, widths <= 32, batch <= 16
        rng = np.random.default_rng(100 + seed)
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 33)) for _ in range(depth + 1)]
        output = "tanh" if seed % 2 else "identity"
        params = make_net(rng, sizes, output=output)
        batch = int(rng.integers(1, 17))
        x = rng.uniform(-1, 1, size=(batch, sizes[0]))
        # keep |f| small so the spec tolerance formula stays above FD noise
        g = rng.uniform(-1, 1, size=(batch, sizes[-1])) / (batch * sizes[-1])
        _, cache = numkit.mlp_forward(params, x)
        analytic, _ = numkit.mlp_backward(params, cache, g)
        fd = numkit.finite_diff_grad(
            lambda p: float(np.sum(g * numkit.mlp_forward(p, x)[0])), params, FD_STEP)
        assert numkit.max_rel_diff(analytic, fd) <= REL_TOL

    def test_input_grad_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        params = make_net(rng, [3, 6, 2])
        x = rng.uniform(-1, 1, size=(2, 3))
        g = rng.uniform(-1, 1, size=(2, 2))
        _, cache = numkit.mlp_forward(params, x)
        _, input_grad = numkit.mlp_backward(params, cache, g)
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += FD_STEP
            xm[idx] -= FD_STEP
            fd[idx] = (np.sum(g * numkit.mlp_forward(params, xp)[0])
                       - np.sum(g * numkit.mlp_forward(params, xm)[0])) / (2 * FD_STEP)
        npt.assert_allclose(input_grad, fd, rtol=1e-5, atol=1e-9)


class TestFiniteDiff:
    def test_constant_function(self):
        rng = np.random.default_rng(3)
        params = make_net(rng, [2, 3])
        fd = numkit.finite_diff_grad(lambda p: 1.5, params, FD_STEP)
        for dw, db in fd:
            npt.assert_array_equal(dw, np.zeros_like(dw))
            npt.assert_array_equal(db, np.zeros_like(db))

    def test_square_function(self):
        params = numkit.MlpParams([(np.array([[3.0]]), np.zeros(1))])
        fd = numkit.finite_diff_grad(lambda p: float(p.layers[0][0][0, 0] ** 2),
                                     params, FD_STEP)
        assert abs(fd[0][0][0, 0] - 6.0) < 1e-6

    def test_step_must_be_positive(self):
        params = numkit.MlpParams([(np.array([[1.0]]), np.zeros(1))])
        with pytest.raises(ValueError):
            numkit.finite_diff_grad(lambda p: 0.0, params, 0.0)


class TestAdam:
    def make_scalar(self, w):
        return numkit.MlpParams([(np.array([[float(w)]]), np.zeros(1))])

    def test_zero_grads_fresh_state_unchanged(self):
        params = self.make_scalar(1.0)
        grads = [(np.zeros((1, 1)), np.zeros(1))]
        new, state = numkit.adam_step(params, grads, numkit.adam_init(params), lr=0.1)
        npt.assert_array_equal(new.layers[0][0], params.layers[0][0])
        assert state.step == 1

    def test_lr_zero_unchanged_counter_incremented(self):
        params = self.make_scalar(2.0)
        grads = [(np.ones((1, 1)), np.ones(1))]
        new, state = numkit.adam_step(params, grads, numkit.adam_init(params), lr=0.0)
        npt.assert_array_equal(new.layers[0][0], params.layers[0][0])
        assert state.step == 1

    def test_first_step_bias_corrected_ratio(self):
        # w=1, g=1, lr=0.1: m_hat=1, v_hat=1, so the step is ~lr exactly
        params = self.make_scalar(1.0)
        grads = [(np.ones((1, 1)), np.zeros(1))]
        new, _ = numkit.adam_step(params, grads, numkit.adam_init(params), lr=0.1)
        assert new.layers[0][0][0, 0] == pytest.approx(0.9, abs=1e-8)

    def test_pure_function_of_inputs(self):
        rng = np.random.default_rng(9)
        params = make_net(rng, [2, 3, 1])
        grads = [(rng.standard_normal(w.shape), rng.standard_normal(b.shape))
                 for w, b in params.layers]
        state = numkit.adam_init(params)
        before = [w.copy() for w, _ in params.layers]
        a1, s1 = numkit.adam_step(params, grads, state, lr=0.01)
        a2, s2 = numkit.adam_step(params, grads, state, lr=0.01)
        for (w1, b1), (w2, b2) in zip(a1.layers, a2.layers):
            npt.assert_array_equal(w1, w2)
            npt.assert_array_equal(b1, b2)
        assert s1.step == s2.step == 1
        for w, orig in zip((w for w, _ in params.layers), before):
            npt.assert_array_equal(w, orig)  # inputs untouched

    def test_nonfinite_grads_rejected(self):
        params = self.make_scalar(1.0)
        grads = [(np.array([[np.nan]]), np.zeros(1))]
        with pytest.raises(FloatingPointError):
            numkit.adam_step(params, grads, numkit.adam_init(params), lr=0.1)


class TestSgd:
    def test_basic_step(self):
        params = numkit.MlpParams([(np.array([[1.0]]), np.array([2.0]))])
        grads = [(np.array([[0.5]]), np.array([1.0]))]
        new = numkit.sgd_step(params, grads, lr=0.1)
        npt.assert_allclose(new.layers[0][0], [[0.95]])
        npt.assert_allclose(new.layers[0][1], [1.9])
