"""Autodiff core: finite-difference oracles, second order, Adam, round-trips."""

import json

import numpy as np
import pytest

from ganuq.ndmath import (
    AdamState,
    AutodiffError,
    DimensionError,
    Tensor,
    adam_init,
    adam_step,
    concat,
    grad,
    init_mlp,
    load_mlp,
    mlp_forward,
    mlp_forward_traced,
    mlp_to_dict,
    mlp_from_dict,
    param_leaves,
    row_norm,
    save_mlp,
    softplus,
    tmean,
    tsum,
)
from ganuq.ndmath.nn import Layer, MlpParams


def central_diff(f, x, h=1e-5):
    """Finite-difference gradient oracle for scalar f of an ndarray."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


class TestBackward:
    def test_square(self):
        w = Tensor(3.0, requires_grad=True)
        (g,) = grad(w * w, [w])
        assert g.data == 6.0

    def test_l2_norm(self):
        w = Tensor(np.array([[3.0, 4.0]]), requires_grad=True)
        (g,) = grad(tsum(row_norm(w)), [w])
        np.testing.assert_allclose(g.data, [[0.6, 0.8]], atol=1e-12)

    def test_non_scalar_root_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(AutodiffError):
            grad(w * w, [w])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_mlp_loss_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = init_mlp(3, [8, 8], 5, rng, activation="leaky_relu")
        x = rng.standard_normal((7, 3))

        leaves = param_leaves(params)
        out = mlp_forward_traced(params, leaves, Tensor(x))
        loss = tmean(out * out)
        grads = grad(loss, leaves)

        arrays = params.flat_arrays()
        for i, arr in enumerate(arrays):
            def f(a, i=i):
                trial = [p.copy() for p in arrays]
                trial[i] = a
                q = params.copy()
                q.set_flat_arrays(trial)
                y = mlp_forward(q, x)
                return np.mean(y * y)

            assert rel_err(grads[i].data, central_diff(f, arr)) < 1e-5

    def test_concat_slice_softplus_gradients(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        loss = tmean(softplus(concat([a, b], axis=1)))
        ga, gb = grad(loss, [a, b])

        def f_a(x):
            z = np.concatenate([x, b.data], axis=1)
            return np.mean(np.logaddexp(0.0, z))

        def f_b(x):
            z = np.concatenate([a.data, x], axis=1)
            return np.mean(np.logaddexp(0.0, z))

        assert rel_err(ga.data, central_diff(f_a, a.data)) < 1e-6
        assert rel_err(gb.data, central_diff(f_b, b.data)) < 1e-6

    def test_disconnected_input_gets_zero(self):
        w = Tensor(2.0, requires_grad=True)
        u = Tensor(1.0, requires_grad=True)
        (gu,) = grad(w * w, [u])
        assert gu.data == 0.0


class TestSecondOrder:
    def test_cubic(self):
        # g(x) = x^3: dg/dx at 2 is 12; h = (dg/dx)^2, dh/dx = 2*12*(6*2) = 288
        x = Tensor(2.0, requires_grad=True)
        (g1,) = grad(x * x * x, [x], create_graph=True)
        assert g1.item() == pytest.approx(12.0)
        (g2,) = grad(g1 * g1, [x])
        assert g2.item() == pytest.approx(288.0)

    def test_squared_norm(self):
        # g(x) = ||x||^2 has grad 2x; h = ||grad||^2 has dh/dx = 8x
        x = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
        (g1,) = grad(tsum(x * x), [x], create_graph=True)
        (g2,) = grad(tsum(g1 * g1), [x])
        np.testing.assert_allclose(g2.data, 8.0 * x.data, atol=1e-12)

    def test_gradient_penalty_second_order_vs_finite_differences(self):
        # penalty (||grad_y f||-1)^2 through a small critic-like net
        rng = np.random.default_rng(11)
        params = init_mlp(3, [6], 4, rng, activation="leaky_relu")
        y0 = rng.standard_normal((5, 3))

        def penalty_and_grad(arrays):
            q = params.copy()
            q.set_flat_arrays([a.copy() for a in arrays])
            leaves = param_leaves(q)
            y = Tensor(y0, requires_grad=True)
            emb = mlp_forward_traced(q, leaves, y)
            f = tsum(row_norm(emb))
            (gy,) = grad(f, [y], create_graph=True)
            pen = tmean((row_norm(gy) - 1.0) ** 2)
            return pen, leaves

        pen, leaves = penalty_and_grad(params.flat_arrays())
        second = grad(pen, leaves)

        arrays = params.flat_arrays()
        for i, arr in enumerate(arrays):
            def f(a, i=i):
                trial = [p.copy() for p in arrays]
                trial[i] = a
                val, _ = penalty_and_grad(trial)
                return val.item()

            oracle = central_diff(f, arr, h=1e-5)
            assert rel_err(second[i].data, oracle) < 1e-4


class TestMlpForward:
    def test_single_affine_layer(self):
        params = MlpParams(
            [Layer(np.array([[2.0]]), np.array([1.0]), "linear")], 1, 1
        )
        np.testing.assert_array_equal(mlp_forward(params, [[3.0]]), [[7.0]])

    def test_zero_weights_give_zero(self):
        params = MlpParams(
            [Layer(np.zeros((4, 2)), np.zeros(2), "linear")], 4, 2
        )
        out = mlp_forward(params, np.random.default_rng(0).standard_normal((6, 4)))
        np.testing.assert_array_equal(out, np.zeros((6, 2)))

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(3)
        params = init_mlp(3, [8], 5, rng, activation="relu")
        x = rng.standard_normal((10, 3))
        got = mlp_forward(params, x)

        # independent per-row, per-unit loop re-evaluation
        expect = np.zeros((10, 5))
        for r in range(10):
            h = list(x[r])
            for layer in params.layers:
                nh = []
                for j in range(layer.weight.shape[1]):
                    s = layer.bias[j]
                    for i, hi in enumerate(h):
                        s += hi * layer.weight[i, j]
                    if layer.activation == "relu" and s < 0:
                        s = 0.0
                    nh.append(s)
                h = nh
            expect[r] = h
        assert rel_err(got, expect) < 1e-12

    def test_traced_matches_numpy_path(self):
        rng = np.random.default_rng(4)
        params = init_mlp(4, [6, 6], 3, rng)
        x = rng.standard_normal((5, 4))
        traced = mlp_forward_traced(params, param_leaves(params), Tensor(x))
        np.testing.assert_array_equal(traced.data, mlp_forward(params, x))

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        params = init_mlp(3, [4], 2, rng)
        with pytest.raises(DimensionError):
            mlp_forward(params, np.zeros((5, 2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, 2.0])]
        state = adam_init(p, lr=0.1)
        q, state2 = adam_step(p, [np.zeros(2)], state)
        np.testing.assert_array_equal(q[0], p[0])
        assert state2.step_count == 1

    def test_first_step_magnitude_is_lr(self):
        p = [np.array([0.0])]
        state = adam_init(p, lr=0.05, epsilon=1e-16)
        q, _ = adam_step(p, [np.array([3.7])], state)
        assert q[0][0] == pytest.approx(-0.05, rel=1e-6)

    def test_converges_on_quadratic(self):
        # oracle: run the reference scalar Adam recursion independently
        def reference(w0, lr, b1, b2, eps, steps):
            w, m, v = w0, 0.0, 0.0
            for t in range(1, steps + 1):
                g = 2.0 * (w - 5.0)
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            return w

        p = [np.array([0.0])]
        state = adam_init(p, lr=0.1, beta1=0.9, beta2=0.999)
        for _ in range(100):
            g = 2.0 * (p[0] - 5.0)
            p, state = adam_step(p, [g], state)
        expect = reference(0.0, 0.1, 0.9, 0.999, 1e-8, 100)
        assert p[0][0] == pytest.approx(expect, rel=1e-12)
        assert abs(p[0][0] - 5.0) < 0.5

    def test_second_moment_nonnegative(self):
        p = [np.array([1.0])]
        state = adam_init(p)
        for g in [3.0, -2.0, 0.5]:
            p, state = adam_step(p, [np.array([g])], state)
        assert all((v >= 0).all() for v in state.second_moment)


class TestSerialization:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        params = init_mlp(3, [5, 5], 2, rng, seed=1234)
        path = tmp_path / "model.json"
        save_mlp(params, path)
        back = load_mlp(path)
        assert back.seed == 1234
        for a, b in zip(params.flat_arrays(), back.flat_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_dict_round_trip_through_json_text(self):
        rng = np.random.default_rng(10)
        params = init_mlp(2, [3], 1, rng)
        doc = json.loads(json.dumps(mlp_to_dict(params)))
        back = mlp_from_dict(doc)
        for a, b in zip(params.flat_arrays(), back.flat_arrays()):
            np.testing.assert_array_equal(a, b)


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        def build():
            rng = np.random.default_rng(77)
            params = init_mlp(3, [8, 8], 2, rng)
            x = rng.standard_normal((6, 3))
            leaves = param_leaves(params)
            out = mlp_forward_traced(params, leaves, Tensor(x))
            gs = grad(tmean(out * out), leaves)
            return out.data, [g.data for g in gs]

        o1, g1 = build()
        o2, g2 = build()
        np.testing.assert_array_equal(o1, o2)
        for a, b in zip(g1, g2):
            np.testing.assert_array_equal(a, b)
