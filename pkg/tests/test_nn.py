"""MLP forward/backward against straight-line re-evaluation and finite
differences, init determinism, and the parameter file round trip."""

import io

import numpy as np
import pytest

from pvlite import nn


def loss_over_params(template, x, target):
    """Scalar quadratic loss as a function of the flat parameter vector."""

    def f(vec):
        p = nn.params_from_vector(template, vec)
        y = nn.mlp_forward(p, x)
        diff = y - target
        val = 0.5 * float((diff * diff).sum())
        w_g, b_g, _ = nn.mlp_backward(p, x, diff)
        grad = nn.params_to_vector(
            nn.MlpParams(p.layer_dims, w_g, b_g, p.out_activation)
        )
        return val, grad

    return f


class TestForward:
    def test_zero_net(self):
        p = nn.zero_params((3, 4, 2))
        np.testing.assert_array_equal(nn.mlp_forward(p, np.ones(3)), np.zeros(2))

    def test_identity_linear_layer(self):
        p = nn.MlpParams((4, 4), [np.eye(4)], [np.zeros(4)])
        x = np.array([1.0, -2.0, 3.0, 0.5])
        np.testing.assert_array_equal(nn.mlp_forward(p, x), x)

    def test_matches_straightline_evaluation(self):
        p = nn.init_params((5, 7, 3), seed=0)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 5))
        h = np.maximum(x @ p.weights[0].T + p.biases[0], 0.0)
        expected = h @ p.weights[1].T + p.biases[1]
        np.testing.assert_allclose(nn.mlp_forward(p, x), expected, atol=1e-9)

    def test_sigmoid_output(self):
        p = nn.zero_params((3, 1), out_activation="sigmoid")
        assert nn.mlp_forward(p, np.zeros(3))[0] == pytest.approx(0.5)

    def test_width_mismatch_raises(self):
        p = nn.init_params((3, 2), seed=0)
        with pytest.raises(nn.ShapeError):
            nn.mlp_forward(p, np.zeros(4))

    def test_positive_homogeneity_bias_free(self):
        dims = (4, 6, 6, 2)
        p = nn.init_params(dims, seed=3)
        p = nn.MlpParams(dims, p.weights, [np.zeros(d) for d in dims[1:]])
        rng = np.random.default_rng(4)
        x = rng.normal(size=4)
        for a in (0.5, 2.0, 7.25):
            np.testing.assert_allclose(
                nn.mlp_forward(p, a * x), a * nn.mlp_forward(p, x), atol=1e-9
            )


class TestBackward:
    def test_dead_network_zero_input_grad(self):
        p = nn.zero_params((3, 4, 2))
        _, _, gx = nn.mlp_backward(p, np.ones(3), np.ones(2))
        np.testing.assert_array_equal(gx, np.zeros(3))

    def test_identity_layer_passes_upstream(self):
        p = nn.MlpParams((3, 3), [np.eye(3)], [np.zeros(3)])
        up = np.array([1.0, -2.0, 0.5])
        _, _, gx = nn.mlp_backward(p, np.zeros(3), up)
        np.testing.assert_array_equal(gx, up)

    @pytest.mark.parametrize("out_act", ["identity", "sigmoid"])
    def test_matches_finite_differences(self, out_act):
        template = nn.init_params((4, 6, 5, 2), seed=7, out_activation=out_act)
        rng = np.random.default_rng(8)
        x = rng.normal(size=4)
        target = rng.normal(size=2) * 0.2 + 0.4
        f = loss_over_params(template, x, target)
        err = nn.grad_check(f, nn.params_to_vector(template))
        assert err < 1e-4

    def test_input_gradient_matches_fd(self):
        p = nn.init_params((5, 8, 1), seed=9)
        rng = np.random.default_rng(10)
        x0 = rng.normal(size=5)

        def f(x):
            y = nn.mlp_forward(p, x)
            _, _, gx = nn.mlp_backward(p, x, np.ones(1))
            return float(y[0]), gx

        assert nn.grad_check(f, x0) < 1e-4


class TestGradCheck:
    def test_square_function(self):
        def f(x):
            return float(x[0] ** 2), np.array([2.0 * x[0]])

        assert nn.grad_check(f, np.array([3.0]), eps=1e-3) < 1e-6

    def test_linear_function(self):
        w = np.array([2.0, -3.0, 0.5])

        def f(x):
            return float(w @ x), w

        assert nn.grad_check(f, np.array([1.0, 2.0, 3.0])) < 1e-9

    def test_nonfinite_raises(self):
        def f(x):
            return float("nan"), np.zeros(1)

        with pytest.raises(FloatingPointError):
            nn.grad_check(f, np.zeros(1))


class TestInit:
    def test_deterministic(self):
        a = nn.init_params((4, 8, 1), seed=5)
        b = nn.init_params((4, 8, 1), seed=5)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_seeds_differ(self):
        a = nn.init_params((4, 8, 1), seed=5)
        b = nn.init_params((4, 8, 1), seed=6)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_param_count(self):
        p = nn.init_params((4, 8, 1), seed=0)
        assert p.num_params == 4 * 8 + 8 + 8 * 1 + 1

    def test_bound(self):
        p = nn.init_params((10, 20), seed=1)
        s = np.sqrt(6.0 / 30.0)
        assert np.abs(p.weights[0]).max() <= s
        assert np.abs(p.biases[0]).max() <= s


class TestVectorRoundTrip:
    def test_roundtrip(self):
        p = nn.init_params((3, 5, 2), seed=11)
        vec = nn.params_to_vector(p)
        q = nn.params_from_vector(p, vec)
        for a, b in zip(p.weights, q.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(p.biases, q.biases):
            np.testing.assert_array_equal(a, b)


class TestParamFiles:
    def test_save_load_roundtrip(self):
        p = nn.init_params((6, 4, 1), seed=12, out_activation="sigmoid")
        buf = io.BytesIO()
        nn.save_params(p, buf, name="pkw")
        buf.seek(0)
        name, q = nn.load_params(buf)
        assert name == "pkw"
        assert q.layer_dims == p.layer_dims
        assert q.out_activation == "sigmoid"
        for a, b in zip(p.weights, q.weights):
            np.testing.assert_array_equal(a, b)

    def test_multiple_sections(self):
        buf = io.BytesIO()
        nn.save_params(nn.init_params((2, 3), seed=0), buf, name="one")
        nn.save_params(nn.init_params((3, 1), seed=1), buf, name="two")
        buf.seek(0)
        sections = nn.load_param_sections(buf)
        assert set(sections) == {"one", "two"}
        assert sections["two"].layer_dims == (3, 1)

    def test_truncated_raises(self):
        p = nn.init_params((6, 4), seed=13)
        buf = io.BytesIO()
        nn.save_params(p, buf)
        data = buf.getvalue()[:-8]
        with pytest.raises(nn.ParamFileError):
            nn.load_params(io.BytesIO(data))

    def test_bad_magic_raises(self):
        with pytest.raises(nn.ParamFileError):
            nn.load_params(io.BytesIO(b"NOTMAGIC name=x out=identity dims=2,2\n"))
