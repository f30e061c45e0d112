import numpy as np
import pytest

from weatherlpr import tensorops as T


def check(analytic, f, x, tol=1e-6, step=1e-3):
    num = T.numeric_gradient(f, np.array(x, dtype=float), step=step)
    err = T.relative_error(analytic, num)
    assert err < tol, err


class TestConv2d:
    @pytest.mark.parametrize("groups", [1, 2])
    def test_gradcheck(self, groups):
        rng = np.random.default_rng(groups)
        x = rng.normal(size=(5, 6, 4))
        w = rng.normal(size=(3, 3, 4 // groups, 4), scale=0.3)
        b = rng.normal(size=4, scale=0.1)
        proj = rng.normal(size=(5, 6, 4))
        y, cache = T.conv2d(x, w, b, groups=groups)
        gx, gw, gb = T.conv2d_backward(cache, proj)
        check(gx, lambda v: np.sum(T.conv2d(v, w, b, groups=groups)[0] * proj), x)
        check(gw, lambda v: np.sum(T.conv2d(x, v, b, groups=groups)[0] * proj), w)
        check(gb, lambda v: np.sum(T.conv2d(x, w, v, groups=groups)[0] * proj), b)

    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 5, 3))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[1, 1, c, c] = 1.0
        y, _ = T.conv2d(x, w, np.zeros(3))
        np.testing.assert_allclose(y, x, atol=1e-14)

    def test_reflect_padding_at_corner(self):
        x = np.arange(9.0).reshape(3, 3, 1)
        w = np.full((3, 3, 1, 1), 1.0 / 9.0)
        y, _ = T.conv2d(x, w, np.zeros(1))
        padded = np.pad(x[..., 0], 1, mode="reflect")
        assert y[0, 0, 0] == pytest.approx(padded[0:3, 0:3].mean())


class TestConvTranspose:
    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 4, 6))
        w = rng.normal(size=(2, 2, 6, 2), scale=0.3)
        proj = rng.normal(size=(6, 8, 2))
        _, cache = T.conv_transpose2x2(x, w)
        gx, gw, _ = T.conv_transpose2x2_backward(cache, proj)
        check(gx, lambda v: np.sum(T.conv_transpose2x2(v, w)[0] * proj), x)
        check(gw, lambda v: np.sum(T.conv_transpose2x2(x, v)[0] * proj), w)

    def test_upsamples_2x(self):
        y, _ = T.conv_transpose2x2(np.ones((3, 4, 2)), np.ones((2, 2, 2, 1)))
        assert y.shape == (6, 8, 1)
        np.testing.assert_allclose(y, 2.0)


class TestPointwise:
    def test_softmax_uniform(self):
        p, _ = T.softmax(np.zeros((2, 5)))
        np.testing.assert_allclose(p, 0.2)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 7))
        np.testing.assert_allclose(T.softmax(x)[0], T.softmax(x + 100.0)[0],
                                   atol=1e-12)

    def test_softmax_gradcheck(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 6))
        proj = rng.normal(size=(3, 6))
        _, cache = T.softmax(x)
        gx = T.softmax_backward(cache, proj)
        check(gx, lambda v: np.sum(T.softmax(v)[0] * proj), x)

    def test_gelu_gradcheck(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 4))
        proj = rng.normal(size=(4, 4))
        _, cache = T.gelu(x)
        gx = T.gelu_backward(cache, proj)
        check(gx, lambda v: np.sum(T.gelu(v)[0] * proj), x)

    def test_gap_constant(self):
        y, _ = T.gap(np.full((3, 5, 2), 4.0))
        np.testing.assert_allclose(y, 4.0)

    def test_gap_gradcheck(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4, 2))
        proj = rng.normal(size=2)
        _, cache = T.gap(x)
        gx = T.gap_backward(cache, proj)
        check(gx, lambda v: np.sum(T.gap(v)[0] * proj), x)


class TestNorm:
    def test_layer_norm_moments(self):
        rng = np.random.default_rng(3)
        x = rng.normal(loc=5, scale=3, size=(10, 16))
        y = T.layer_norm(x, np.ones(16), np.zeros(16))[0]
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_layer_norm_gradcheck(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 8))
        g = rng.normal(size=8)
        b = rng.normal(size=8)
        proj = rng.normal(size=(4, 8))
        _, cache = T.layer_norm(x, g, b)
        gx, gg, gb = T.layer_norm_backward(cache, proj)
        check(gx, lambda v: np.sum(T.layer_norm(v, g, b)[0] * proj), x)
        check(gg, lambda v: np.sum(T.layer_norm(x, v, b)[0] * proj), g)
        check(gb, lambda v: np.sum(T.layer_norm(x, g, v)[0] * proj), b)

    def test_spatial_norm_gradcheck(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 4, 2))
        g = rng.normal(size=2)
        b = rng.normal(size=2)
        proj = rng.normal(size=(3, 4, 2))
        _, cache = T.moment_norm(x, g, b, axes=(0, 1))
        gx, gg, gb = T.moment_norm_backward(cache, proj)
        check(gx, lambda v: np.sum(T.moment_norm(v, g, b, axes=(0, 1))[0] * proj), x)
        check(gg, lambda v: np.sum(T.moment_norm(x, v, b, axes=(0, 1))[0] * proj), g)
        check(gb, lambda v: np.sum(T.moment_norm(x, g, v, axes=(0, 1))[0] * proj), b)


class TestLinear:
    def test_gradcheck(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 5))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        proj = rng.normal(size=(6, 3))
        _, cache = T.linear(x, w, b)
        gx, gw, gb = T.linear_backward(cache, proj)
        check(gx, lambda v: np.sum(T.linear(v, w, b)[0] * proj), x)
        check(gw, lambda v: np.sum(T.linear(x, v, b)[0] * proj), w)
        check(gb, lambda v: np.sum(T.linear(x, w, v)[0] * proj), b)


class TestHarness:
    def test_numeric_gradient_on_quadratic(self):
        # known-gradient self-check of the finite-difference harness
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        x = np.array([1.5, -0.5])
        num = T.numeric_gradient(lambda v: 0.5 * v @ A @ v, x)
        np.testing.assert_allclose(num, A @ x, atol=1e-8)

    def test_relative_error(self):
        assert T.relative_error(np.ones(3), np.ones(3)) == 0.0
        assert T.relative_error(np.ones(3), 1.001 * np.ones(3)) < 2e-3
