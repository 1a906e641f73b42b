import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_velocity.kernel import (BaseKernel, KernelError, LocalizedKernel, default_kernel, fisher_sigma,
                                  localized_l2_norm, make_kernel)


@pytest.fixture(scope="module")
def k1():
    return default_kernel(1)


@pytest.fixture(scope="module")
def k2():
    return default_kernel(2)


def _fd_lap_1d(k, y, s=1e-3):
    # fourth-order five-point stencil
    f = k.eval_K
    return (-f(y + 2 * s) + 16 * f(y + s) - 30 * f(y) + 16 * f(y - s) - f(y - 2 * s)) / (12 * s**2)


class TestEvalK:
    def test_support_boundary_zero(self, k1):
        np.testing.assert_array_equal(k1.eval_K(np.array([-1.0, 1.0])), 0.0)

    def test_zero_outside_support(self, k1):
        y = np.array([-3.0, -1.0000001, 1.0000001, 2.5])
        np.testing.assert_array_equal(k1.eval_K(y), 0.0)
        np.testing.assert_array_equal(k1.eval_gradK(y), 0.0)
        np.testing.assert_array_equal(k1.eval_lapK(y), 0.0)

    def test_value_at_origin(self, k1):
        # -(d^2/dy^2)(1 - y^2)^5 at 0 is 10
        np.testing.assert_allclose(k1.eval_K(np.array([0.0])), [10.0], rtol=1e-14)

    def test_integral_vanishes(self, k1, k2):
        assert abs(k1.integral_K()) < 1e-12
        assert abs(k2.integral_K()) < 1e-10

    def test_closed_form_1d(self, k1):
        y = np.linspace(-0.99, 0.99, 41)
        # Kbar'' = 10(1-y^2)^3 (9y^2 - 1)
        expected = -10 * (1 - y**2) ** 3 * (9 * y**2 - 1)
        np.testing.assert_allclose(k1.eval_K(y), expected, atol=1e-12)

    def test_2d_zero_outside_ball(self, k2):
        y = np.array([[0.8, 0.8], [1.0, 0.0], [0.0, -1.2]])
        np.testing.assert_array_equal(k2.eval_K(y), 0.0)

    def test_2d_rejects_bad_shape(self, k2):
        with pytest.raises(KernelError):
            k2.eval_K(np.zeros((3, 3)))


class TestDerivatives:
    def test_gradient_vanishes_at_origin(self, k1, k2):
        np.testing.assert_array_equal(k1.eval_gradK(np.array([0.0])), [0.0])
        np.testing.assert_allclose(k2.eval_gradK(np.zeros((1, 2))), [[0.0, 0.0]], atol=1e-14)

    def test_lap_matches_finite_differences(self, k1):
        y = np.array([0.5])
        np.testing.assert_allclose(k1.eval_lapK(y), _fd_lap_1d(k1, y, 1e-3), rtol=1e-6)

    def test_random_points_against_finite_differences(self, k1):
        rng = np.random.default_rng(3)
        y = rng.uniform(-0.95, 0.95, 100)
        s = 1e-5
        fd_grad = (k1.eval_K(y + s) - k1.eval_K(y - s)) / (2 * s)
        scale = np.max(np.abs(k1.eval_gradK(y)))
        np.testing.assert_allclose(k1.eval_gradK(y), fd_grad, atol=1e-5 * scale)
        scale = np.max(np.abs(k1.eval_lapK(y)))
        np.testing.assert_allclose(k1.eval_lapK(y), _fd_lap_1d(k1, y), atol=1e-5 * scale)

    def test_2d_against_finite_differences(self, k2):
        rng = np.random.default_rng(4)
        r = rng.uniform(0, 0.9, 100)
        phi = rng.uniform(0, 2 * np.pi, 100)
        y = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)
        s = 1e-4
        e0, e1 = np.array([s, 0.0]), np.array([0.0, s])
        fd = np.stack([(k2.eval_K(y + e0) - k2.eval_K(y - e0)) / (2 * s),
                       (k2.eval_K(y + e1) - k2.eval_K(y - e1)) / (2 * s)], axis=-1)
        g = k2.eval_gradK(y)
        np.testing.assert_allclose(g, fd, atol=1e-5 * np.max(np.abs(g)))
        fd_lap = sum((k2.eval_K(y + e) - 2 * k2.eval_K(y) + k2.eval_K(y - e)) / s**2 for e in (e0, e1))
        lap = k2.eval_lapK(y)
        np.testing.assert_allclose(lap, fd_lap, atol=1e-4 * np.max(np.abs(lap)))

    @pytest.mark.parametrize("dim", [1, 2])
    def test_parity_even(self, dim):
        k = default_kernel(dim)
        rng = np.random.default_rng(11)
        y = rng.uniform(-1.2, 1.2, (100,) if dim == 1 else (100, 2))
        np.testing.assert_allclose(k.eval_K(y), k.eval_K(-y), atol=1e-12)
        np.testing.assert_allclose(k.eval_gradK(y), -k.eval_gradK(-y), atol=1e-12)
        np.testing.assert_allclose(k.eval_lapK(y), k.eval_lapK(-y), atol=1e-11)

    def test_parity_odd(self):
        k = make_kernel("odd_poly_bump", dim=1)
        y = np.linspace(-0.9, 0.9, 37)
        np.testing.assert_allclose(k.eval_K(y), -k.eval_K(-y), atol=1e-12)
        np.testing.assert_allclose(k.eval_gradK(y), k.eval_gradK(-y), atol=1e-12)


class TestNorms:
    def test_l2_against_riemann_sum(self, k1):
        y = np.linspace(-1, 1, 1_000_001)
        brute = math.sqrt(np.sum(k1.eval_K(y) ** 2) * (y[1] - y[0]))
        assert k1.l2_norm() == pytest.approx(brute, rel=1e-6)

    def test_derivative_norms_against_riemann_sum(self, k1):
        y = np.linspace(-1, 1, 400_001)
        dy = y[1] - y[0]
        assert k1.l2_norm(1) == pytest.approx(math.sqrt(np.sum(k1.eval_gradK(y) ** 2) * dy), rel=1e-6)
        assert k1.l2_norm("lap") == pytest.approx(math.sqrt(np.sum(k1.eval_lapK(y) ** 2) * dy), rel=1e-6)

    def test_2d_norm_against_grid_sum(self, k2):
        g = np.linspace(-1, 1, 1201)
        Y = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)
        brute = math.sqrt(np.sum(k2.eval_K(Y) ** 2) * (g[1] - g[0]) ** 2)
        assert k2.l2_norm() == pytest.approx(brute, rel=1e-4)

    @pytest.mark.parametrize("c", [-3.0, 0.5, 2.0])
    def test_homogeneity(self, k1, c):
        scaled = make_kernel("poly_bump", scale=c)
        assert scaled.l2_norm() == pytest.approx(abs(c) * k1.l2_norm(), rel=1e-13)

    def test_unknown_label(self, k1):
        with pytest.raises(KernelError):
            k1.l2_norm("grad")

    @given(delta=st.floats(0.01, 0.5), x=st.floats(0.0, 1.0))
    @settings(max_examples=25, deadline=None)
    def test_localized_norm_is_invariant(self, delta, x):
        k = default_kernel(1)
        lk = LocalizedKernel(k, delta, [x])
        u = np.linspace(x - delta, x + delta, 20001)
        brute = math.sqrt(np.sum(lk(u) ** 2) * (u[1] - u[0]))
        assert brute == pytest.approx(k.l2_norm(), rel=1e-6)
        assert localized_l2_norm(lk) == pytest.approx(k.l2_norm(), rel=1e-14)


class TestLocalizedKernel:
    def test_scaling_law(self, k1):
        delta, x = 0.05, 0.4
        u = np.linspace(0.33, 0.47, 29)
        y = (u - x) / delta
        for alpha, base, order in (((0,), k1.eval_K(y), 0), ((1,), k1.eval_gradK(y), 1),
                                   ("lap", k1.eval_lapK(y), 2)):
            lk = LocalizedKernel(k1, delta, [x], alpha)
            np.testing.assert_allclose(lk(u), delta ** (-0.5 - order) * base, rtol=1e-13)

    def test_support(self, k1):
        lk = LocalizedKernel(k1, 0.1, [0.5])
        assert lk.support_radius == pytest.approx(0.1)
        np.testing.assert_array_equal(lk(np.array([0.39, 0.61, 0.9])), 0.0)

    def test_rejects_nonpositive_delta(self, k1):
        with pytest.raises(KernelError):
            LocalizedKernel(k1, 0.0, [0.5])


class TestFisherSigma:
    def test_parseval_1d(self, k1):
        for T, a in ((1.0, 1.0), (0.3, 2.5)):
            sigma = fisher_sigma(k1, T, a)
            assert sigma.shape == (1, 1)
            assert sigma[0, 0] == pytest.approx(T / (2 * a) * k1.l2_norm() ** 2, rel=1e-6)

    def test_scaling_in_a_and_T(self, k1):
        base = fisher_sigma(k1, 1.0, 1.0)
        np.testing.assert_allclose(fisher_sigma(k1, 1.0, 2.0), base / 2, rtol=1e-14)
        np.testing.assert_allclose(fisher_sigma(k1, 2.0, 1.0), 2 * base, rtol=1e-14)

    def test_2d_radial_identity(self, k2):
        # for a radial kernel the matrix is isotropic with trace T/(2a) ||K||^2
        sigma = fisher_sigma(k2, 1.0, 1.0)
        np.testing.assert_allclose(sigma, sigma.T, atol=0)
        assert np.linalg.eigvalsh(sigma)[0] > 0
        np.testing.assert_allclose(sigma, 0.25 * k2.l2_norm() ** 2 * np.eye(2), rtol=1e-4, atol=1e-6)

    def test_rejects_nonpositive_inputs(self, k1):
        with pytest.raises(ValueError):
            fisher_sigma(k1, 0.0, 1.0)
        with pytest.raises(ValueError):
            fisher_sigma(k1, 1.0, -1.0)


class TestConstruction:
    def test_rejects_low_power(self):
        with pytest.raises(KernelError):
            make_kernel("poly_bump", power=3)

    def test_rejects_non_smooth_pieces(self):
        with pytest.raises(KernelError):
            make_kernel("piecewise", radius=1.0,
                        pieces=[{"lo": -1.0, "hi": 1.0, "coef": [1.0, 0.0, -1.0]}])

    def test_rejects_wrong_parity(self):
        coef = make_kernel("odd_poly_bump").pieces[0].coef
        with pytest.raises(KernelError):
            make_kernel("piecewise", radius=1.0, parity="even",
                        pieces=[{"lo": -1.0, "hi": 1.0, "coef": coef.tolist()}])

    def test_unknown_name(self):
        with pytest.raises(KernelError):
            make_kernel("gaussian")

    def test_piecewise_split_matches_single_piece(self, k1):
        c = k1.pieces[0].coef.tolist()
        split = make_kernel("piecewise", radius=1.0, pieces=[{"lo": -1.0, "hi": 0.0, "coef": c},
                                                             {"lo": 0.0, "hi": 1.0, "coef": c}])
        y = np.linspace(-1.1, 1.1, 51)
        np.testing.assert_allclose(split.eval_K(y), k1.eval_K(y), atol=1e-12)
        assert split.l2_norm() == pytest.approx(k1.l2_norm(), rel=1e-12)

    @pytest.mark.parametrize("dim", [1, 2])
    def test_json_roundtrip(self, dim):
        k = make_kernel("poly_bump", dim=dim, power=6, radius=0.8)
        back = BaseKernel.from_json(k.to_json())
        json.loads(k.to_json())
        y = np.linspace(-0.7, 0.7, 9) if dim == 1 else np.random.default_rng(0).uniform(-0.5, 0.5, (9, 2))
        np.testing.assert_array_equal(back.eval_K(y), k.eval_K(y))
        assert back.radius == k.radius and back.parity == k.parity

    def test_from_dict_by_name(self):
        k = BaseKernel.from_dict({"name": "poly_bump", "power": 5})
        np.testing.assert_array_equal(k.eval_K(np.array([0.3])), default_kernel().eval_K(np.array([0.3])))
