"""Activation values, derivatives, Gaussian duals, and Hermite expansions."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odenets.activations import (
    PairCovariance,
    activation_names,
    deriv_activation,
    dual_deriv,
    dual_value,
    eval_activation,
    get_activation,
    hermite_coeffs,
    nonpoly_witness,
)
from odenets.errors import ConfigError, DomainError


def relu_dual_value_closed(rho: float) -> float:
    # Arc-cosine kernel of order 1 on unit-variance inputs.
    return (math.sqrt(1 - rho * rho) + rho * (math.pi - math.acos(rho))) / (
        2 * math.pi
    )


def relu_dual_deriv_closed(rho: float) -> float:
    # Orthant probability P(u > 0, ubar > 0).
    return 0.25 + math.asin(rho) / (2 * math.pi)


class TestPointwise:
    def test_relu_values(self):
        assert eval_activation("relu", -1.0) == 0.0
        assert eval_activation("relu", 2.5) == 2.5
        assert deriv_activation("relu", 2.0) == 1.0
        assert deriv_activation("relu", -3.0) == 0.0
        # Fixed subgradient at the kink.
        assert deriv_activation("relu", 0.0) == 0.0

    def test_softplus_shift(self):
        assert abs(eval_activation("softplus-shifted", 0.0)) <= 1e-12
        assert eval_activation("softplus-raw", 0.0) == pytest.approx(math.log(2))
        assert deriv_activation("softplus-raw", 0.0) == pytest.approx(0.5)
        assert deriv_activation("softplus-shifted", 0.0) == pytest.approx(0.5)

    def test_quadratic_identity(self):
        assert eval_activation("quadratic", 3.0) == 9.0
        assert deriv_activation("identity", 7.3) == 1.0

    def test_gelu_exact_form(self):
        from scipy.special import ndtr

        x = np.linspace(-4, 4, 41)
        np.testing.assert_allclose(eval_activation("gelu", x), x * ndtr(x))
        # Derivative consistent with a central difference.
        eps = 1e-6
        fd = (eval_activation("gelu", x + eps) - eval_activation("gelu", x - eps)) / (
            2 * eps
        )
        np.testing.assert_allclose(deriv_activation("gelu", x), fd, atol=1e-9)

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            eval_activation("relu", math.nan)
        with pytest.raises(DomainError):
            deriv_activation("tanh", math.inf)

    def test_metadata_invariants(self):
        for name in ("softplus-shifted", "relu", "tanh", "identity"):
            assert get_activation(name).lipschitz_l1 == 1.0
        for name in activation_names():
            act = get_activation(name)
            assert act.is_polynomial == (name in ("quadratic", "identity"))
            if act.zero_at_zero:
                assert abs(float(act.value(np.array(0.0)))) <= 1e-12

    def test_lipschitz_constants_bound_sampled_slopes(self):
        x = np.linspace(-6, 6, 2001)
        for name in activation_names():
            act = get_activation(name)
            slopes = np.abs(np.diff(act.value(x)) / np.diff(x))
            assert slopes.max() <= act.lipschitz_l1 + 1e-6
            dslopes = np.abs(np.diff(act.derivative(x)) / np.diff(x))
            if name != "relu":  # relu's derivative jumps at 0
                assert dslopes.max() <= act.lipschitz_l2 + 1e-6


class TestPairCovariance:
    def test_psd_validation(self):
        PairCovariance(1.0, 1.0, 0.999999)
        with pytest.raises(DomainError):
            PairCovariance(1.0, 1.0, 1.5)
        with pytest.raises(DomainError):
            PairCovariance(-1.0, 1.0, 0.0)

    @given(
        st.floats(0.01, 10.0),
        st.floats(0.01, 10.0),
        st.floats(-1.0, 1.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_valid_on_correlation_parameterization(self, a, b, rho):
        PairCovariance(a, b, rho * math.sqrt(a * b))


class TestDualValue:
    def test_identity_returns_covariance(self):
        for a, b, rho in [(1.0, 1.0, 0.3), (2.0, 0.5, -0.8), (4.0, 4.0, 1.0)]:
            c = PairCovariance(a, b, rho * math.sqrt(a * b))
            assert dual_value("identity", c) == pytest.approx(c.cov, abs=1e-12)

    def test_relu_unit_cases(self):
        assert dual_value("relu", PairCovariance(1, 1, 1)) == pytest.approx(0.5, abs=1e-9)
        assert dual_value("relu", PairCovariance(1, 1, 0)) == pytest.approx(
            1 / (2 * math.pi), abs=1e-9
        )

    def test_relu_closed_form_grid(self):
        for rho in np.linspace(-0.99, 0.99, 23):
            c = PairCovariance(1.0, 1.0, float(rho))
            assert dual_value("relu", c) == pytest.approx(
                relu_dual_value_closed(rho), abs=1e-8
            )
            assert dual_deriv("relu", c) == pytest.approx(
                relu_dual_deriv_closed(rho), abs=1e-8
            )

    def test_relu_deriv_boundaries(self):
        assert dual_deriv("relu", PairCovariance(1, 1, 0)) == pytest.approx(0.25, abs=1e-9)
        assert dual_deriv("relu", PairCovariance(1, 1, 1)) == pytest.approx(0.5, abs=1e-9)

    def test_symmetric_in_variances(self):
        c1 = PairCovariance(2.0, 0.5, 0.4)
        c2 = PairCovariance(0.5, 2.0, 0.4)
        for name in activation_names():
            assert dual_value(name, c1) == pytest.approx(dual_value(name, c2), rel=1e-12)

    def test_perfect_correlation_is_second_moment(self):
        # cov = sqrt(var_a var_b) makes the pair a deterministic rescaling.
        rng = np.random.default_rng(0)
        z = rng.standard_normal(200_000)
        for name in ("softplus-shifted", "relu", "tanh"):
            act = get_activation(name)
            c = PairCovariance(1.0, 1.0, 1.0)
            mc = float(np.mean(act.value(z) ** 2))
            se = float(np.std(act.value(z) ** 2)) / math.sqrt(z.size)
            assert abs(dual_value(name, c) - mc) <= 5 * se
            assert dual_value(name, PairCovariance(2.0, 2.0, 2.0)) >= 0

    def test_quadrature_matches_monte_carlo(self):
        rng = np.random.default_rng(42)
        m = 1_000_000
        z1 = rng.standard_normal(m)
        z2 = rng.standard_normal(m)
        for name in activation_names():
            act = get_activation(name)
            for rho in (-0.99, -0.5, 0.0, 0.7, 0.99):
                u = z1
                ub = rho * z1 + math.sqrt(1 - rho * rho) * z2
                prod = act.value(u) * act.value(ub)
                mc = float(np.mean(prod))
                se = float(np.std(prod)) / math.sqrt(m)
                quad = dual_value(name, PairCovariance(1.0, 1.0, rho))
                assert abs(quad - mc) <= 5 * se + 1e-12, (name, rho)

    def test_order_validation(self):
        with pytest.raises(ConfigError):
            dual_value("relu", PairCovariance(1, 1, 0), order=1)

    def test_degenerate_and_zero_variance(self):
        # Rank-1 fallback at |rho| = 1 with anti-correlation.
        c = PairCovariance(1.0, 4.0, -2.0)
        got = dual_value("identity", c)
        assert got == pytest.approx(-2.0, abs=1e-10)
        # A vanishing variance pins that side at phi(0).
        c0 = PairCovariance(0.0, 1.0, 0.0)
        raw = dual_value("softplus-raw", c0)
        z = np.random.default_rng(3).standard_normal(400_000)
        target = math.log(2) * float(np.mean(np.logaddexp(0, z)))
        assert raw == pytest.approx(target, rel=5e-3)


class TestHermite:
    def test_identity_is_h1(self):
        coeffs = hermite_coeffs("identity", 1.0, 5)
        np.testing.assert_allclose(coeffs, [0, 1, 0, 0, 0], atol=1e-12)

    def test_quadratic_expansion(self):
        coeffs = hermite_coeffs("quadratic", 1.0, 5)
        np.testing.assert_allclose(coeffs, [1, 0, math.sqrt(2), 0, 0], atol=1e-10)

    def test_softplus_parseval(self):
        # Independent 1-D quadrature oracle for E mu(z)^2.
        nodes, weights = np.polynomial.hermite_e.hermegauss(240)
        weights = weights / math.sqrt(2 * math.pi)
        act = get_activation("softplus-shifted")
        second_moment = float(np.dot(weights, act.value(nodes) ** 2))
        coeffs = hermite_coeffs("softplus-shifted", 1.0, 32)
        assert abs(np.sum(coeffs**2) - second_moment) <= 1e-3

    def test_parseval_monotone_in_count(self):
        nodes, weights = np.polynomial.hermite_e.hermegauss(240)
        weights = weights / math.sqrt(2 * math.pi)
        act = get_activation("tanh")
        second_moment = float(np.dot(weights, act.value(1.3 * nodes) ** 2))
        prev_err = math.inf
        for count in (4, 8, 16, 32, 64):
            coeffs = hermite_coeffs("tanh", 1.3, count)
            err = abs(np.sum(coeffs**2) - second_moment)
            assert err <= prev_err + 1e-12
            prev_err = err

    def test_validation(self):
        with pytest.raises(ConfigError):
            hermite_coeffs("relu", 1.0, 0)
        with pytest.raises(ConfigError):
            hermite_coeffs("relu", -1.0, 4)


class TestNonpolyWitness:
    def test_polynomials_fail(self):
        for name in ("quadratic", "identity"):
            rep = nonpoly_witness(name, 1.0, 32, 1e-12)
            assert rep["even_hits"] == 0 and rep["odd_hits"] == 0
            assert not rep["passes"]

    def test_softplus_trailing_mass(self):
        # softplus(x) - softplus(-x) = x, so the function is linear plus an
        # even part: odd Hermite coefficients vanish identically beyond
        # degree 1, while even ones stay nonzero at every degree. The
        # both-parity criterion therefore cannot pass for this activation;
        # the trailing even-parity mass is what separates it from a
        # polynomial.
        rep = nonpoly_witness("softplus-shifted", 1.0, 16, 1e-12)
        assert rep["even_hits"] > 0
        assert rep["odd_hits"] == 0
        assert not rep["passes"]
        coeffs = hermite_coeffs("softplus-shifted", 1.0, 16)
        odd_tail = coeffs[3::2]
        assert np.max(np.abs(odd_tail)) < 1e-14

    def test_tanh_is_odd(self):
        rep = nonpoly_witness("tanh", 1.0, 16, 1e-12)
        assert rep["odd_hits"] > 0 and rep["even_hits"] == 0

    def test_count_validation(self):
        with pytest.raises(ConfigError):
            nonpoly_witness("relu", 1.0, 4, 1e-12)
