import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from dmcvqkd.special import (
    QuadratureRule,
    binary_entropy,
    binomial_bound_F,
    gauss_radau,
    normal_cdf,
    regularized_upper_gamma,
    upper_incomplete_gamma,
)


def poisson_cdf(lam, k):
    return math.exp(-lam) * sum(lam**j / math.factorial(j) for j in range(k + 1))


class TestIncompleteGamma:
    def test_unit(self):
        assert upper_incomplete_gamma(1, 0) == pytest.approx(1.0, rel=1e-14)

    def test_factorial(self):
        assert upper_incomplete_gamma(14, 0) == pytest.approx(6227020800.0, rel=1e-14)

    def test_poisson_oracle(self):
        ratio = upper_incomplete_gamma(14, 20) / math.factorial(13)
        assert ratio == pytest.approx(poisson_cdf(20, 13), rel=1e-12)

    @pytest.mark.parametrize("a", [0.5, 1.5, 2.5, 7.5, 13.5])
    @pytest.mark.parametrize("x", [0.3, 1.0, 5.0, 20.0, 45.0])
    def test_half_integer_against_quadrature(self, a, x):
        exact, _ = integrate.quad(lambda t: t ** (a - 1) * math.exp(-t), x, np.inf, epsabs=0, epsrel=1e-13)
        assert upper_incomplete_gamma(a, x) == pytest.approx(exact, rel=1e-11)

    def test_large_order(self):
        assert upper_incomplete_gamma(50, 30) == pytest.approx(math.gamma(50) * stats.gamma.sf(30, 50), rel=1e-12)

    def test_recurrence_grid(self):
        for a in np.arange(0.5, 20.5, 0.5):
            for x in np.arange(0.0, 41.0, 2.0):
                lhs = upper_incomplete_gamma(a + 1, x)
                rhs = a * upper_incomplete_gamma(a, x) + x**a * math.exp(-x)
                assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_regularised(self):
        assert regularized_upper_gamma(5, 3) == pytest.approx(stats.gamma.sf(3, 5), rel=1e-12)

    @pytest.mark.parametrize("a,x", [(0, 1), (-1, 1), (1, -0.1)])
    def test_domain(self, a, x):
        with pytest.raises(ValueError):
            upper_incomplete_gamma(a, x)


class TestScalars:
    def test_binary_entropy_values(self):
        assert binary_entropy(0) == 0.0
        assert binary_entropy(1) == 0.0
        assert binary_entropy(0.5) == pytest.approx(1.0, abs=1e-15)
        assert binary_entropy(0.25) == pytest.approx(0.8112781244591328, abs=1e-14)

    @pytest.mark.parametrize("x", [-0.1, 1.1])
    def test_binary_entropy_domain(self, x):
        with pytest.raises(ValueError):
            binary_entropy(x)

    @given(st.floats(0.0, 1.0))
    def test_binary_entropy_symmetric(self, x):
        assert binary_entropy(x) == pytest.approx(binary_entropy(1.0 - x), abs=1e-12)

    def test_normal_cdf(self):
        assert normal_cdf(0) == 0.5
        assert abs(normal_cdf(40) - 1.0) < 1e-15
        assert normal_cdf(1) == pytest.approx(0.8413447460685429, abs=1e-13)

    @given(st.floats(-30, 30))
    def test_normal_cdf_matches_scipy(self, a):
        assert normal_cdf(a) == pytest.approx(stats.norm.cdf(a), abs=1e-12)


class TestBinomialBound:
    def test_centre(self):
        assert binomial_bound_F(10, 0.5, 5) == 0.5

    def test_sandwich_examples(self):
        exact = stats.binom.cdf(20, 100, 0.3)
        assert binomial_bound_F(100, 0.3, 20) <= exact <= binomial_bound_F(100, 0.3, 21)
        assert binomial_bound_F(50, 0.1, 49) <= 1.0
        assert binomial_bound_F(50, 0.1, 49) >= binomial_bound_F(50, 0.1, 48)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 400), st.floats(0.01, 0.99), st.data())
    def test_sandwich_property(self, n, p, data):
        # Extended-precision CDF: deep tails underflow in double precision.
        k = data.draw(st.integers(0, n - 1))
        exact = mpmath.betainc(n - k, k + 1, 0, 1 - mpmath.mpf(p), regularized=True)
        assert binomial_bound_F(n, p, k) <= exact * (1 + 1e-12)
        assert exact <= binomial_bound_F(n, p, k + 1) * (1 + 1e-12) + 1e-300

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            binomial_bound_F(10, p, 3)

    def test_k_domain(self):
        with pytest.raises(ValueError):
            binomial_bound_F(10, 0.5, 11)


class TestGaussRadau:
    def test_m1(self):
        rule = gauss_radau(1)
        assert rule.nodes.tolist() == [1.0] and rule.weights.tolist() == [1.0]

    def test_m2_moment_oracle(self):
        # w1 + w2 = 1, w1 t + w2 = 1/2, w1 t^2 + w2 = 1/3 with t2 = 1.
        a = np.array([[1, 1], [1 / 3, 1]])
        w = np.linalg.solve(a, [1.0, 0.5])
        rule = gauss_radau(2)
        assert np.allclose(rule.nodes, [1 / 3, 1.0], atol=1e-14)
        assert np.allclose(rule.weights, w, atol=1e-14)
        assert np.allclose(w, [0.75, 0.25])

    @pytest.mark.parametrize("m", range(1, 13))
    def test_invariants(self, m):
        rule = gauss_radau(m)
        assert rule.order == m
        assert rule.nodes[-1] == 1.0
        assert np.all(np.diff(rule.nodes) > 0) and rule.nodes[0] > 0
        assert np.all(rule.weights > 0)
        assert rule.weights.sum() == pytest.approx(1.0, abs=1e-12)
        for k in range(2 * m - 1):
            assert rule.integrate(lambda t: t**k) == pytest.approx(1.0 / (k + 1), abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_random_polynomials(self, m, seed):
        coef = np.random.default_rng(seed).normal(size=2 * m - 1)
        exact = float(sum(c / (k + 1) for k, c in enumerate(coef)))
        approx = gauss_radau(m).integrate(lambda t: np.polynomial.polynomial.polyval(t, coef))
        assert approx == pytest.approx(exact, abs=1e-9)

    def test_not_exact_beyond_degree(self):
        rule = gauss_radau(3)
        assert abs(rule.integrate(lambda t: t**5) - 1 / 6) > 1e-6

    @pytest.mark.parametrize("m", [0, -1, 2.5])
    def test_domain(self, m):
        with pytest.raises(ValueError):
            gauss_radau(m)

    def test_rule_validation(self):
        with pytest.raises(ValueError):
            QuadratureRule(np.array([0.5, 0.9]), np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            QuadratureRule(np.array([0.5, 1.0]), np.array([1.5, -0.5]))
