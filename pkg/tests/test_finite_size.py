import math
from dataclasses import replace

import numpy as np
import pytest
from geat_oracle import geat_oracle, key_length_oracle
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from dmcvqkd import finite_size as fs
from dmcvqkd.entropy import AffineScoreFunction
from dmcvqkd.protocol import ALL_SCORES


def flat_f(value, var=0.0):
    return AffineScoreFunction(ALL_SCORES, value, np.zeros(len(ALL_SCORES)), min_sigma_bound=value, var_bound=var)


def random_f(rng, scale=1.0):
    coef = rng.normal(scale=scale, size=len(ALL_SCORES))
    const = rng.uniform(0.0, 1.0)
    lo = const + coef.min() - rng.uniform(0, scale)
    return AffineScoreFunction(ALL_SCORES, const, coef, min_sigma_bound=lo, var_bound=rng.uniform(0, 4 * scale**2))


def oracle_for(f, h, n, beta, d_z, eps_s, eps_ea):
    return geat_oracle(f.max_value, f.min_sigma_bound, f.var_bound, h, n, beta, d_z, eps_s, eps_ea)


class TestGeat:
    def test_reference_point(self):
        f = flat_f(0.5)
        terms = fs.geat_terms(f, 0.5, 1e10, 0.01, 5, 1e-6, 1e-6)
        ref = oracle_for(f, 0.5, 1e10, 0.01, 5, 1e-6, 1e-6)
        assert terms.v == pytest.approx(float(ref["V"]), rel=1e-13)
        assert terms.k_beta == pytest.approx(float(ref["K_beta"]), rel=1e-12)
        assert terms.epsilon_term == pytest.approx(float(ref["epsilon_term"]), rel=1e-12)
        assert terms.total == pytest.approx(float(ref["total"]), rel=1e-12)

    def test_epsilon_term_positive(self):
        for beta in (1e-10, 1e-4, 0.1, 0.49):
            assert fs.geat_terms(flat_f(0.5), 0.5, 1e10, beta, 5, 1e-6, 5e-7).epsilon_term > 0

    def test_random_against_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            f = random_f(rng, scale=rng.uniform(0.1, 20))
            h = f.min_value
            n, beta = 10 ** rng.uniform(4, 14), rng.uniform(1e-6, 0.49)
            eps_s, eps_ea = 10 ** rng.uniform(-12, -2), 10 ** rng.uniform(-12, -2)
            got = fs.geat_bound(f, h, n, beta, 5, eps_s, eps_ea)
            ref = float(oracle_for(f, h, n, beta, 5, eps_s, eps_ea)["total"])
            assert got == pytest.approx(ref, rel=1e-9, abs=1e-9)

    def test_steep_function_does_not_overflow(self):
        f = AffineScoreFunction(ALL_SCORES, 0.5, np.r_[0.0, np.full(9, -1e7)], min_sigma_bound=-5e5, var_bound=6e12)
        terms = fs.geat_terms(f, 0.3, 1e15, 1e-10, 5, 1e-6 / 8, 5e-7)
        assert math.isfinite(terms.total)
        assert math.isinf(fs.geat_terms(f, 0.3, 1e15, 0.1, 5, 1e-6 / 8, 5e-7).k_beta)

    def test_limit(self):
        f = flat_f(0.5, var=1.0)
        rates = [fs.optimise_beta(f, 0.5, n, 5, 1e-6, 1e-6)[1] / n for n in (1e8, 1e10, 1e12, 1e14)]
        assert np.all(np.diff(rates) > 0) and rates[-1] < 0.5
        assert rates[-1] == pytest.approx(0.5, abs=1e-3)

    def test_optimised_beta_beats_grid(self):
        f = flat_f(0.4, var=2.0)
        beta, best = fs.optimise_beta(f, 0.4, 1e9, 5, 1e-6, 1e-6)
        grid = [fs.geat_bound(f, 0.4, 1e9, b, 5, 1e-6, 1e-6) for b in np.geomspace(1e-8, 0.4, 200)]
        assert best >= max(grid) - 1e-6 * abs(max(grid))
        assert fs.BETA_RANGE[0] <= beta < fs.BETA_RANGE[1]

    @pytest.mark.parametrize("beta", [0.0, 0.5, -0.1])
    def test_beta_domain(self, beta):
        with pytest.raises(ValueError):
            fs.geat_bound(flat_f(0.5), 0.5, 1e6, beta, 5, 1e-6, 1e-6)

    @pytest.mark.parametrize("eps", [0.0, 1.0])
    def test_eps_domain(self, eps):
        with pytest.raises(ValueError):
            fs.geat_bound(flat_f(0.5), 0.5, 1e6, 0.1, 5, eps, 1e-6)
        with pytest.raises(ValueError):
            fs.geat_bound(flat_f(0.5), 0.5, 1e6, 0.1, 5, 1e-6, eps)


class TestKeyLength:
    def test_ev_hash(self):
        assert fs.ev_hash_length(1e-15) == 50
        assert fs.ev_hash_length(0.5) == 1
        assert fs.ev_hash_length(2.0**-128) == 128
        assert fs.ev_hash_length(0.3) == 2

    def test_ev_domain(self):
        with pytest.raises(ValueError):
            fs.ev_hash_length(0.0)

    @settings(max_examples=200)
    @given(st.floats(0, 1e9), st.floats(0, 1e6), st.floats(1e-12, 1e-3), st.floats(0.01, 0.49))
    def test_hash_condition_is_tight(self, hmin, leak, eps_sec, share):
        eps_s = share * eps_sec
        ell = fs.key_length(hmin, leak, 50, eps_s, eps_sec / 2, eps_sec)

        def ok(l):
            return -(hmin - leak - 50 - l + 2) / 2 <= math.log2(eps_sec - 2 * eps_s) + 1e-12

        if ell > 0:
            assert ok(ell) and not ok(ell + 1.5)
        else:
            assert not ok(1.5)

    def test_monotone(self):
        vals = [fs.key_length(h, 1e3, 50, 1e-7, 5e-7, 1e-6) for h in np.linspace(0, 1e5, 50)]
        assert np.all(np.diff(vals) >= 0)

    def test_budget_violations_give_zero(self):
        assert fs.key_length(1e6, 0, 50, 6e-7, 5e-7, 1e-6) == 0
        assert fs.key_length(1e6, 0, 50, 1e-7, 2e-6, 1e-6) == 0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            fs.key_length(1e6, 0, 50, -1e-7, 5e-7, 1e-6)


class TestCompleteness:
    def test_half_probability(self):
        zeta, zeta_prime, tight = fs.completeness_tolerances([0.5], 10**6, [0.1])
        assert tight[0]
        assert 8e-4 < zeta[0] < 1.2e-3 and 8e-4 < zeta_prime[0] < 1.2e-3
        # The exact binomial tails at the chosen counts respect the budget.
        n = 10**6
        b = round((0.5 + zeta[0]) * n)
        a = round((0.5 - zeta_prime[0]) * n)
        assert stats.binom.sf(b, n, 0.5) + stats.binom.cdf(a - 1, n, 0.5) <= 0.1

    def test_shrinks_with_n(self):
        z1 = fs.completeness_tolerances([0.3], 10**6, [0.1])[0][0]
        z2 = fs.completeness_tolerances([0.3], 2 * 10**6, [0.1])[0][0]
        assert z2 < z1
        assert z1 / z2 == pytest.approx(math.sqrt(2), rel=0.02)

    def test_bisection_is_tightest(self):
        n, p, eps = 5000, 0.2, 0.01
        a, b, _ = fs._count_bounds(n, p, eps)
        assert fs.lower_tail_bound(n, p, a) <= eps / 2 < fs.lower_tail_bound(n, p, a + 1)
        assert fs.upper_tail_bound(n, p, b) <= eps / 2 < fs.upper_tail_bound(n, p, b - 1)

    def test_edge_probabilities(self):
        zeta, zeta_prime, tight = fs.completeness_tolerances([0.0, 1.0], 100, [0.1, 0.1])
        assert np.all(zeta == 0) and np.all(zeta_prime == 0) and np.all(tight)

    def test_open_side_for_rare_score(self):
        _, zeta_prime, tight = fs.completeness_tolerances([1e-9], 1000, [0.1])
        assert not tight[0] and zeta_prime[0] == pytest.approx(1e-9)

    def test_rejects(self):
        with pytest.raises(ValueError):
            fs.completeness_tolerances([0.5], 0, [0.1])
        with pytest.raises(ValueError):
            fs.completeness_tolerances([0.5], 10, [1.0])
        with pytest.raises(ValueError):
            fs.completeness_tolerances([1.5], 10, [0.1])

    def test_split_budget(self):
        b = fs.split_budget(1e-10, 10)
        assert b.sum() == pytest.approx(1e-10) and np.allclose(b, 1e-11)
        b = fs.split_budget(0.1, 10, 0.5)
        assert b[0] == pytest.approx(0.05) and np.allclose(b[1:], 0.05 / 9)
        with pytest.raises(ValueError):
            fs.split_budget(0.1, 10, 1.0)


def dual_floor(f, acc):
    """LP dual of the floor: max over mu of mu + sum_i min((c_i - mu) l_i, (c_i - mu) u_i), attained at some mu = c_i."""
    c = f.coefficients
    vals = [mu + np.minimum((c - mu) * acc.lower, (c - mu) * acc.upper).sum() for mu in c]
    return f.constant + max(vals)


def box(p, width):
    p = np.asarray(p, dtype=float)
    return fs.AcceptanceSet.from_tolerances(p, np.full_like(p, width), np.full_like(p, width))


class TestFloor:
    def test_toy(self):
        f = AffineScoreFunction(ALL_SCORES[:3], 1.0, np.array([0.0, 1.0, -1.0]))
        acc = fs.AcceptanceSet([0.5, 0.3, 0.2], [0.4, 0.2, 0.1], [0.6, 0.4, 0.3])
        # Lower corner leaves mass 0.3: 0.2 goes to the -1 score, 0.1 to the 0 score.
        assert fs.floor_over_acceptance(f, acc) == pytest.approx(1.0 + 0.2 - 0.3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.2))
    def test_matches_linear_program(self, seed, width):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(10))
        acc = box(p, width)
        f = AffineScoreFunction(ALL_SCORES, rng.normal(), rng.normal(size=10))
        res = optimize.linprog(f.coefficients, A_eq=np.ones((1, 10)), b_eq=[1.0], bounds=list(zip(acc.lower, acc.upper)))
        assert res.status == 0
        h = fs.floor_over_acceptance(f, acc)
        assert h == pytest.approx(dual_floor(f, acc), abs=1e-12)
        assert h == pytest.approx(f.constant + res.fun, abs=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_honest_point_inside(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(10))
        acc = fs.AcceptanceSet.build(p, 10**5, 1e-3)
        f = AffineScoreFunction(ALL_SCORES, rng.normal(), rng.normal(size=10))
        assert acc.contains(p)
        assert fs.floor_over_acceptance(f, acc) <= f(p) + 1e-12

    def test_rejects(self):
        with pytest.raises(ValueError):
            fs.AcceptanceSet([0.5, 0.5], [0.6, 0.6], [0.7, 0.7])
        with pytest.raises(ValueError):
            fs.AcceptanceSet([0.5, 0.5], [0.5, 0.4], [0.4, 0.6])
        f = AffineScoreFunction(ALL_SCORES[:3], 0.0, np.zeros(3))
        with pytest.raises(ValueError):
            fs.floor_over_acceptance(f, box([0.5, 0.5], 0.1))


@pytest.fixture(scope="module")
def report():
    rng = np.random.default_rng(3)
    p = np.r_[0.95, 0.05 * rng.dirichlet(np.ones(9))]
    f = AffineScoreFunction(ALL_SCORES, 0.6, np.r_[0.0, -rng.uniform(0, 2, 9)], min_sigma_bound=-1.5, var_bound=9.0)
    acc = fs.AcceptanceSet.build(p, 10**12, fs.split_budget(1e-10, 10))
    return fs.finite_key(f, acc, 1e12, 0.1 * 1e12, 1e-15, 1e-6 / 8, 5e-7, 1e-6, 5, settings={"loss_db": 1.0})


class TestFiniteKey:
    def test_invariants(self, report):
        assert report.status == "positive" and report.key_length > 0
        assert report.rate == report.key_length / report.N
        assert report.rate < report.h
        assert report.l_ev == 50
        assert report.hmin == pytest.approx(report.N * report.h - report.second_order - report.third_order - report.epsilon_term)

    def test_key_length_rederived(self, report):
        assert report.key_length == key_length_oracle(report.hmin, report.leak_ec, report.l_ev, report.eps_s, report.eps_sec)

    def test_csv_and_json(self, report):
        line = report.csv_line().split(",")
        assert len(line) == len(fs.CSV_COLUMNS)
        assert line[0] == "1.0" and line[-1] == "positive"
        assert '"key_length"' in report.to_json()

    def test_report_validation(self, report):
        with pytest.raises(ValueError):
            replace(report, key_length=-1)
        with pytest.raises(ValueError):
            replace(report, rate=3.0)
        with pytest.raises(ValueError):
            replace(report, h=math.nan)
        assert replace(report, rate=0.0, status="").status == "zero"

    def test_golden_section(self):
        x, v = fs.golden_section_max(lambda t: -(t - 0.3) ** 2, 0.0, 1.0, 1e-8)
        assert x == pytest.approx(0.3, abs=1e-7) and v == pytest.approx(0.0, abs=1e-13)
        x, _ = fs.golden_section_max(lambda t: t, 0.0, 1.0, 1e-6)
        assert x == 1.0
        with pytest.raises(ValueError):
            fs.golden_section_max(lambda t: t, 1.0, 1.0, 1e-3)
