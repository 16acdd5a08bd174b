import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_problem
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcvqkd import entropy as en
from dmcvqkd.protocol import ALL_SCORES, TEST_SCORES, TOP_INDEX


def random_symmetric_state(problem, rng):
    """Random sector blocks of a trace-one state."""
    nb = problem.n_max + 1
    blocks = []
    for _ in range(4):
        a = rng.normal(size=(nb, nb)) + 1j * rng.normal(size=(nb, nb))
        blocks.append(a @ a.conj().T)
    blocks = np.stack(blocks)
    return blocks / sum(np.trace(b).real for b in blocks)


class TestProblem:
    def test_constraint_counts(self, small_problem):
        counts = small_problem.constraint_counts()
        assert counts["scalar_normalisation"] == 3
        assert counts["scalar_statistics"] == 2 * len(TEST_SCORES)
        assert counts["psd_blocks"] == 2 * small_problem.rule.order * 4 + 1
        assert counts["active_statistics"] <= 2 * len(TEST_SCORES)

    def test_vacuous_bounds_dropped(self, small_problem):
        up, lo = small_problem.upper_bounds, small_problem.lower_bounds
        assert np.all(np.isinf(up) | (up < 1.0))
        assert np.all(np.isinf(lo) | (lo > 0.0))

    def test_sector_basis_unitary(self, small_problem):
        u = small_problem.unitary
        assert np.allclose(u.conj().T @ u, np.eye(u.shape[0]), atol=1e-13)

    def test_rejects(self, small_problem):
        with pytest.raises(ValueError):
            replace(small_problem, q=np.full(9, 0.2))
        with pytest.raises(ValueError):
            replace(small_problem, gamma=1.0)
        with pytest.raises(ValueError):
            replace(small_problem, distance_scale=0.0)
        with pytest.raises(ValueError):
            replace(small_problem, corrections=replace(small_problem.corrections, kappa=2.0))

    def test_objective_scales_with_generation_probability(self, small_params, small_ops):
        rng = np.random.default_rng(0)
        a = make_problem(small_params, 1.0, small_ops)
        b = replace(a, gamma=1 - 1e-9)
        blocks = random_symmetric_state(a, rng)
        fa = en.objective_value(a, blocks) / (1 - a.gamma)
        fb = en.objective_value(b, blocks) / (1 - b.gamma)
        assert fa == pytest.approx(fb, rel=1e-9)
        assert abs(en.objective_value(b, blocks)) < 1e-8

    def test_minorant_lower_bounds_objective(self, small_problem, small_cert):
        rng = np.random.default_rng(1)
        k_blocks = en.minorant_from_operators(small_problem, small_cert.node_operators)
        for _ in range(10):
            blocks = random_symmetric_state(small_problem, rng)
            lin = sum(np.trace(s @ k).real for s, k in zip(blocks, k_blocks))
            assert en.objective_value(small_problem, blocks) >= lin - 1e-9

    def test_minorant_tight_at_state(self, small_problem):
        blocks = random_symmetric_state(small_problem, np.random.default_rng(2))
        k_blocks, _ = en.minorant(small_problem, blocks, eps=0.0)
        lin = sum(np.trace(s @ k).real for s, k in zip(blocks, k_blocks))
        assert en.objective_value(small_problem, blocks) == pytest.approx(lin, abs=1e-8)

    def test_problem_snapshot(self, small_problem):
        text = en.problem_to_text(small_problem)
        assert '"n_max": 4' in text and '"upper_bounds"' in text


class TestSolveAndVerify:
    def test_gap_and_range(self, cert_2db):
        assert cert_2db.status == "optimal"
        assert 0 <= cert_2db.gap <= 1e-6
        assert 0.0 <= cert_2db.dual_value <= math.log2(5)

    def test_verify_reproduces_dual(self, problem_2db, cert_2db):
        assert en.verify_certificate(problem_2db, cert_2db) == pytest.approx(cert_2db.dual_value, abs=1e-8)

    def test_negated_multiplier_rejected(self, small_problem, small_cert):
        for name in ("lambda_trace", "lambda_norm", "lambda_dist"):
            bad = replace(small_cert, **{name: -abs(getattr(small_cert, name)) - 1e-3})
            with pytest.raises(en.CertificateError):
                en.verify_certificate(small_problem, bad)
        bad = replace(small_cert, lambda_upper=small_cert.lambda_upper - 1e-3)
        with pytest.raises(en.CertificateError):
            en.verify_certificate(small_problem, bad)

    def test_overclaimed_bound_rejected(self, small_problem, small_cert):
        # Shifting the constant by 1e-3 would raise the proven bound; the slack must catch it.
        bad = replace(small_cert, lambda_trace=small_cert.lambda_trace - 1e-3)
        with pytest.raises(en.CertificateError):
            en.verify_certificate(small_problem, bad)

    def test_marginal_bound_rejected(self, small_problem, small_cert):
        bad = replace(small_cert, marginal=np.full(4, 2 * small_cert.lambda_dist + 1.0))
        with pytest.raises(en.CertificateError):
            en.verify_certificate(small_problem, bad)

    def test_wrong_problem_shape(self, problem_2db, small_cert):
        with pytest.raises(en.CertificateError):
            en.verify_certificate(problem_2db, small_cert)

    def test_backends_agree(self, small_problem, small_cert):
        other = "CLARABEL" if small_cert.solver == "CVXOPT" else "CVXOPT"
        alt = en.solve(small_problem, en.SolveOptions(solver=other))
        assert alt.dual_value == pytest.approx(small_cert.dual_value, abs=1e-5)

    def test_infeasible_statistics(self, small_problem):
        q = np.zeros(len(TEST_SCORES))
        q[0] = 1.0
        with pytest.raises(en.SdpSolveError) as info:
            en.solve(replace(small_problem, q=q))
        assert info.value.group == "statistics"

    def test_pure_loss_beats_noisy(self, small_params, small_ops):
        clean = en.solve(make_problem(small_params, 1.0, small_ops))
        noisy = en.solve(make_problem(small_params, 1.0, small_ops, chi=0.05))
        assert noisy.dual_value < clean.dual_value

    def test_solve_options(self):
        with pytest.raises(ValueError):
            en.SolveOptions(solver="MOSEK")
        with pytest.raises(ValueError):
            en.SolveOptions(rel_gap=0.0)
        assert en.default_solver() in en.SOLVERS


class TestAffineFunctions:
    def test_g_at_data_point(self, problem_2db, cert_2db):
        g = en.assemble_g(problem_2db, cert_2db)
        expected = cert_2db.dual_value - problem_2db.corrections.g_corr(problem_2db.q_top)
        assert g(problem_2db.q) == pytest.approx(expected, abs=1e-10)

    def test_g_below_primal(self, problem_2db, cert_2db):
        g = en.assemble_g(problem_2db, cert_2db)
        assert g(problem_2db.q) <= cert_2db.primal_value - problem_2db.corrections.g_corr(problem_2db.q_top)

    def test_assemble_rejects_bad_certificate(self, small_problem, small_cert):
        with pytest.raises(en.CertificateError):
            en.assemble_g(small_problem, replace(small_cert, lambda_trace=small_cert.lambda_trace - 1e-3))

    def test_top_coefficient_carries_corrections(self, small_problem, small_cert):
        g = en.assemble_g(small_problem, small_cert)
        off_top = np.delete(g.coefficients, TOP_INDEX)
        assert np.allclose(off_top, np.delete(small_cert.lambda_lower - small_cert.lambda_upper, TOP_INDEX))

    def test_min_tradeoff_toy(self):
        lam = np.array([1.0, 0.0, -1.0, 0.5, 0, 0, 0, 0, -2.0])
        g = en.AffineScoreFunction(TEST_SCORES, 0.3, lam)
        f = en.min_tradeoff(g, 0.5)
        v = f.vertex_values()
        assert f.scores == ALL_SCORES
        assert v[0] == pytest.approx(1.3)
        assert v[1:] == pytest.approx(0.3 - 1.0 + 2 * lam)
        assert f.max_value == pytest.approx(1.3)
        assert f.min_sigma_bound == pytest.approx(0.3 - 2.0)
        assert f.var_bound == pytest.approx(9.0 / 0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.99))
    def test_min_tradeoff_reproduces_g(self, seed, gamma):
        rng = np.random.default_rng(seed)
        g = en.AffineScoreFunction(TEST_SCORES, rng.normal(), rng.normal(size=9))
        q = rng.dirichlet(np.ones(9))
        f = en.min_tradeoff(g, gamma)
        p = np.concatenate(([1 - gamma], gamma * q))
        assert f(p) == pytest.approx(g(q), abs=1e-9 * max(1.0, np.abs(g.coefficients).max() / gamma))
        assert f.vertex_values()[0] == pytest.approx(f.max_value)

    def test_min_tradeoff_rejects(self):
        g = en.AffineScoreFunction(TEST_SCORES, 0.0, np.zeros(9))
        with pytest.raises(ValueError):
            en.min_tradeoff(g, 1.0)
        with pytest.raises(ValueError):
            en.min_tradeoff(en.AffineScoreFunction(ALL_SCORES, 0.0, np.zeros(10)), 0.5)

    def test_affine_validation(self):
        with pytest.raises(ValueError):
            en.AffineScoreFunction(TEST_SCORES, 0.0, np.zeros(3))
        with pytest.raises(ValueError):
            en.AffineScoreFunction(TEST_SCORES, math.nan, np.zeros(9))


class TestSerialisation:
    def test_round_trip(self, small_problem, small_cert):
        back = en.certificate_from_text(en.certificate_to_text(small_cert))
        assert back.dual_value == small_cert.dual_value
        assert np.array_equal(back.node_operators, small_cert.node_operators)
        assert np.array_equal(back.lambda_upper, small_cert.lambda_upper)
        assert en.verify_certificate(small_problem, back) == pytest.approx(small_cert.dual_value, abs=1e-12)

    def test_certificate_validation(self, small_cert):
        with pytest.raises(ValueError):
            replace(small_cert, marginal=np.zeros(3))
        with pytest.raises(ValueError):
            replace(small_cert, dual_value=small_cert.primal_value + 1.0)
        with pytest.raises(ValueError):
            replace(small_cert, lambda_norm=math.inf)
