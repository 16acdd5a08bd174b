"""Conditional-entropy SDP, its dual certificate and the affine min-tradeoff function.

The SDP couples Alice and Bob's truncated state ``sigma`` with one pair of
2x2 block-PSD constraints per quadrature node and key value. For fixed
``sigma`` the inner minimisation over those blocks has a closed form, so the
solver works in two steps:

1. minimise the closed-form objective ``F(sigma)`` over the feasible states,
   restricted to states invariant under the QPSK symmetry (four 13x13
   sector blocks at the default cutoff);
2. build, from the inner dual blocks at the optimum, a linear minorant
   ``F(s) >= Tr[s K]`` that is tight at the optimum, and solve the small dual
   SDP of ``min Tr[s K]`` over the same feasible set.

Step 2 yields an explicit dual certificate whose feasibility is checked
without trusting the conic solver (:func:`verify_certificate`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import cvxpy as cp
import numpy as np
from scipy import linalg

from .dimred import CorrectionSet
from .protocol import ALL_SCORES, TEST_SCORES, TOP_INDEX, Score, TruncatedOperators
from .special import QuadratureRule

VERIFY_TOL = 1e-7
_EIG_FLOOR = 1e-13
_REG_EPS = 1e-11


class SdpSolveError(RuntimeError):
    """Raised when the conic backend fails or reports infeasibility."""

    def __init__(self, message: str, status: str = "", group: str = "") -> None:
        super().__init__(message)
        self.status = status
        self.group = group


class CertificateError(ValueError):
    """Raised when a dual certificate fails independent verification."""


# ----------------------------------------------------------------------------
# Symmetry reduction


def sector_basis(n_max: int) -> np.ndarray:
    """Orthonormal bases of the four eigenspaces of the QPSK symmetry.

    Returns an array ``T`` of shape ``(4, 4 (n_max+1), n_max+1)``. Column ``n``
    of ``T[j]`` is ``f_k (x) |n>`` with ``k = (j - n) mod 4`` and
    ``f_k = (1/2) sum_a i^(-k a) |a>``.
    """
    nb = n_max + 1
    a = np.arange(4)
    four = 0.5 * (1j ** (-np.outer(np.arange(4), a)))  # row k is f_k
    out = np.zeros((4, 4 * nb, nb), dtype=complex)
    for j in range(4):
        for n in range(nb):
            k = (j - n) % 4
            out[j, n::nb, n] = four[k]
    return out


def sector_fourier_index(n_max: int) -> np.ndarray:
    """``k[j, n]``: Alice's Fourier label of basis vector ``n`` in sector ``j``."""
    n = np.arange(n_max + 1)
    return np.array([(j - n) % 4 for j in range(4)])


def _blocks(op: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.einsum("jam,ab,jbn->jmn", basis.conj(), op, basis)


def _hermitian(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2).conj())


def blocks_to_full(blocks: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Assemble an operator on Alice (x) Bob from its sector blocks."""
    return np.einsum("jam,jmn,jbn->ab", basis, blocks, basis.conj())


# ----------------------------------------------------------------------------
# Problem


@dataclass(frozen=True)
class EntropySdpProblem:
    """Data of one entropy SDP.

    Parameters
    ----------
    ops : TruncatedOperators
        Truncated POVMs, post-selection projector, Alice's marginal and ``kappa``.
    rule : QuadratureRule
        Gauss-Radau rule; one pair of block constraints per node and key value.
    q : ndarray
        Test-round score distribution over ``TEST_SCORES``.
    corrections : CorrectionSet
        Affine truncation corrections. Their statistics part shifts the
        bounds on ``Tr[sigma Pi_c]``.
    gamma : float
        Test probability. Only generation rounds enter the objective.
    truncation_slack : bool
        When False the ``kappa q_top`` slacks on the trace and on Alice's
        marginal are removed (ablation).
    distance_scale : float
        Multiplier ``s`` in ``Tr[zeta_1 + zeta_2] <= s kappa q_top``.
    """

    ops: TruncatedOperators
    rule: QuadratureRule
    q: np.ndarray
    corrections: CorrectionSet
    gamma: float
    truncation_slack: bool = True
    distance_scale: float = 2.0

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "q", q)
        if q.shape != (len(TEST_SCORES),):
            raise ValueError(f"q must have {len(TEST_SCORES)} entries, got shape {q.shape}")
        if not np.all(np.isfinite(q)) or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-8:
            raise ValueError("q must be a finite probability vector over the test scores")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.distance_scale <= 0:
            raise ValueError("distance_scale must be positive")
        if self.corrections.kappa != self.ops.kappa:
            raise ValueError("corrections were built for a different kappa")

    # -- scalar data -------------------------------------------------------

    @property
    def q_top(self) -> float:
        return float(self.q[TOP_INDEX])

    @property
    def weight(self) -> float:
        """Slack weight multiplying ``q_top`` (``kappa``, or 0 when disabled)."""
        return self.ops.kappa if self.truncation_slack else 0.0

    @property
    def trace_floor(self) -> float:
        return 1.0 - self.weight * self.q_top

    @property
    def distance_budget(self) -> float:
        """Right-hand side of ``Tr[zeta_1 + zeta_2] <= s w q_top``."""
        return self.distance_scale * self.weight * self.q_top

    @cached_property
    def node_coefficients(self) -> np.ndarray:
        """``(1 - gamma) w_i / (t_i ln 2)`` for every node."""
        r = self.rule
        return (1.0 - self.gamma) * r.weights / (r.nodes * math.log(2.0))

    @cached_property
    def upper_bounds(self) -> np.ndarray:
        """``q_c - xi_U(q_top)``; ``inf`` marks a vacuous (dropped) constraint."""
        u = self.q - self.corrections.xi_hat_U(self.q_top)
        return np.where(u >= 1.0, np.inf, u)

    @cached_property
    def lower_bounds(self) -> np.ndarray:
        """``q_c - xi_L(q_top)``; ``-inf`` marks a vacuous (dropped) constraint."""
        lo = self.q - self.corrections.xi_hat_L(self.q_top)
        return np.where(lo <= 0.0, -np.inf, lo)

    def constraint_counts(self) -> dict[str, int]:
        """Sizes of the constraint groups of the full block formulation."""
        n_test = len(TEST_SCORES)
        return {
            "scalar_normalisation": 3,
            "scalar_statistics": 2 * n_test,
            "psd_blocks": 2 * self.rule.order * 4 + 1,
            "active_statistics": int(np.isfinite(self.upper_bounds).sum() + np.isfinite(self.lower_bounds).sum()),
            "inner_blocks": self.rule.order * 4,
        }

    # -- operator data -----------------------------------------------------

    @property
    def n_max(self) -> int:
        return self.ops.n_max

    @property
    def dim(self) -> int:
        return self.ops.dim

    @cached_property
    def basis(self) -> np.ndarray:
        return sector_basis(self.n_max)

    @cached_property
    def fourier_index(self) -> np.ndarray:
        return sector_fourier_index(self.n_max)

    @cached_property
    def unitary(self) -> np.ndarray:
        """``[T_0 T_1 T_2 T_3]``: the sector basis as one unitary."""
        return np.concatenate(list(self.basis), axis=1)

    @cached_property
    def key_rotated(self) -> np.ndarray:
        """Key POVM element for ``z = 0`` in the sector basis (not block diagonal)."""
        u = self.unitary
        return _hermitian(u.conj().T @ self.ops.key_povm_ab(0) @ u)

    @cached_property
    def pps_blocks(self) -> np.ndarray:
        return _hermitian(_blocks(self.ops.p_ps, self.basis))

    @cached_property
    def pps_full(self) -> np.ndarray:
        return linalg.block_diag(*self.pps_blocks)

    @cached_property
    def test_blocks(self) -> np.ndarray:
        """Shape ``(9, 4, nb, nb)``: every test POVM element per sector."""
        return np.stack([_hermitian(_blocks(m, self.basis)) for m in self.ops.test_povms])

    @cached_property
    def alice_spectrum(self) -> np.ndarray:
        """Eigenvalues ``<f_k| rho_A |f_k>`` of Alice's (circulant) marginal."""
        a = np.arange(4)
        four = 0.5 * (1j ** (-np.outer(np.arange(4), a)))
        return np.real(np.einsum("ka,ab,kb->k", four.conj(), self.ops.rho_a, four))

    def partial_trace_spectrum(self, blocks: np.ndarray) -> np.ndarray:
        """Eigenvalues of ``Tr_B sigma`` for a symmetric ``sigma`` given by blocks."""
        diag = np.real(np.diagonal(blocks, axis1=1, axis2=2))
        out = np.zeros(4)
        np.add.at(out, self.fourier_index.ravel(), diag.ravel())
        return out


def build_problem(
    ops: TruncatedOperators,
    rule: QuadratureRule,
    q: np.ndarray,
    corrections: CorrectionSet,
    gamma: float,
    truncation_slack: bool = True,
    distance_scale: float = 2.0,
) -> EntropySdpProblem:
    return EntropySdpProblem(ops, rule, np.asarray(q, dtype=float), corrections, gamma, truncation_slack, distance_scale)


# ----------------------------------------------------------------------------
# Closed-form objective and its dual-block minorant


def _inner_value(r_key: np.ndarray, r_ps: np.ndarray, t: float) -> float:
    """Closed-form inner minimum given ``C^† Q C`` and ``C^† P C``."""
    a, u = np.linalg.eigh(r_key)
    b, v = np.linalg.eigh(r_ps)
    a = np.clip(a, 0.0, None)
    b = np.clip(b, 0.0, None)
    overlap = np.abs(u.conj().T @ v) ** 2
    den = (1.0 - t) * a[:, None] + t * b[None, :]
    num = a[:, None] ** 2 * overlap
    safe = den > 0
    return float(a.sum() - np.sum(num[safe] / den[safe]))


def _factor(sigma_full: np.ndarray) -> np.ndarray:
    s, e = np.linalg.eigh(sigma_full)
    keep = s > _EIG_FLOOR * max(s[-1], 1e-300)
    return e[:, keep] * np.sqrt(s[keep])


def objective_value(problem: EntropySdpProblem, blocks: np.ndarray) -> float:
    """Closed-form SDP objective ``F(sigma)`` for a symmetric ``sigma``."""
    sigma = linalg.block_diag(*blocks)
    c = _factor(sigma)
    r_key = _hermitian(c.conj().T @ problem.key_rotated @ c)
    r_ps = _hermitian(c.conj().T @ linalg.block_diag(*problem.pps_blocks) @ c)
    total = 0.0
    for coef, t in zip(problem.node_coefficients, problem.rule.nodes):
        total += coef * _inner_value(r_key, r_ps, float(t))
    return 4.0 * total


def node_operator(q_key: np.ndarray, p_ps: np.ndarray, sigma: np.ndarray, t: float) -> np.ndarray:
    """Sylvester solution ``Y`` parametrising the optimal inner dual blocks.

    ``Y`` solves ``t P sigma Y + (1-t) Y Q sigma = Q sigma``; it is zero at the
    node ``t = 1`` where the first block drops out.
    """
    if t >= 1.0:
        return np.zeros_like(q_key)
    return linalg.solve_sylvester(t * p_ps @ sigma, (1.0 - t) * q_key @ sigma, q_key @ sigma)


def inner_dual_blocks_from_operator(q_key: np.ndarray, p_ps: np.ndarray, y: np.ndarray, t: float):
    """Dual blocks ``(A1, B1, A2, B2)`` generated by ``Y``.

    ``[[A1, B1], [B1^†, (1-t) Q]]`` and ``[[A2, B2], [B2^†, t P]]`` are PSD by
    construction and ``B1^† + B2 = Q``, so ``Tr[s (Q - A1 - A2)]`` lower-bounds
    the inner value for every state ``s``.
    """
    b1 = (1.0 - t) * y @ q_key
    a1 = _hermitian(b1 @ y.conj().T)
    b2 = q_key - b1.conj().T
    a2 = _hermitian(b2 @ np.linalg.solve(t * p_ps, b2.conj().T))
    return a1, b1, a2, b2


def inner_dual_blocks(q_key: np.ndarray, p_ps: np.ndarray, sigma: np.ndarray, t: float):
    """Inner dual blocks that are optimal for an invertible ``sigma``."""
    return inner_dual_blocks_from_operator(q_key, p_ps, node_operator(q_key, p_ps, sigma, t), t)


def minorant_from_operators(problem: EntropySdpProblem, node_ops) -> np.ndarray:
    """Sector blocks of ``K`` built from one Sylvester operator per node."""
    q_key = problem.key_rotated
    p_full = problem.pps_full
    k_full = np.zeros_like(q_key)
    for coef, t, y in zip(problem.node_coefficients, problem.rule.nodes, node_ops):
        a1, _, a2, _ = inner_dual_blocks_from_operator(q_key, p_full, y, float(t))
        k_full += coef * (q_key - a1 - a2)
    nb = problem.n_max + 1
    # Averaging over the symmetry keeps the sector-diagonal part; the four
    # key values contribute equally.
    return _hermitian(np.stack([4.0 * k_full[j * nb:(j + 1) * nb, j * nb:(j + 1) * nb] for j in range(4)]))


def minorant(problem: EntropySdpProblem, blocks: np.ndarray, eps: float = _REG_EPS):
    """Blocks of ``K`` with ``F(s) >= Tr[s K]`` for every symmetric ``s``.

    The Sylvester operators are evaluated at ``sigma + eps Tr[sigma] I`` so the
    equations stay nonsingular; any choice keeps the bound valid and ``eps = 0``
    makes it tight at an invertible ``sigma``. Returns ``(k_blocks, node_ops)``.
    """
    sigma = linalg.block_diag(*blocks)
    if eps > 0:
        sigma = sigma + eps * np.trace(sigma).real * np.eye(sigma.shape[0])
    q_key, p_full = problem.key_rotated, problem.pps_full
    ops = np.stack([node_operator(q_key, p_full, sigma, float(t)) for t in problem.rule.nodes])
    return minorant_from_operators(problem, ops), ops


# ----------------------------------------------------------------------------
# Real coordinates and linear constraints


class _Coordinates:
    """Orthonormal real coordinates of four Hermitian ``nb x nb`` blocks."""

    def __init__(self, nb: int) -> None:
        self.nb = nb
        self.size = nb * nb
        iu = np.triu_indices(nb, 1)
        phi = np.zeros((nb, nb, self.size), dtype=complex)
        col = 0
        for i in range(nb):
            phi[i, i, col] = 1.0
            col += 1
        r = 1.0 / math.sqrt(2.0)
        for a, b in zip(*iu):
            phi[a, b, col] = phi[b, a, col] = r
            col += 1
        for a, b in zip(*iu):
            phi[a, b, col] = 1j * r
            phi[b, a, col] = -1j * r
            col += 1
        self.phi = phi.reshape(self.size, self.size)
        self.iu = iu

    def pack(self, blocks: np.ndarray) -> np.ndarray:
        flat = np.asarray(blocks).reshape(4, self.size)
        return np.real(flat @ self.phi.conj()).ravel()

    def unpack(self, x: np.ndarray) -> np.ndarray:
        return (x[: 4 * self.size].reshape(4, self.size) @ self.phi.T).reshape(4, self.nb, self.nb)

    def cvx_vector(self, mats) -> cp.Expression:
        parts = []
        r2 = math.sqrt(2.0)
        for m in mats:
            parts += [cp.real(cp.diag(m)), r2 * cp.real(m)[self.iu], r2 * cp.imag(m)[self.iu]]
        return cp.hstack(parts)


@dataclass
class _LinearConstraints:
    """``E z = e`` and ``G z <= h`` on ``z = (sigma coordinates, marginal slacks)``."""

    E: np.ndarray
    e: np.ndarray
    G: np.ndarray
    h: np.ndarray
    groups: list[str]
    n_aux: int


def _linear_constraints(problem: EntropySdpProblem, coords: _Coordinates) -> _LinearConstraints:
    nb = coords.nb
    n_sig = 4 * coords.size
    n_aux = 4 if problem.distance_budget > 0 else 0
    nz = n_sig + n_aux
    eq_rows, eq_rhs, rows, rhs, groups = [], [], [], [], []

    def row(vec, aux=None):
        out = np.zeros(nz)
        out[:n_sig] = vec
        if aux is not None:
            out[n_sig:] = aux
        return out

    trace = coords.pack(np.stack([np.eye(nb, dtype=complex)] * 4))
    if problem.trace_floor < 1.0:
        rows += [row(trace), row(-trace)]
        rhs += [1.0, -problem.trace_floor]
        groups += ["normalisation", "normalisation"]
    else:
        eq_rows.append(row(trace))
        eq_rhs.append(1.0)
    for c in range(len(TEST_SCORES)):
        vec = coords.pack(problem.test_blocks[c])
        hi, lo = problem.upper_bounds[c], problem.lower_bounds[c]
        if np.isfinite(hi) and np.isfinite(lo) and hi - lo <= 1e-12:
            eq_rows.append(row(vec))
            eq_rhs.append(0.5 * (hi + lo))
            continue
        if np.isfinite(hi):
            rows.append(row(vec))
            rhs.append(hi)
            groups.append("statistics")
        if np.isfinite(lo):
            rows.append(row(-vec))
            rhs.append(-lo)
            groups.append("statistics")
    fi = problem.fourier_index
    for k in range(4):
        vec = coords.pack(np.stack([np.diag((fi[j] == k).astype(complex)) for j in range(4)]))
        if n_aux:
            unit = np.eye(4)[k]
            rows += [row(vec, -unit), row(-vec, -unit)]
            rhs += [problem.alice_spectrum[k], -problem.alice_spectrum[k]]
            groups += ["marginal", "marginal"]
        else:
            eq_rows.append(row(vec))
            eq_rhs.append(problem.alice_spectrum[k])
    if n_aux:
        rows.append(row(np.zeros(n_sig), np.ones(4)))
        rhs.append(problem.distance_budget / 2.0)
        groups.append("marginal")
    if eq_rows:
        u, s, vt = np.linalg.svd(np.array(eq_rows), full_matrices=False)
        keep = s > 1e-9 * s[0]
        e_full = np.array(eq_rhs)
        coef = u.T @ e_full
        if np.linalg.norm(u[:, keep] @ coef[keep] - e_full) > 1e-9:
            raise SdpSolveError("equality constraints are inconsistent", "infeasible", "statistics")
        E, e = vt[keep], coef[keep] / s[keep]
    else:
        E, e = np.zeros((0, nz)), np.zeros(0)
    return _LinearConstraints(E, e, np.array(rows).reshape(-1, nz), np.array(rhs), groups, n_aux)


def _strict_start(problem: EntropySdpProblem, coords: _Coordinates, lin: _LinearConstraints) -> np.ndarray:
    """Strictly feasible point maximising the smallest eigenvalue and slack."""
    nb = coords.nb
    mats = [cp.Variable((nb, nb), hermitian=True) for _ in range(4)]
    margin = cp.Variable()
    z = coords.cvx_vector(mats)
    if lin.n_aux:
        z = cp.hstack([z, cp.Variable(lin.n_aux)])
    cons = [m >> margin * np.eye(nb) for m in mats] + [margin <= 1.0]
    if lin.G.shape[0]:
        cons.append(lin.G @ z + margin <= lin.h)
    if lin.E.shape[0]:
        cons.append(lin.E @ z == lin.e)
    prob = cp.Problem(cp.Maximize(margin), cons)
    try:
        prob.solve(solver="CLARABEL")
    except cp.SolverError as exc:
        raise SdpSolveError(f"phase-one solve failed: {exc}", "solver_error") from exc
    if prob.status in ("infeasible", "infeasible_inaccurate") or margin.value is None:
        raise SdpSolveError("no state satisfies the constraints", prob.status, _violated_group(problem, coords, lin))
    point = np.asarray(z.value, dtype=float)
    if lin.E.shape[0]:
        point = point - lin.E.T @ (lin.E @ point - lin.e)
    if lin.n_aux:
        # Exact marginal slacks for this sigma; half the spare budget stays on the sum row.
        dev = np.abs(problem.partial_trace_spectrum(coords.unpack(point)) - problem.alice_spectrum)
        spare = (problem.distance_budget / 2.0 - dev.sum()) / 8.0
        point[-lin.n_aux:] = dev + max(spare, 0.0)
    if not _is_interior(coords, lin, point):
        raise SdpSolveError(
            f"no strictly feasible state (margin {float(margin.value):.3g})", prob.status, _violated_group(problem, coords, lin)
        )
    return point


def _violated_group(problem: EntropySdpProblem, coords: _Coordinates, lin: _LinearConstraints) -> str:
    """Name of the first constraint group whose removal restores feasibility."""
    nb = coords.nb
    for group in ("statistics", "marginal", "normalisation"):
        mats = [cp.Variable((nb, nb), hermitian=True) for _ in range(4)]
        z = coords.cvx_vector(mats)
        if lin.n_aux:
            z = cp.hstack([z, cp.Variable(lin.n_aux)])
        keep = np.array([g != group for g in lin.groups], dtype=bool)
        cons = [m >> 0 for m in mats] + [sum(cp.real(cp.trace(m)) for m in mats) <= 1.0]
        if keep.any():
            cons.append(lin.G[keep] @ z <= lin.h[keep])
        prob = cp.Problem(cp.Minimize(0), cons)
        prob.solve(solver="CLARABEL")
        if prob.status == "optimal":
            return group
    return "unknown"


def _is_interior(coords: _Coordinates, lin: _LinearConstraints, z: np.ndarray) -> bool:
    if lin.G.shape[0] and np.any(lin.h - lin.G @ z <= 0):
        return False
    return all(np.linalg.eigvalsh(b)[0] > 0 for b in coords.unpack(z))


# ----------------------------------------------------------------------------
# Dual certificate


@dataclass(frozen=True)
class DualCertificate:
    """Dual solution of one entropy SDP.

    The multipliers belong to ``Tr s <= 1`` (``lambda_trace``), the trace floor
    (``lambda_norm``), the distance budget (``lambda_dist``), the four
    eigenvalue conditions on Alice's marginal (``marginal``) and the upper and
    lower statistics bounds. ``node_operators`` hold one Sylvester operator
    per quadrature node; they fix the inner dual blocks and hence ``K``.
    """

    lambda_trace: float
    lambda_norm: float
    lambda_dist: float
    marginal: np.ndarray
    lambda_upper: np.ndarray
    lambda_lower: np.ndarray
    node_operators: np.ndarray
    primal_value: float
    dual_value: float
    residuals: dict = field(default_factory=dict)
    status: str = "optimal"
    solver: str = ""
    primal_blocks: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.primal_blocks is not None:
            object.__setattr__(self, "primal_blocks", np.asarray(self.primal_blocks, dtype=complex))
        for name in ("marginal", "lambda_upper", "lambda_lower"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "node_operators", np.asarray(self.node_operators, dtype=complex))
        if self.marginal.shape != (4,):
            raise ValueError("marginal multipliers must have 4 entries")
        if self.lambda_upper.shape != (len(TEST_SCORES),) or self.lambda_lower.shape != (len(TEST_SCORES),):
            raise ValueError(f"statistics multipliers must have {len(TEST_SCORES)} entries")
        if self.node_operators.ndim != 3 or self.node_operators.shape[1] != self.node_operators.shape[2]:
            raise ValueError("node operators must be a stack of square matrices")
        scalars = (self.lambda_trace, self.lambda_norm, self.lambda_dist, self.primal_value, self.dual_value)
        if not all(math.isfinite(v) for v in scalars):
            raise ValueError("certificate scalars must be finite")
        if self.dual_value > self.primal_value + 1e-6:
            raise ValueError(f"dual value exceeds primal value by {self.dual_value - self.primal_value:.3g}")

    @property
    def gap(self) -> float:
        return self.primal_value - self.dual_value

    @property
    def relative_gap(self) -> float:
        return self.gap / max(1.0, abs(self.primal_value))


def certificate_phi(problem: EntropySdpProblem, cert: DualCertificate) -> float:
    """``phi``: the dual objective's part that does not depend on the statistics."""
    return -cert.lambda_trace + cert.lambda_norm + float(cert.marginal @ problem.alice_spectrum)


def _active_bound_mask(problem: EntropySdpProblem) -> tuple[np.ndarray, np.ndarray]:
    return np.isfinite(problem.upper_bounds), np.isfinite(problem.lower_bounds)


def _dual_objective(problem: EntropySdpProblem, mult: dict) -> float:
    up, lo = _active_bound_mask(problem)
    stats = -float(mult["upper"][up] @ problem.upper_bounds[up]) + float(mult["lower"][lo] @ problem.lower_bounds[lo])
    return (
        -mult["trace"]
        + mult["norm"] * problem.trace_floor
        - mult["dist"] * problem.distance_budget
        + float(mult["marginal"] @ problem.alice_spectrum)
        + stats
    )


def _slack_blocks(problem: EntropySdpProblem, k_blocks: np.ndarray, mult: dict) -> np.ndarray:
    """Dual slack ``K + (mu - lambda_norm) I + sum_c (lU - lL) Pi_c - diag(z)`` per sector."""
    nb = problem.n_max + 1
    diff = mult["upper"] - mult["lower"]
    out = k_blocks + (mult["trace"] - mult["norm"]) * np.eye(nb)
    out = out + np.einsum("c,cjmn->jmn", diff, problem.test_blocks)
    shift = mult["marginal"][problem.fourier_index]
    out = out - np.stack([np.diag(shift[j]) for j in range(4)])
    return _hermitian(out)


def _repair(problem: EntropySdpProblem, k_blocks: np.ndarray, mult: dict) -> dict:
    """Project solver multipliers onto the dual cone and restore a PSD slack."""
    out = {
        "trace": max(float(mult["trace"]), 0.0),
        "norm": max(float(mult["norm"]), 0.0),
        "marginal": np.asarray(mult["marginal"], dtype=float),
        "upper": np.clip(mult["upper"], 0.0, None),
        "lower": np.clip(mult["lower"], 0.0, None),
    }
    out["dist"] = max(float(mult["dist"]), 0.5 * float(np.abs(out["marginal"]).max()))
    low = min(np.linalg.eigvalsh(s)[0] for s in _slack_blocks(problem, k_blocks, out))
    out["trace"] += max(0.0, -low)
    return out


class _DualSdp:
    """``max`` of the dual of ``min Tr[s K]`` over the feasible states, ``K`` a parameter.

    Statistics operators are normalised to unit operator norm and the
    multipliers are rescaled afterwards.
    """

    def __init__(self, problem: EntropySdpProblem, solver: str) -> None:
        self.problem = problem
        self.solver = solver
        nb = problem.n_max + 1
        up, lo = _active_bound_mask(problem)
        hi, low = problem.upper_bounds, problem.lower_bounds
        eq = up & lo & (np.where(up, hi, 0.0) - np.where(lo, low, 0.0) <= 1e-12)
        self.eq_idx = np.flatnonzero(eq)
        self.up_idx, self.lo_idx = np.flatnonzero(up & ~eq), np.flatnonzero(lo & ~eq)
        n_test = len(TEST_SCORES)
        self.scale = np.array([max(np.linalg.norm(b, 2) for b in problem.test_blocks[c]) for c in range(n_test)])
        self.k_param = [cp.Parameter((nb, nb), hermitian=True) for _ in range(4)]
        # A pinned marginal implies the trace constraints; their multipliers
        # would only add a degenerate direction.
        self.pinned = problem.distance_budget <= 0
        self.mu = cp.Variable(nonneg=True)
        self.lam_norm = cp.Variable(nonneg=True)
        self.lam_dist = cp.Variable(nonneg=True)
        self.z = cp.Variable(4)
        self.l_up = cp.Variable(len(self.up_idx), nonneg=True) if len(self.up_idx) else None
        self.l_lo = cp.Variable(len(self.lo_idx), nonneg=True) if len(self.lo_idx) else None
        self.l_eq = cp.Variable(len(self.eq_idx)) if len(self.eq_idx) else None
        cons = [] if self.pinned else [cp.abs(self.z) <= 2 * self.lam_dist]
        if self.pinned:
            cons += [self.mu == 0, self.lam_norm == 0, self.lam_dist == 0]
        fi = problem.fourier_index
        blocks = problem.test_blocks
        for j in range(4):
            slack = self.k_param[j] + (self.mu - self.lam_norm) * np.eye(nb)
            for pos, c in enumerate(self.up_idx):
                slack = slack + self.l_up[pos] * (blocks[c, j] / self.scale[c])
            for pos, c in enumerate(self.lo_idx):
                slack = slack - self.l_lo[pos] * (blocks[c, j] / self.scale[c])
            for pos, c in enumerate(self.eq_idx):
                slack = slack - self.l_eq[pos] * (blocks[c, j] / self.scale[c])
            shift = cp.hstack([self.z[fi[j, n]] for n in range(nb)])
            cons.append(slack - cp.diag(shift) >> 0)
        obj = -self.mu + self.lam_norm * problem.trace_floor - self.lam_dist * problem.distance_budget
        obj = obj + self.z @ problem.alice_spectrum
        if self.l_up is not None:
            obj = obj - self.l_up @ (hi[self.up_idx] / self.scale[self.up_idx])
        if self.l_lo is not None:
            obj = obj + self.l_lo @ (low[self.lo_idx] / self.scale[self.lo_idx])
        if self.l_eq is not None:
            obj = obj + self.l_eq @ (low[self.eq_idx] / self.scale[self.eq_idx])
        self.prob = cp.Problem(cp.Maximize(obj), cons)

    def solve(self, k_blocks: np.ndarray) -> dict:
        for param, block in zip(self.k_param, k_blocks):
            param.value = _hermitian(block)
        try:
            self.prob.solve(solver=self.solver, warm_start=False)
        except cp.SolverError as exc:
            raise SdpSolveError(f"{self.solver} failed on the dual problem: {exc}", "solver_error") from exc
        if self.prob.status not in ("optimal", "optimal_inaccurate") or self.z.value is None:
            raise SdpSolveError(f"{self.solver} returned status {self.prob.status}", str(self.prob.status))
        n_test = len(TEST_SCORES)
        upper, lower = np.zeros(n_test), np.zeros(n_test)
        if self.l_up is not None:
            upper[self.up_idx] = self.l_up.value / self.scale[self.up_idx]
        if self.l_lo is not None:
            lower[self.lo_idx] = self.l_lo.value / self.scale[self.lo_idx]
        if self.l_eq is not None:
            free = self.l_eq.value / self.scale[self.eq_idx]
            lower[self.eq_idx] = np.clip(free, 0.0, None)
            upper[self.eq_idx] = np.clip(-free, 0.0, None)
        return {
            "trace": float(self.mu.value),
            "norm": float(self.lam_norm.value),
            "dist": float(self.lam_dist.value),
            "marginal": np.asarray(self.z.value, dtype=float),
            "upper": upper,
            "lower": lower,
        }


def _certificate_from(problem, mult, node_ops, primal, residuals, status, solver, blocks=None) -> DualCertificate:
    return DualCertificate(
        lambda_trace=mult["trace"],
        lambda_norm=mult["norm"],
        lambda_dist=mult["dist"],
        marginal=mult["marginal"],
        lambda_upper=mult["upper"],
        lambda_lower=mult["lower"],
        node_operators=node_ops,
        primal_value=primal,
        dual_value=_dual_objective(problem, mult),
        residuals=residuals,
        status=status,
        solver=solver,
        primal_blocks=blocks,
    )


# ----------------------------------------------------------------------------
# Solver


SOLVERS = ("CVXOPT", "CLARABEL", "SCS")


def default_solver() -> str:
    """CVXOPT when installed (most reliable on the multiplier SDP), else CLARABEL."""
    return "CVXOPT" if "CVXOPT" in cp.installed_solvers() else "CLARABEL"


@dataclass(frozen=True)
class SolveOptions:
    """Path-following and certificate settings.

    Parameters
    ----------
    solver : str
        Conic backend for the multiplier SDP (any of ``SOLVERS``).
    rel_gap : float
        Target for ``(primal - certified dual) / max(1, |primal|)``.
    max_stages : int
        Barrier stages; the barrier weight grows by ``growth`` per stage.
    """

    solver: str = field(default_factory=default_solver)
    rel_gap: float = 2e-7
    max_stages: int = 16
    growth: float = 10.0
    centering_tol: float = 0.05
    max_newton: int = 20
    certify_below: float = 3e-4
    fallback: tuple[str, ...] = ("CLARABEL", "CVXOPT")

    def __post_init__(self) -> None:
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {SOLVERS}")
        if self.solver not in cp.installed_solvers():
            raise ValueError(f"solver {self.solver} is not installed")
        if not 0 < self.rel_gap < 1:
            raise ValueError("rel_gap must lie in (0, 1)")
        if self.growth <= 1 or self.max_stages < 1 or self.max_newton < 1:
            raise ValueError("growth must exceed 1 and iteration limits must be positive")


class _Barrier:
    """Log-det and log-slack barrier with exact gradient and Hessian."""

    def __init__(self, coords: _Coordinates, lin: _LinearConstraints) -> None:
        self.coords = coords
        self.lin = lin
        self.nz = 4 * coords.size + lin.n_aux
        self.nu = 4 * coords.nb + lin.G.shape[0]

    def __call__(self, z: np.ndarray, derivatives: bool = True):
        c = self.coords
        n1 = c.size
        lin = self.lin
        slack = lin.h - lin.G @ z if lin.G.shape[0] else np.zeros(0)
        if np.any(slack <= 0):
            return math.inf, None, None
        value = -float(np.log(slack).sum())
        blocks = c.unpack(z)
        chol = []
        for b in blocks:
            try:
                chol.append(np.linalg.cholesky(b))
            except np.linalg.LinAlgError:
                return math.inf, None, None
        value -= sum(2.0 * float(np.log(np.real(np.diag(l))).sum()) for l in chol)
        if not derivatives:
            return value, None, None
        grad = np.zeros(self.nz)
        hess = np.zeros((self.nz, self.nz))
        for j, b in enumerate(blocks):
            inv = _hermitian(np.linalg.inv(b))
            sl = slice(j * n1, (j + 1) * n1)
            grad[sl] = -np.real(c.phi.conj().T @ inv.ravel())
            hess[sl, sl] = np.real(c.phi.conj().T @ np.kron(inv, inv.T) @ c.phi)
        if slack.size:
            grad += lin.G.T @ (1.0 / slack)
            hess += lin.G.T @ ((1.0 / slack**2)[:, None] * lin.G)
        return value, grad, hess


def _objective_and_gradient(problem: EntropySdpProblem, coords: _Coordinates, z: np.ndarray, nz: int):
    blocks = coords.unpack(z)
    k_blocks, node_ops = minorant(problem, blocks, eps=0.0)
    value = float(sum(np.real(np.vdot(k, b)) for k, b in zip(k_blocks, blocks)))
    grad = np.zeros(nz)
    grad[: 4 * coords.size] = coords.pack(k_blocks)
    return value, grad, k_blocks, node_ops


def _newton_direction(hess: np.ndarray, grad: np.ndarray, null: np.ndarray | None) -> np.ndarray:
    """Newton step, restricted to the null space of the equality rows if any.

    Stepping inside an explicit null-space basis keeps the equalities exact
    even when the barrier Hessian is badly conditioned.
    """
    if null is None:
        return -np.linalg.solve(hess, grad)
    return -null @ np.linalg.solve(null.T @ hess @ null, null.T @ grad)


def solve(problem: EntropySdpProblem, options: SolveOptions | None = None) -> DualCertificate:
    """Solve the entropy SDP and return a verified dual certificate.

    A log-barrier path-following method (Newton steps with an exact barrier
    Hessian and a BFGS model of ``F``) approaches the optimum from the
    interior. At every late stage the tangent minorant ``K`` is formed and the
    multiplier SDP of ``min Tr[s K]`` is handed to the conic backend; its
    repaired solution is a dual certificate. The best certificate is returned
    once the certified gap meets ``options.rel_gap``.

    Raises
    ------
    SdpSolveError
        If the constraints admit no strictly feasible state or the backend
        fails at every stage.
    """
    opts = options or SolveOptions()
    coords = _Coordinates(problem.n_max + 1)
    lin = _linear_constraints(problem, coords)
    barrier = _Barrier(coords, lin)
    nz = barrier.nz
    z = _strict_start(problem, coords, lin)
    null = linalg.null_space(lin.E) if lin.E.shape[0] else None
    backends = [opts.solver] + [b for b in opts.fallback if b != opts.solver and b in cp.installed_solvers()]
    duals = {}

    f, g, k_blocks, node_ops = _objective_and_gradient(problem, coords, z, nz)
    model = np.eye(nz)
    scaled = False
    weight = 1.0
    best: DualCertificate | None = None
    last_error: SdpSolveError | None = None
    for stage in range(opts.max_stages):
        for _ in range(opts.max_newton):
            phi, gphi, hphi = barrier(z)
            grad = weight * g + gphi
            step = _newton_direction(weight * model + hphi, grad, null)
            decrement = -float(grad @ step)
            if decrement / 2.0 < opts.centering_tol:
                break
            s, merit = 1.0, weight * f + phi
            while s > 1e-12:
                trial = z + s * step
                pv, _, _ = barrier(trial, derivatives=False)
                if math.isfinite(pv):
                    fn, gn, kn, nn = _objective_and_gradient(problem, coords, trial, nz)
                    if weight * fn + pv <= merit - 0.25 * s * decrement:
                        break
                s *= 0.5
            else:
                break
            sv, yv = trial - z, gn - g
            sy = float(sv @ yv)
            if not scaled and sy > 0:
                model = np.eye(nz) * (sy / float(sv @ sv))
                scaled = True
            hs = model @ sv
            shs = float(sv @ hs)
            if shs > 1e-300 and sy > 1e-300:
                # Powell damping keeps the model positive definite.
                theta = 1.0 if sy >= 0.2 * shs else 0.8 * shs / (shs - sy)
                r = theta * yv + (1.0 - theta) * hs
                model = model - np.outer(hs, hs) / shs + np.outer(r, r) / float(sv @ r)
            z, f, g, k_blocks, node_ops = trial, fn, gn, kn, nn
        if barrier.nu / weight < opts.certify_below * max(1.0, abs(f)):
            mult, used = None, ""
            for name in backends:
                try:
                    if name not in duals:
                        duals[name] = _DualSdp(problem, name)
                    mult, used = _repair(problem, k_blocks, duals[name].solve(k_blocks)), name
                    break
                except SdpSolveError as exc:
                    last_error = exc
            if mult is not None:
                slack_min = min(np.linalg.eigvalsh(s)[0] for s in _slack_blocks(problem, k_blocks, mult))
                cand = _certificate_from(
                    problem, mult, node_ops, f,
                    {"slack_min_eig": float(slack_min), "barrier_weight": weight, "stage": stage},
                    "inaccurate", used, coords.unpack(z),
                )
                if best is None or cand.dual_value > best.dual_value:
                    best = cand
                if best.gap <= opts.rel_gap * max(1.0, abs(f)):
                    break
        weight *= opts.growth
    if best is None:
        raise last_error or SdpSolveError("no certificate was produced", "max_stages")
    primal = min(f, best.primal_value)
    status = "optimal" if primal - best.dual_value <= opts.rel_gap * max(1.0, abs(primal)) else "inaccurate"
    return replace(best, primal_value=primal, status=status)


# ----------------------------------------------------------------------------
# Independent verification


def _psd_floor(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(_hermitian(mat))[0])


def verify_certificate(problem: EntropySdpProblem, cert: DualCertificate, tol: float = VERIFY_TOL) -> float:
    """Check a certificate against the problem data and return the bound it proves.

    Recomputes the inner dual blocks from the node operators, their 2x2 PSD
    conditions, the sign conditions on every multiplier and the PSD dual slack
    per sector. The returned value is the dual objective, lowered by any
    negative slack eigenvalue within ``tol`` (states have trace at most one).

    Raises
    ------
    CertificateError
        If any condition fails by more than ``tol``.
    """
    nodes = problem.rule.nodes
    if cert.node_operators.shape != (len(nodes), problem.dim, problem.dim):
        raise CertificateError("node operators do not match the problem")
    up, lo = _active_bound_mask(problem)
    for name, value in (("lambda_trace", cert.lambda_trace), ("lambda_norm", cert.lambda_norm), ("lambda_dist", cert.lambda_dist)):
        if value < -1e-9:
            raise CertificateError(f"{name} is negative ({value:.3g})")
    if np.any(cert.lambda_upper < -1e-9) or np.any(cert.lambda_lower < -1e-9):
        raise CertificateError("a statistics multiplier is negative")
    if np.any(cert.lambda_upper[~up] != 0) or np.any(cert.lambda_lower[~lo] != 0):
        raise CertificateError("multiplier attached to a dropped constraint")
    if np.any(np.abs(cert.marginal) > 2.0 * cert.lambda_dist + tol):
        raise CertificateError("marginal multipliers exceed the distance multiplier")

    q_key, p_full = problem.key_rotated, problem.pps_full
    for t, y in zip(nodes, cert.node_operators):
        t = float(t)
        a1, b1, a2, b2 = inner_dual_blocks_from_operator(q_key, p_full, y, t)
        first = np.block([[a1, b1], [b1.conj().T, (1.0 - t) * q_key]])
        second = np.block([[a2, b2], [b2.conj().T, t * p_full]])
        scale = 1.0 + np.linalg.norm(first, 2) + np.linalg.norm(second, 2)
        if min(_psd_floor(first), _psd_floor(second)) < -tol * scale:
            raise CertificateError(f"inner dual block at node {t:.6g} is not PSD")

    k_blocks = minorant_from_operators(problem, cert.node_operators)
    mult = _multipliers(cert)
    slack_min = min(_psd_floor(s) for s in _slack_blocks(problem, k_blocks, mult))
    if slack_min < -tol:
        raise CertificateError(f"dual slack is not PSD (smallest eigenvalue {slack_min:.3g})")
    return _dual_objective(problem, mult) + min(slack_min, 0.0)


def _multipliers(cert: DualCertificate) -> dict:
    return {
        "trace": cert.lambda_trace,
        "norm": cert.lambda_norm,
        "dist": cert.lambda_dist,
        "marginal": cert.marginal,
        "upper": cert.lambda_upper,
        "lower": cert.lambda_lower,
    }


# ----------------------------------------------------------------------------
# Affine score functions


@dataclass(frozen=True)
class AffineScoreFunction:
    """``x -> constant + coefficients . x`` over a list of scores.

    ``max_value`` and ``min_value`` are the extremes over the probability
    simplex. ``min_sigma_bound`` and ``var_bound`` are the bounds used by the
    finite-size analysis; they are set for min-tradeoff functions only.
    """

    scores: tuple[Score, ...]
    constant: float
    coefficients: np.ndarray
    min_sigma_bound: float | None = None
    var_bound: float | None = None

    def __post_init__(self) -> None:
        coef = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "constant", float(self.constant))
        if coef.shape != (len(self.scores),):
            raise ValueError("one coefficient per score is required")
        if not (math.isfinite(self.constant) and np.all(np.isfinite(coef))):
            raise ValueError("affine function must be finite")
        if self.var_bound is not None and self.var_bound < 0:
            raise ValueError("variance bound must be nonnegative")

    def __call__(self, p) -> float:
        return self.constant + float(self.coefficients @ np.asarray(p, dtype=float))

    def vertex_values(self) -> np.ndarray:
        return self.constant + self.coefficients

    @property
    def max_value(self) -> float:
        return float(self.vertex_values().max())

    @property
    def min_value(self) -> float:
        return float(self.vertex_values().min())

    def to_dict(self) -> dict:
        return {
            "scores": [c.label for c in self.scores],
            "constant": self.constant,
            "coefficients": self.coefficients.tolist(),
            "max": self.max_value,
            "min": self.min_value,
            "min_sigma_bound": self.min_sigma_bound,
            "var_bound": self.var_bound,
        }


def assemble_g(problem: EntropySdpProblem, cert: DualCertificate) -> AffineScoreFunction:
    """Affine ``g`` over the test scores with ``g(q) <= SDP(q) - g_corr(q_top)``.

    Every constraint contributes its multiplier times its right-hand side
    written as an affine function of ``q``. The certificate is verified first.
    """
    verify_certificate(problem, cert)
    cor = problem.corrections
    w = problem.weight
    lam_u, lam_l = cert.lambda_upper, cert.lambda_lower
    coef = lam_l - lam_u
    coef[TOP_INDEX] += (
        -w * cert.lambda_norm
        - problem.distance_scale * w * cert.lambda_dist
        + float(lam_u.sum()) * cor.m_U
        - float(lam_l.sum()) * cor.m_L
        - cor.m_corr
    )
    constant = (
        certificate_phi(problem, cert)
        + float(lam_u.sum()) * cor.c_U
        - float(lam_l.sum()) * cor.c_L
        - cor.c_corr
        + cor.m_corr * cor.nu_c
    )
    return AffineScoreFunction(TEST_SCORES, constant, coef)


def min_tradeoff(g: AffineScoreFunction, gamma: float) -> AffineScoreFunction:
    """Min-tradeoff function over all scores (generation label first).

    With ``g = Phi + sum_c lambda'_c q_c`` this returns the affine ``f`` with
    ``f(e_bot) = Phi + lambda'_max`` and
    ``f(e_c) = Phi - ((1 - gamma)/gamma) lambda'_max + lambda'_c / gamma``.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if tuple(g.scores) != TEST_SCORES:
        raise ValueError("g must be defined over the test scores")
    lam = g.coefficients
    lmax, lmin = float(lam.max()), float(lam.min())
    coef = np.concatenate(([0.0], (lam - lmax) / gamma))
    return AffineScoreFunction(
        ALL_SCORES,
        g.constant + lmax,
        coef,
        min_sigma_bound=g.constant + lmin,
        var_bound=(lmax - lmin) ** 2 / gamma,
    )


# ----------------------------------------------------------------------------
# Serialisation


def _encode(value):
    if isinstance(value, np.ndarray):
        out = {"shape": list(value.shape), "real": np.real(value).ravel().tolist()}
        if np.iscomplexobj(value):
            out["imag"] = np.imag(value).ravel().tolist()
        return out
    return value


def _decode(value):
    if isinstance(value, dict) and "shape" in value and "real" in value:
        arr = np.array(value["real"], dtype=float)
        if "imag" in value:
            arr = arr + 1j * np.array(value["imag"], dtype=float)
        return arr.reshape(value["shape"])
    return value


def certificate_to_text(cert: DualCertificate) -> str:
    """Structured text (JSON) with every named scalar and matrix."""
    record = {f.name: _encode(getattr(cert, f.name)) for f in fields(cert)}
    return json.dumps(record, indent=1)


def certificate_from_text(text: str) -> DualCertificate:
    record = {k: _decode(v) for k, v in json.loads(text).items()}
    return DualCertificate(**record)


def problem_to_text(problem: EntropySdpProblem) -> str:
    """Named matrices and scalars of a problem, for regression snapshots."""
    cor = problem.corrections
    record = {
        "n_max": problem.n_max,
        "gamma": problem.gamma,
        "kappa": problem.ops.kappa,
        "weight": problem.weight,
        "distance_scale": problem.distance_scale,
        "trace_floor": problem.trace_floor,
        "distance_budget": problem.distance_budget,
        "nodes": _encode(problem.rule.nodes),
        "node_weights": _encode(problem.rule.weights),
        "node_coefficients": _encode(problem.node_coefficients),
        "q": _encode(problem.q),
        "upper_bounds": [float(v) if np.isfinite(v) else None for v in problem.upper_bounds],
        "lower_bounds": [float(v) if np.isfinite(v) else None for v in problem.lower_bounds],
        "corrections": {f.name: getattr(cor, f.name) for f in fields(cor)},
        "alice_spectrum": _encode(problem.alice_spectrum),
        "key_rotated": _encode(problem.key_rotated),
        "pps_blocks": _encode(problem.pps_blocks),
        "test_blocks": _encode(problem.test_blocks),
    }
    return json.dumps(record, indent=1)
