"""Dense convex quadratic programming by operator splitting.

Solves

    minimize    0.5 x' P x + q' x
    subject to  l <= A x <= u

with P symmetric positive semidefinite.  The iteration is the standard
splitting on the constraint copy z = A x: an x-update through a cached
factorization of (P + sigma*I + A' diag(rho) A), projection of the
relaxed constraint iterate onto [l, u], and a dual ascent step.  Problem
data is Ruiz-equilibrated first so rows mixing forces, velocities and
distances do not wreck the step size; termination is always tested on
the unscaled residuals.  A post-convergence polish solves the KKT system
of the detected active set so reported solutions reach linear-solver
accuracy rather than first-order-method accuracy.

The solver is deliberately self-contained: dense numpy linear algebra,
no external optimization packages.
"""

from __future__ import annotations

import enum
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

_SIGMA = 1e-6  # x-update regularization
_ALPHA = 1.6  # over-relaxation
_RHO_EQ_SCALE = 1e3  # stiffer rho on rows with l == u
_CHECK_EVERY = 10  # termination test cadence [iterations]
_RHO_ADAPT_EVERY = 50  # residual-balance cadence [iterations]
_RHO_ADAPT_TRIGGER = 5.0  # adapt when residual imbalance exceeds this factor
_RUIZ_ITERS = 10
_MIN_SCALE = 1e-8
_POLISH_ACTIVE_TOL = 1e-7  # |y| above this marks a row active
_POLISH_DELTA = 1e-9  # KKT regularization in the polish solve
_REFINE_STEPS = 3  # iterative refinement passes in the polish solve
_POLISH_MAX_SWAPS = 40  # working-set repair rounds before giving up
_FINISH_EVERY = 100  # mid-run polish attempt cadence [iterations]


class SolverStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QpProblem:
    """Problem data; rows with l == u act as equalities, infinite bounds are allowed."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self) -> None:
        n = self.q.shape[0]
        m = self.l.shape[0]
        if self.P.shape != (n, n):
            raise ValueError("P must be n x n")
        if self.A.shape != (m, n):
            raise ValueError("A must be m x n")
        if self.u.shape != (m,):
            raise ValueError("l and u must have matching length")
        if np.any(self.l > self.u):
            raise ValueError("each row needs l <= u")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.l.shape[0]


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: SolverStatus
    iterations: int
    objective: float
    primal_residual: float
    dual_residual: float
    solve_time: float
    polished: bool = False
    info: dict = field(default_factory=dict)


def _objective(problem: QpProblem, x: np.ndarray) -> float:
    return float(0.5 * x @ problem.P @ x + problem.q @ x)


def _ruiz(P, q, A, lo, up):
    """Modified Ruiz equilibration of the stacked (P, A) data.

    Returns scaled copies plus the diagonal scalings (D over variables,
    E over rows) and the cost scaling c, such that the scaled problem is
    min 0.5 xb' (c D P D) xb + (c D q)' xb  s.t.  E l <= (E A D) xb <= E u
    with xb = D^-1 x and scaled dual yb = c E^-1 y.
    """
    n = q.shape[0]
    m = lo.shape[0]
    P = P.copy()
    q = q.copy()
    A = A.copy()
    lo = lo.copy()
    up = up.copy()
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    for _ in range(_RUIZ_ITERS):
        # |q| joins the column norms so a lone huge cost entry (big-M slack
        # penalty) is absorbed into D instead of sinking the global scale c
        col = np.maximum(
            np.maximum(
                np.abs(P).max(axis=0, initial=0.0), np.abs(A).max(axis=0, initial=0.0)
            ),
            np.abs(q),
        )
        row = np.abs(A).max(axis=1, initial=0.0)
        d = 1.0 / np.sqrt(np.maximum(col, _MIN_SCALE))
        e = 1.0 / np.sqrt(np.maximum(row, _MIN_SCALE))
        P = (d[:, None] * P) * d[None, :]
        q = d * q
        A = (e[:, None] * A) * d[None, :]
        lo = e * lo
        up = e * up
        D *= d
        E *= e
        col_p = np.abs(P).max(axis=0, initial=0.0)
        gamma = 1.0 / max(np.mean(col_p), np.abs(q).max(initial=0.0), _MIN_SCALE)
        P *= gamma
        q *= gamma
        c *= gamma
    return P, q, A, lo, up, D, E, c


def _factor(P: np.ndarray, A: np.ndarray, rho: np.ndarray):
    K = P + _SIGMA * np.eye(P.shape[0]) + (A.T * rho) @ A
    try:
        chol = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
        return lambda rhs: scipy.linalg.cho_solve(chol, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        lu = scipy.linalg.lu_factor(K, check_finite=False)
        return lambda rhs: scipy.linalg.lu_solve(lu, rhs, check_finite=False)


def _primal_infeasible(problem: QpProblem, dy: np.ndarray, eps: float) -> bool:
    """Certificate test: A'dy ~ 0 with support-function value strictly negative."""
    norm = np.linalg.norm(dy, np.inf)
    if norm < 1e-12:
        return False
    dy = dy / norm
    if np.linalg.norm(problem.A.T @ dy, np.inf) > eps:
        return False
    pos = np.clip(dy, 0.0, None)
    neg = np.clip(dy, None, 0.0)
    if np.any(pos[~np.isfinite(problem.u)] > eps) or np.any(-neg[~np.isfinite(problem.l)] > eps):
        return False
    ufin = np.where(np.isfinite(problem.u), problem.u, 0.0)
    lfin = np.where(np.isfinite(problem.l), problem.l, 0.0)
    return float(ufin @ pos + lfin @ neg) < -eps


def _kkt_solve(problem: QpProblem, side: np.ndarray):
    """Equality-KKT solve holding the rows marked in side at their bound.

    side[i] is -1 (pinned at l), +1 (pinned at u) or 0 (free row).
    Returns (x, nu, active) or None when the system cannot be solved.
    """
    n = problem.n
    active = np.flatnonzero(side != 0)
    k = active.size
    A_act = problem.A[active]
    b_act = np.where(side[active] < 0, problem.l[active], problem.u[active])
    if k and not np.all(np.isfinite(b_act)):
        return None

    K = np.zeros((n + k, n + k))
    K[:n, :n] = problem.P + _POLISH_DELTA * np.eye(n)
    if k:
        K[:n, n:] = A_act.T
        K[n:, :n] = A_act
        K[n:, n:] = -_POLISH_DELTA * np.eye(k)
    rhs = np.concatenate([-problem.q, b_act])
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError):
        return None
    sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    # iterative refinement against the unregularized KKT matrix
    K0 = K.copy()
    K0[:n, :n] -= _POLISH_DELTA * np.eye(n)
    if k:
        K0[n:, n:] += _POLISH_DELTA * np.eye(k)
    for _ in range(_REFINE_STEPS):
        sol = sol + scipy.linalg.lu_solve(lu, rhs - K0 @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:n], sol[n:], active


def _certify(problem: QpProblem, x: np.ndarray, y: np.ndarray, eps: float) -> bool:
    """Full KKT check of a candidate point, every tolerance per coordinate.

    A single huge entry (the slack penalty and its 1e6-scale multipliers)
    must not widen the tolerance for every other row, or wrong-signed
    multipliers slip through; hence no inf-norm scaling anywhere.
    """
    ax = problem.A @ x
    feas_tol = eps * (1.0 + np.abs(ax))
    if np.any(problem.l - ax > feas_tol) or np.any(ax - problem.u > feas_tol):
        return False
    px = problem.P @ x
    aty = problem.A.T @ y
    r_stat = np.abs(px + problem.q + aty)
    stat_tol = eps * (1.0 + np.abs(px) + np.abs(problem.q) + np.abs(aty))
    if np.any(r_stat > stat_tol):
        return False
    # complementarity: a working multiplier requires its row at that bound
    dual_tol = eps * (1.0 + np.abs(y))
    eq = np.isfinite(problem.l) & np.isfinite(problem.u) & (problem.u - problem.l < 1e-12)
    at_up = (y > dual_tol) & ~eq
    at_lo = (y < -dual_tol) & ~eq
    if np.any(at_up & ~(np.isfinite(problem.u) & (problem.u - ax <= feas_tol))):
        return False
    if np.any(at_lo & ~(np.isfinite(problem.l) & (ax - problem.l <= feas_tol))):
        return False
    return True


def _sweep_polish(
    problem: QpProblem,
    x: np.ndarray,
    y: np.ndarray,
    eps: float,
    max_swaps: int = _POLISH_MAX_SWAPS,
):
    """Working-set repair seeded from the iterate's multiplier signs.

    Rows violated at the trial point join at the violated bound, held
    rows whose multiplier sign contradicts their bound leave.  Settles
    in a sweep or two when the iterate's active set is nearly right;
    with flat cost directions the trial points can overshoot and churn,
    which the sweep cap converts into an honest failure.
    """
    m = problem.m
    eq = np.isfinite(problem.l) & np.isfinite(problem.u) & (problem.u - problem.l < 1e-12)
    side = np.zeros(m, dtype=np.int8)
    side[y < -_POLISH_ACTIVE_TOL] = -1
    side[y > _POLISH_ACTIVE_TOL] = 1
    # a row cannot be held at an infinite bound
    side[(side == -1) & ~np.isfinite(problem.l)] = 0
    side[(side == 1) & ~np.isfinite(problem.u)] = 0
    side[eq] = 1  # equality rows are always held; both bounds coincide

    for _ in range(max_swaps):
        res = _kkt_solve(problem, side)
        if res is None:
            return None
        x_pol, nu, active = res
        ax = problem.A @ x_pol
        feas_tol = eps * (1.0 + np.abs(ax))
        nu_full = np.zeros(m)
        nu_full[active] = nu
        dual_tol = eps * (1.0 + np.abs(nu_full))

        join_lo = (problem.l - ax > feas_tol) & (side == 0)
        join_up = (ax - problem.u > feas_tol) & (side == 0)
        drop_lo = (side == -1) & (nu_full > dual_tol)
        drop_up = (side == 1) & ~eq & (nu_full < -dual_tol)

        if not (join_lo.any() or join_up.any() or drop_lo.any() or drop_up.any()):
            return x_pol, nu_full
        side[join_lo] = -1
        side[join_up] = 1
        side[drop_lo] = 0
        side[drop_up] = 0
    return None


def _kkt_direction(P: np.ndarray, N: np.ndarray, n_p: np.ndarray):
    """Solve [P N; N' 0] [z; r] = [n_p; 0] with light regularization."""
    n = P.shape[0]
    k = N.shape[1]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P + _POLISH_DELTA * np.eye(n)
    if k:
        K[:n, n:] = N
        K[n:, :n] = N.T
        K[n:, n:] = -_POLISH_DELTA * np.eye(k)
    rhs = np.concatenate([n_p, np.zeros(k)])
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError):
        return None
    sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    K0 = K.copy()
    K0[:n, :n] -= _POLISH_DELTA * np.eye(n)
    if k:
        K0[n:, n:] += _POLISH_DELTA * np.eye(k)
    for _ in range(_REFINE_STEPS):
        sol = sol + scipy.linalg.lu_solve(lu, rhs - K0 @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:n], sol[n:]


def _dual_active_set(problem: QpProblem, eps: float):
    """Dual active-set solve (Goldfarb-Idnani) for strictly convex problems.

    Starts at the unconstrained optimum and adds one violated row at a
    time, taking dual steps that drop blocking rows along the way, so no
    feasible start is needed and the dual objective is monotone.  Covers
    the case the sweep polish cannot: nearly flat cost directions where
    working-set trial points overshoot.  Equality rows (l == u) and
    semidefinite P are not supported; the caller keeps the raw iterate.
    Returns (x, y) or None.
    """
    m = problem.m
    if m and np.any(problem.u - problem.l < 1e-12):
        return None
    try:
        chol = scipy.linalg.cho_factor(problem.P, lower=True, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError):
        return None
    x = -scipy.linalg.cho_solve(chol, problem.q, check_finite=False)
    if not np.all(np.isfinite(x)):
        return None

    rows: list[int] = []  # working set rows
    sides: list[int] = []  # +1 held at l (A_i x >= l_i), -1 held at u
    mult: list[float] = []  # nonnegative multipliers of the >= form
    finite_l = np.isfinite(problem.l)
    finite_u = np.isfinite(problem.u)

    for _ in range(6 * m + 20):
        ax = problem.A @ x
        tol = 1e-9 * (1.0 + np.abs(ax))
        margin_lo = np.where(finite_l, problem.l - ax, -np.inf) - tol
        margin_up = np.where(finite_u, ax - problem.u, -np.inf) - tol
        for row, side in zip(rows, sides):
            if side > 0:
                margin_lo[row] = -np.inf
            else:
                margin_up[row] = -np.inf
        i_lo = int(np.argmax(margin_lo)) if m else 0
        i_up = int(np.argmax(margin_up)) if m else 0
        if not m or max(margin_lo[i_lo], margin_up[i_up]) <= 0.0:
            break  # primal feasible: done
        if margin_lo[i_lo] >= margin_up[i_up]:
            p_row, p_side = i_lo, 1
        else:
            p_row, p_side = i_up, -1
        n_p = p_side * problem.A[p_row]
        b_p = problem.l[p_row] if p_side > 0 else -problem.u[p_row]
        u_p = 0.0

        added = False
        for _ in range(len(rows) + 1):
            N = problem.A[rows].T * np.asarray(sides, dtype=float) if rows else np.zeros((problem.n, 0))
            direction = _kkt_direction(problem.P, N, n_p)
            if direction is None:
                return None
            z, r = direction
            denom = float(z @ n_p)
            s_p = float(n_p @ x) - b_p
            t2 = -s_p / denom if denom > 1e-13 * (1.0 + abs(s_p)) else np.inf
            t1 = np.inf
            k1 = -1
            for k, rk in enumerate(r):
                if rk > 1e-13 and mult[k] / rk < t1:
                    t1 = mult[k] / rk
                    k1 = k
            t = min(t1, t2)
            if not np.isfinite(t):
                return None  # no constrained minimizer in this direction
            if t > 0.0:
                if np.isfinite(t2):
                    x = x + t * z
                for k in range(len(mult)):
                    mult[k] -= t * r[k]
                u_p += t
            if t2 <= t1:
                rows.append(p_row)
                sides.append(p_side)
                mult.append(u_p)
                added = True
                break
            del rows[k1], sides[k1], mult[k1]
        if not added and rows:
            continue
        if not added:
            return None
    else:
        return None

    y = np.zeros(m)
    for row, side, u_k in zip(rows, sides, mult):
        y[row] += -u_k if side > 0 else u_k
    return x, y


def _polish(problem: QpProblem, x: np.ndarray, y: np.ndarray, eps: float):
    """Finish to a certified KKT point.

    Tries the iterate-seeded working-set repair first (cheap, settles
    almost immediately on a decent iterate), then the dual active-set
    construction from scratch.  A True result means the returned point
    passed the explicit per-row KKT certificate, so acceptance never
    rests on trusting either path's internals.
    """
    res = _sweep_polish(problem, x, y, eps)
    if res is not None and _certify(problem, res[0], res[1], eps):
        return res[0], res[1], True
    res = _dual_active_set(problem, eps)
    if res is not None and _certify(problem, res[0], res[1], eps):
        return res[0], res[1], True
    return x, y, False


def solve_qp(
    problem: QpProblem,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
    eps: float = 1e-4,
    eps_rel: float | None = None,
    max_iter: int = 4000,
    rho: float = 0.1,
    polish: bool = True,
    scaling: bool = True,
) -> QpResult:
    """Solve a convex QP.

    Parameters
    ----------
    problem : QpProblem
        Data (P, q, A, l, u); P must be positive semidefinite.
    x0, y0 : ndarray, optional
        Warm-start primal and dual iterates (unscaled).  Omitting both
        starts cold.
    eps : float
        Absolute tolerance on the primal and dual residuals (residuals
        are measured on the original, unequilibrated data).
    eps_rel : float, optional
        Relative tolerance; defaults to eps.  Pass 0.0 to terminate on
        the absolute criterion alone, which matters when one cost entry
        dwarfs the rest (a soft-constraint penalty can otherwise inflate
        the dual threshold until it accepts anything).
    max_iter : int
        Iteration cap; hitting it yields status MAX_ITER with the current
        iterate.
    rho : float
        Base step size of the splitting; rows with l == u use a stiffer
        value internally.
    polish : bool
        Re-solve the detected active set's KKT system after convergence.
    scaling : bool
        Ruiz-equilibrate the data before iterating.

    Returns
    -------
    QpResult
        Solution iterate, status, iteration count, objective and
        residuals, all in original units.
    """
    start = _time.perf_counter()
    n, m = problem.n, problem.m
    if eps_rel is None:
        eps_rel = eps

    if m == 0:
        K = problem.P + _SIGMA * np.eye(n)
        x = np.linalg.solve(K, -problem.q)
        return QpResult(
            x=x, y=np.zeros(0), z=np.zeros(0), status=SolverStatus.OPTIMAL,
            iterations=0, objective=_objective(problem, x),
            primal_residual=0.0,
            dual_residual=float(np.linalg.norm(problem.P @ x + problem.q, np.inf)),
            solve_time=_time.perf_counter() - start,
        )

    if polish and x0 is not None and y0 is not None:
        # a shifted previous solution usually carries the right active set
        # already; one working-set repair then certifies an optimum without
        # running the splitting at all.  Stale starts fail fast (small sweep
        # cap) and fall through to the normal iteration.
        res = _sweep_polish(
            problem, np.asarray(x0, dtype=float), np.asarray(y0, dtype=float), eps, max_swaps=8
        )
        if res is not None and _certify(problem, res[0], res[1], eps):
            x, y = res
            z = np.clip(problem.A @ x, problem.l, problem.u)
            return QpResult(
                x=x, y=y, z=z, status=SolverStatus.OPTIMAL, iterations=0,
                objective=_objective(problem, x),
                primal_residual=float(np.linalg.norm(problem.A @ x - z, np.inf)),
                dual_residual=float(
                    np.linalg.norm(problem.P @ x + problem.q + problem.A.T @ y, np.inf)
                ),
                solve_time=_time.perf_counter() - start, polished=True,
            )

    if scaling:
        P, q, A, lo, up, D, E, c = _ruiz(problem.P, problem.q, problem.A, problem.l, problem.u)
    else:
        P, q, A, lo, up = problem.P, problem.q, problem.A, problem.l, problem.u
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0

    eq_rows = np.isfinite(lo) & np.isfinite(up) & (up - lo < 1e-12)
    rho_base = rho
    rho_vec = np.full(m, rho_base)
    rho_vec[eq_rows] = rho_base * _RHO_EQ_SCALE
    solve = _factor(P, A, rho_vec)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / D
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) * c / E
    z = np.clip(A @ x, lo, up)

    status = SolverStatus.MAX_ITER
    iterations = max_iter
    r_prim = r_dual = np.inf
    y_prev = y.copy()
    finished: tuple[np.ndarray, np.ndarray] | None = None
    next_finish = _FINISH_EVERY

    for it in range(1, max_iter + 1):
        rhs = _SIGMA * x - q + A.T @ (rho_vec * z - y)
        x = solve(rhs)
        ax = A @ x
        ax_rel = _ALPHA * ax + (1.0 - _ALPHA) * z
        z = np.clip(ax_rel + y / rho_vec, lo, up)
        y = y + rho_vec * (ax_rel - z)

        if it % _RHO_ADAPT_EVERY == 0 and it < max_iter:
            # rebalance rho when one scaled residual dominates the other
            rp = float(np.linalg.norm(ax - z, np.inf)) / max(
                float(np.linalg.norm(ax, np.inf)), float(np.linalg.norm(z, np.inf)), _MIN_SCALE
            )
            rd = float(np.linalg.norm(P @ x + q + A.T @ y, np.inf)) / max(
                float(np.linalg.norm(P @ x, np.inf)),
                float(np.linalg.norm(A.T @ y, np.inf)),
                float(np.linalg.norm(q, np.inf)),
                _MIN_SCALE,
            )
            ratio = np.sqrt(rp / max(rd, _MIN_SCALE))
            if ratio > _RHO_ADAPT_TRIGGER or ratio < 1.0 / _RHO_ADAPT_TRIGGER:
                rho_base = float(np.clip(rho_base * ratio, 1e-6, 1e6))
                rho_vec = np.full(m, rho_base)
                rho_vec[eq_rows] = rho_base * _RHO_EQ_SCALE
                solve = _factor(P, A, rho_vec)

        if it % _CHECK_EVERY == 0 or it == max_iter:
            # unscaled residuals
            rp_vec = (ax - z) / E
            rd_vec = (P @ x + q + A.T @ y) / D / c
            r_prim = float(np.linalg.norm(rp_vec, np.inf))
            r_dual = float(np.linalg.norm(rd_vec, np.inf))
            eps_prim = eps + eps_rel * max(
                float(np.linalg.norm(ax / E, np.inf)), float(np.linalg.norm(z / E, np.inf))
            )
            eps_dual = eps + eps_rel * max(
                float(np.linalg.norm((P @ x) / D / c, np.inf)),
                float(np.linalg.norm((A.T @ y) / D / c, np.inf)),
                float(np.linalg.norm(q / D / c, np.inf)),
            )
            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = SolverStatus.OPTIMAL
                iterations = it
                break
            if _primal_infeasible(problem, E * (y - y_prev) / c, eps):
                status = SolverStatus.INFEASIBLE
                iterations = it
                break
            y_prev = y.copy()

        # a moderately converged iterate often identifies the active set long
        # before the residuals pass; a certified finish ends the run early.
        # failed attempts back off so they cannot dominate the run time
        if polish and it >= next_finish and it < max_iter:
            xf, yf, ok = _polish(problem, D * x, E * y / c, eps)
            if ok:
                finished = (xf, yf)
                status = SolverStatus.OPTIMAL
                iterations = it
                break
            next_finish = 2 * it

    polished = False
    if finished is not None:
        x, y = finished
        polished = True
    else:
        # back to original units
        x = D * x
        y = E * y / c
        if polish and status in (SolverStatus.OPTIMAL, SolverStatus.MAX_ITER):
            xf, yf, ok = _polish(problem, x, y, eps)
            if ok:
                if status is SolverStatus.MAX_ITER:
                    status = SolverStatus.OPTIMAL
                x, y, polished = xf, yf, True
    z = np.clip(problem.A @ x, problem.l, problem.u)
    if polished:
        r_prim = float(np.linalg.norm(problem.A @ x - z, np.inf))
        r_dual = float(np.linalg.norm(problem.P @ x + problem.q + problem.A.T @ y, np.inf))

    return QpResult(
        x=x, y=y, z=z, status=status, iterations=iterations,
        objective=_objective(problem, x),
        primal_residual=r_prim, dual_residual=r_dual,
        solve_time=_time.perf_counter() - start, polished=polished,
    )
