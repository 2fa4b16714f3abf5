"""Minimal bounded-variable linear-program solver.

Dense two-phase primal simplex with Bland's anti-cycling rule. Supports
interval bounds on each constraint row (decomposed internally into paired
one-sided rows) and box bounds on every variable. Sized for the small
decoy-state yield-estimation problems this package generates (on the order
of 100 variables and a few dozen rows); no sparse machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

# Pivot tolerance for reduced costs / ratio-test denominators, and the
# feasibility tolerance solutions are verified against before returning.
_PIVOT_TOL = 1e-10
_FEAS_TOL = 1e-9
_TIE_TOL = 1e-12


class InfeasibleProblem(RuntimeError):
    """Raised by require_optimal() when the constraints admit no point."""


class UnboundedProblem(RuntimeError):
    """Raised by require_optimal() when the objective is unbounded."""


@dataclass
class LpProblem:
    """maximize (or minimize) c.x subject to row_lower <= A x <= row_upper
    and var_lower <= x <= var_upper (default box [0, 1])."""

    objective: np.ndarray
    rows: np.ndarray
    row_lower: np.ndarray | None = None
    row_upper: np.ndarray | None = None
    var_lower: np.ndarray | None = None
    var_upper: np.ndarray | None = None
    sense: str = "max"

    def __post_init__(self) -> None:
        self.objective = np.asarray(self.objective, dtype=float)
        n = self.objective.size
        self.rows = np.asarray(self.rows, dtype=float).reshape(-1, n)
        m = self.rows.shape[0]
        self.row_lower = np.full(m, -np.inf) if self.row_lower is None else np.asarray(
            self.row_lower, dtype=float
        )
        self.row_upper = np.full(m, np.inf) if self.row_upper is None else np.asarray(
            self.row_upper, dtype=float
        )
        self.var_lower = np.zeros(n) if self.var_lower is None else np.asarray(
            self.var_lower, dtype=float
        )
        self.var_upper = np.ones(n) if self.var_upper is None else np.asarray(
            self.var_upper, dtype=float
        )
        if self.sense not in ("max", "min"):
            raise ValueError(f"sense must be 'max' or 'min', got {self.sense!r}")
        if not np.all(np.isfinite(self.objective)):
            raise ValueError("objective coefficients must be finite")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("row coefficients must be finite")
        if np.any(self.row_lower > self.row_upper + _TIE_TOL):
            raise ValueError("row_lower must not exceed row_upper")
        if np.any(self.var_lower > self.var_upper + _TIE_TOL):
            raise ValueError("var_lower must not exceed var_upper")


@dataclass
class LpSolution:
    status: str
    objective_value: float
    x: np.ndarray
    iterations: int = 0
    basis: tuple | None = field(default=None, repr=False)  # warm-start handle

    def require_optimal(self) -> "LpSolution":
        if self.status == INFEASIBLE:
            raise InfeasibleProblem("linear program is infeasible")
        if self.status == UNBOUNDED:
            raise UnboundedProblem("linear program is unbounded")
        return self


class _Simplex:
    """Bounded-variable primal simplex over A x = b with boxes lo <= x <= hi.

    The basis inverse is not maintained incrementally; each iteration solves
    against the current basis matrix directly, which is cheap at this scale
    and numerically self-correcting.
    """

    def __init__(self, A, b, lo, hi):
        self.A = A
        self.b = b
        self.lo = lo
        self.hi = hi
        self.m, self.n = A.shape
        self.movable = (hi - lo) > _TIE_TOL

    @staticmethod
    def _solve_refined(factor, B, rhs, trans=0):
        """LU solve with residual correction in extended precision.

        Decoy problems with close intensities make the basis condition number
        large enough (1e10 and up) that a bare double solve carries ~1e-6
        forward error, which costs the ratio test its blocking variable and
        blinds the optimality check. Residuals accumulated in longdouble pull
        the limiting error down to cond * 1e-19, plenty below the 1e-9
        feasibility tolerance at the conditioning seen here.
        """
        z = lu_solve(factor, rhs, trans=trans).astype(np.longdouble)
        B_ld = B.astype(np.longdouble)
        rhs_ld = rhs.astype(np.longdouble)
        for _ in range(3):
            r = rhs_ld - (B_ld.T @ z if trans else B_ld @ z)
            r_d = r.astype(float)
            if not np.any(r_d):
                break
            z += lu_solve(factor, r_d, trans=trans)
        return z.astype(float)

    def run(self, c, basis, at_upper, max_iter):
        A, b, lo, hi = self.A, self.b, self.lo, self.hi
        basis = np.asarray(basis, dtype=int).copy()
        at_upper = at_upper.copy()
        in_basis = np.zeros(self.n, dtype=bool)
        in_basis[basis] = True
        iters = 0
        # Dantzig pricing by default; a run of degenerate pivots flips to
        # Bland's least-index rule, whose termination guarantee is the
        # anti-cycling safety net.
        bland = False
        degenerate_run = 0
        while True:
            if iters > max_iter:
                raise RuntimeError("simplex iteration limit exceeded")
            iters += 1
            x = np.where(at_upper, hi, lo)
            x[basis] = 0.0
            try:
                B = A[:, basis]
                factor = lu_factor(B)
                xB = self._solve_refined(factor, B, b - A @ x)
                y = self._solve_refined(factor, B, c[basis], trans=1)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise RuntimeError("singular basis encountered") from exc
            d = c - A.T @ y
            # Entering variable: reduced cost must point inward from the
            # variable's current bound.
            gain = np.where(at_upper, -d, d)
            gain[in_basis] = 0.0
            gain[~self.movable] = 0.0
            if bland:
                idx = np.flatnonzero(gain > _PIVOT_TOL)
                enter = int(idx[0]) if idx.size else -1
            else:
                enter = int(np.argmax(gain))
                if gain[enter] <= _PIVOT_TOL:
                    enter = -1
            if enter < 0:
                x[basis] = xB
                return OPTIMAL, x, basis, at_upper, iters
            direction = -1.0 if at_upper[enter] else 1.0
            w = self._solve_refined(factor, B, A[:, enter])
            # Ratio test: the entering variable travels until a basic
            # variable hits a bound or it flips to its own far bound.
            wdir = direction * w
            lo_b = lo[basis]
            hi_b = hi[basis]
            limits = np.full(self.m, np.inf)
            pos = wdir > _PIVOT_TOL
            neg = wdir < -_PIVOT_TOL
            limits[pos] = (xB[pos] - lo_b[pos]) / wdir[pos]
            limits[neg] = (hi_b[neg] - xB[neg]) / (-wdir[neg])
            limits = np.maximum(limits, 0.0)
            t_flip = hi[enter] - lo[enter]
            t_row = limits.min() if self.m else np.inf
            if min(t_row, t_flip) < _TIE_TOL:
                degenerate_run += 1
                if degenerate_run > 50:
                    bland = True
            else:
                degenerate_run = 0
            if t_row >= t_flip - _TIE_TOL:
                if not np.isfinite(t_flip):
                    return UNBOUNDED, None, basis, at_upper, iters
                at_upper[enter] = not at_upper[enter]  # bound flip, no pivot
                continue
            # Bland tie-break among limiting rows: smallest variable index.
            tied = np.flatnonzero(limits <= t_row + _TIE_TOL)
            leave = int(tied[np.argmin(basis[tied])])
            out = int(basis[leave])
            basis[leave] = enter
            in_basis[out] = False
            in_basis[enter] = True
            at_upper[out] = bool(neg[leave])
            at_upper[enter] = False

    def repair(self, c, basis, at_upper, budget):
        """Dual-simplex cleanup of a basis the primal loop left dirty.

        Degenerate exchanges on near-dependent decoy columns can amplify a
        sub-tolerance bound violation into one well past _FEAS_TOL while the
        reduced costs still certify optimality. Each pivot here evicts the
        worst out-of-box basic variable through the entering column picked by
        the dual ratio test, so optimality survives the cleanup. Returns the
        exact (refined) point of the final basis and the pivot count.
        """
        A, b, lo, hi = self.A, self.b, self.lo, self.hi
        basis = np.asarray(basis, dtype=int).copy()
        at_upper = at_upper.copy()
        in_basis = np.zeros(self.n, dtype=bool)
        in_basis[basis] = True
        pivots = 0
        for _ in range(budget + 1):
            x = np.where(at_upper, hi, lo)
            x[basis] = 0.0
            try:
                B = A[:, basis]
                factor = lu_factor(B)
                xB = self._solve_refined(factor, B, b - A @ x)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise RuntimeError("singular basis encountered") from exc
            lo_b = lo[basis]
            hi_b = np.where(np.isfinite(hi[basis]), hi[basis], np.inf)
            viol_lo = lo_b - xB
            viol_hi = xB - hi_b
            worst = int(np.argmax(np.maximum(viol_lo, viol_hi)))
            if max(viol_lo[worst], viol_hi[worst]) <= 0.5 * _FEAS_TOL or pivots >= budget:
                x[basis] = xB
                return x, basis, at_upper, pivots
            above = viol_hi[worst] >= viol_lo[worst]
            # Tableau row of the violated basic: alpha_j = (B^-T e_r) . a_j.
            e = np.zeros(self.m)
            e[worst] = 1.0
            rho = self._solve_refined(factor, B, e, trans=1)
            alpha = A.T @ rho
            y = self._solve_refined(factor, B, c[basis], trans=1)
            d = c - A.T @ y
            # Moving nonbasic j inward by t >= 0 changes the violator by
            # -t * step_coef[j]; only the sign that shrinks the violation
            # qualifies.
            step_coef = np.where(at_upper, -alpha, alpha)
            ok = ~in_basis & self.movable
            cand = ok & (step_coef > _PIVOT_TOL if above else step_coef < -_PIVOT_TOL)
            idx = np.flatnonzero(cand)
            if idx.size == 0:
                x[basis] = xB
                return x, basis, at_upper, pivots
            # Dual ratio test: the entering column must keep every other
            # reduced cost on its side; ties go to the biggest pivot.
            gain = np.where(at_upper, -d, d)
            ratios = np.maximum(-gain[idx], 0.0) / np.abs(alpha[idx])
            tied = idx[ratios <= ratios.min() + _TIE_TOL]
            enter = int(tied[np.argmax(np.abs(alpha[tied]))])
            out = int(basis[worst])
            basis[worst] = enter
            in_basis[out] = False
            in_basis[enter] = True
            at_upper[out] = bool(above)
            at_upper[enter] = False
            pivots += 1


def _standard_form(problem: LpProblem):
    """Turn each interval row into one equation with a ranged slack.

    a.x + s = rhs with 0 <= s <= width keeps tight two-sided rows as a single
    equation instead of an antiparallel pair, which would make the basis
    rank-deficient exactly when the interval is narrow.
    """
    rows = []
    rhs = []
    width = []
    for a, lo_r, up_r in zip(problem.rows, problem.row_lower, problem.row_upper):
        if np.isfinite(up_r):
            rows.append(a)
            rhs.append(up_r)
            width.append(max(up_r - lo_r, 0.0) if np.isfinite(lo_r) else np.inf)
        elif np.isfinite(lo_r):
            rows.append(-a)
            rhs.append(-lo_r)
            width.append(np.inf)
    n = problem.objective.size
    if not rows:
        return np.zeros((0, n)), np.zeros(0), np.zeros(0)
    return np.asarray(rows), np.asarray(rhs), np.asarray(width)


def solve(problem: LpProblem, warm_basis: tuple | None = None) -> LpSolution:
    """Solve the LP; statuses are returned, never silently clamped.

    `warm_basis` is the opaque handle from a previous LpSolution over the
    *same* constraint set (only the objective may differ); it skips phase 1.
    """
    n = problem.objective.size
    A_rows, b, width = _standard_form(problem)
    m = A_rows.shape[0]
    c_sign = 1.0 if problem.sense == "max" else -1.0
    c_real = c_sign * problem.objective

    if m == 0:
        # Pure box problem: each variable sits at whichever bound pays.
        x = np.where(c_real > 0, problem.var_upper, problem.var_lower)
        x = np.where(c_real == 0, problem.var_lower, x)
        if not np.all(np.isfinite(x[np.abs(c_real) > 0])):
            return LpSolution(UNBOUNDED, np.nan, np.full(n, np.nan))
        obj = float(problem.objective @ x)
        return LpSolution(OPTIMAL, obj, x, 0, basis=None)

    # Full variable set: [ x | slacks | artificials ]. The artificial
    # layout depends only on the constraints, so warm starts rebuild it.
    A = np.hstack([A_rows, np.eye(m)])
    lo = np.concatenate([problem.var_lower, np.zeros(m)])
    hi = np.concatenate([problem.var_upper, width])

    # With all structurals at their lower bounds the slack of row i wants to
    # sit at s0[i]; rows pushed below 0 or past the slack's own width start
    # with an artificial carrying the overshoot instead.
    s0 = b - A_rows @ problem.var_lower
    art_neg = np.flatnonzero(s0 < -_PIVOT_TOL)
    art_pos = np.flatnonzero(s0 > width + _PIVOT_TOL)
    art_rows = np.concatenate([art_neg, art_pos])
    n_art = art_rows.size
    if n_art:
        art_cols = np.zeros((m, n_art))
        art_cols[art_neg, np.arange(art_neg.size)] = -1.0
        art_cols[art_pos, art_neg.size + np.arange(art_pos.size)] = 1.0
        A = np.hstack([A, art_cols])
        lo = np.concatenate([lo, np.zeros(n_art)])
        hi = np.concatenate([hi, np.full(n_art, np.inf)])

    total = A.shape[1]
    max_iter = 200 * (total + m)
    solver = _Simplex(A, b, lo, hi)
    iters_total = 0

    basis = None
    if warm_basis is not None:
        saved_basis, saved_at_upper = warm_basis
        if len(saved_basis) == m and saved_at_upper.size == total:
            basis = np.asarray(saved_basis, dtype=int)
            at_upper = saved_at_upper.copy()
            hi[n + m :] = 0.0  # artificials stay frozen on a warm start
            solver.movable[n + m :] = False
    if basis is None:
        basis = np.array([n + i for i in range(m)])
        at_upper = np.zeros(total, dtype=bool)
        if n_art:
            basis[art_rows] = n + m + np.arange(n_art)
            at_upper[n + art_pos] = True  # those slacks start parked at width
            # Phase 1: drive artificial infeasibility to zero.
            c1 = np.zeros(total)
            c1[n + m :] = -1.0
            status, x, basis, at_upper, it1 = solver.run(c1, basis, at_upper, max_iter)
            iters_total += it1
            if status != OPTIMAL or float(c1 @ x) < -_FEAS_TOL:
                return LpSolution(INFEASIBLE, np.nan, np.full(n, np.nan), iters_total)
            # Freeze artificials at zero for phase 2.
            solver.movable[n + m :] = False
            hi[n + m :] = 0.0

    c2 = np.zeros(total)
    c2[:n] = c_real
    status, x, basis, at_upper, it2 = solver.run(c2, basis, at_upper, max_iter)
    iters_total += it2
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, np.nan, np.full(n, np.nan), iters_total)

    # The primal loop can exit with a basic variable parked slightly outside
    # its box (degenerate exchanges amplify roundoff on near-dependent decoy
    # columns). Dual pivots evict the violators; re-run the primal loop to
    # re-certify, a few rounds at most.
    for _ in range(3):
        x, basis, at_upper, pivots = solver.repair(c2, basis, at_upper, 2 * m + 10)
        if pivots == 0:
            break
        iters_total += pivots
        status, x, basis, at_upper, itr = solver.run(c2, basis, at_upper, max_iter)
        iters_total += itr
        if status == UNBOUNDED:
            return LpSolution(UNBOUNDED, np.nan, np.full(n, np.nan), iters_total)

    sol = x[:n]
    _verify_feasible(problem, sol)
    handle = (tuple(int(i) for i in basis), at_upper.copy())
    return LpSolution(
        OPTIMAL, float(problem.objective @ sol), sol, iters_total, basis=handle
    )


def _verify_feasible(problem: LpProblem, x: np.ndarray) -> None:
    if np.any(x < problem.var_lower - _FEAS_TOL) or np.any(x > problem.var_upper + _FEAS_TOL):
        raise RuntimeError("solver returned a box-infeasible point")
    if problem.rows.shape[0]:
        ax = problem.rows @ x
        if np.any(ax < problem.row_lower - _FEAS_TOL) or np.any(ax > problem.row_upper + _FEAS_TOL):
            raise RuntimeError("solver returned a row-infeasible point")
