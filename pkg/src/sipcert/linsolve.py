"""Dense linear algebra and LP kernel.

Everything the qualification checkers and cone queries need reduces to two
patterns over a generator matrix G (columns are generators) and a lineality
matrix H (columns span the subspace part):

* ``cone_feasibility``: is v in cone(G) + span(H)? Solved as an elastic
  1-norm fit; the optimal duals of the same LP are a separating functional
  when the answer is no.
* ``max_margin_direction``: the best uniform negative margin of a direction
  against all generators, inside the kernel of the equality Jacobian. Solved
  through its dual so the row count stays at ambient-dimension scale even
  with 10^4 generators.

The simplex is a dense two-phase tableau; pivoting uses the steepest
reduced cost with a permanent switch to Bland's lowest-index rule after a
degenerate stall, so wide degenerate cone LPs stay fast without cycling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class LpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


class LpFailure(RuntimeError):
    """Simplex gave up (iteration limit or numerically broken basis)."""


@dataclass
class LpProblem:
    """min c.x subject to A x = b and lower <= x <= upper (entries may be +-inf)."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = self.c.shape[0]
        if self.A.size == 0:
            self.A = self.A.reshape(0, n)
            self.b = self.b.reshape(0)
        if self.A.shape[1] != n or self.b.shape[0] != self.A.shape[0]:
            raise ValueError("inconsistent LP dimensions")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray | None = None
    objective: float | None = None
    dual: np.ndarray | None = None


@dataclass
class FeasibilityCertificate:
    """Nonnegative weights over generators plus free lineality coefficients."""

    lam: np.ndarray
    y: np.ndarray
    residual: float


@dataclass
class ConeRefutation:
    """Separating functional: <a, v> > 0 >= <a, g_i> and <a, h_j> = 0, |a|_inf = 1."""

    separator: np.ndarray
    value: float


@dataclass
class MarginResult:
    direction: np.ndarray
    margin: float


def rank_nullspace(M: np.ndarray, tol: float = 1e-9):
    """Rank and an orthonormal-ish kernel basis by Gaussian elimination.

    Pivots with magnitude > tol * max|M| count toward the rank; the returned
    basis vectors each satisfy |M v|_inf <= 10 * tol * |M|_inf.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    m, n = M.shape
    if m == 0 or n == 0 or not np.any(M):
        return 0, [e for e in np.eye(n)]
    scale = np.max(np.abs(M))
    cut = tol * max(scale, 1.0)
    R = M.copy()
    pivot_cols: list[int] = []
    row = 0
    for col in range(n):
        if row >= m:
            break
        p = row + int(np.argmax(np.abs(R[row:, col])))
        if abs(R[p, col]) <= cut:
            continue
        R[[row, p]] = R[[p, row]]
        R[row] = R[row] / R[row, col]
        for r in range(m):
            if r != row and R[r, col] != 0.0:
                R[r] -= R[r, col] * R[row]
        pivot_cols.append(col)
        row += 1
    rank = len(pivot_cols)
    free_cols = [c for c in range(n) if c not in pivot_cols]
    basis = []
    for fc in free_cols:
        v = np.zeros(n)
        v[fc] = 1.0
        for i, pc in enumerate(pivot_cols):
            v[pc] = -R[i, fc]
        basis.append(v / np.linalg.norm(v))
    return rank, basis


_RC_TOL = 1e-10


def _simplex_standard(c, A, b, *, max_iter=None):
    """min c.x s.t. A x = b, x >= 0 via a dense two-phase tableau.

    Returns (status, x, objective, dual). The dual vector y satisfies
    c_j - y.A_j >= -tol at optimality.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    if m == 0:
        x = np.zeros(n)
        if np.all(c >= -_RC_TOL):
            return LpStatus.OPTIMAL, x, 0.0, np.zeros(0)
        return LpStatus.UNBOUNDED, None, None, None

    flip = b < 0
    A = A.copy()
    A[flip] *= -1.0
    b[flip] *= -1.0

    # tableau [A | I | b]; the identity block tracks B^{-1}
    T = np.hstack([A, np.eye(m), b[:, None]])
    total = n + m
    basis = list(range(n, n + m))
    scale = max(1.0, float(np.max(np.abs(A))), float(np.max(np.abs(b))))
    rc_tol = _RC_TOL * scale
    if max_iter is None:
        max_iter = 50 * (m + n) + 2000

    def reduced_costs(cost, allowed):
        y = cost[basis] @ T[:, n : n + m]
        r = cost[:total] - np.concatenate([y @ A, y])
        r[~allowed] = np.inf
        return r, y

    def pivot(row, col):
        T[row] /= T[row, col]
        colvals = T[:, col].copy()
        colvals[row] = 0.0
        T[:] -= np.outer(colvals, T[row])
        basis[row] = col

    # Entering rule: steepest reduced cost, falling back to Bland's
    # lowest-index rule permanently after a long degenerate stall. Bland
    # guarantees escape from cycling; the steepest rule keeps wide cone LPs
    # from crawling through every generator column.
    stall_limit = 30 * (m + 1)

    def run_phase(cost, allowed, iters):
        it = 0
        stall = 0
        bland = False
        while it < iters:
            it += 1
            r, y = reduced_costs(cost, allowed)
            candidates = np.flatnonzero(r < -rc_tol)
            if candidates.size == 0:
                return LpStatus.OPTIMAL, y
            if bland:
                q = int(candidates[0])
            else:
                q = int(candidates[np.argmin(r[candidates])])
            col = T[:, q]
            rows = np.flatnonzero(col > rc_tol)
            if rows.size == 0:
                return LpStatus.UNBOUNDED, y
            ratios = T[rows, -1] / col[rows]
            best = np.min(ratios)
            ties = rows[ratios <= best + 1e-14 * scale]
            p = int(ties[np.argmin([basis[t] for t in ties])])  # lowest variable leaves
            if best <= 1e-14 * scale:
                stall += 1
                if stall > stall_limit:
                    bland = True
            else:
                stall = 0
            pivot(p, q)
        return LpStatus.ITERATION_LIMIT, None

    # phase 1: drive artificials to zero
    cost1 = np.zeros(total)
    cost1[n:] = 1.0
    allowed1 = np.ones(total, dtype=bool)
    status, _ = run_phase(cost1, allowed1, max_iter)
    if status != LpStatus.OPTIMAL:
        # phase 1 is bounded below by zero, so anything else is a numerical breakdown
        return LpStatus.ITERATION_LIMIT, None, None, None
    phase1_obj = float(cost1[basis] @ T[:, -1])
    if phase1_obj > 1e-9 * scale:
        # infeasible; duals of phase 1 certify it
        y = cost1[basis] @ T[:, n : n + m]
        y[flip] *= -1.0
        return LpStatus.INFEASIBLE, None, None, y

    # pivot lingering artificials out where possible
    for row in range(m):
        if basis[row] >= n:
            cols = np.flatnonzero(np.abs(T[row, :n]) > rc_tol)
            if cols.size:
                pivot(row, int(cols[0]))

    cost2 = np.concatenate([c, np.zeros(m)])
    allowed2 = np.ones(total, dtype=bool)
    allowed2[n:] = False  # artificials never re-enter
    status, y = run_phase(cost2, allowed2, max_iter)
    if status == LpStatus.ITERATION_LIMIT:
        return LpStatus.ITERATION_LIMIT, None, None, None
    if status == LpStatus.UNBOUNDED:
        return LpStatus.UNBOUNDED, None, None, None
    x = np.zeros(n)
    for row, j in enumerate(basis):
        if j < n:
            x[j] = T[row, -1]
    y = y.copy()
    y[flip] *= -1.0
    return LpStatus.OPTIMAL, x, float(c @ x), y


def simplex_solve(p: LpProblem, max_iter: int | None = None) -> LpSolution:
    """Two-phase dense simplex for the bounded-variable problem.

    Finite lower bounds are shifted out; finite upper bounds become slack
    rows. Never reports OPTIMAL when the iteration budget runs out.
    """
    n = p.c.shape[0]
    m = p.A.shape[0]
    lower, upper = p.lower, p.upper

    # x = shift + P z with z >= 0 (free variables split into two columns)
    cols = []
    shift = np.zeros(n)
    col_sign = []
    for j in range(n):
        lo, up = lower[j], upper[j]
        if math.isfinite(lo):
            shift[j] = lo
            cols.append((j, +1.0))
            col_sign.append("lo")
        elif math.isfinite(up):
            shift[j] = up
            cols.append((j, -1.0))
            col_sign.append("up")
        else:
            cols.append((j, +1.0))
            cols.append((j, -1.0))
            col_sign.extend(["free+", "free-"])
    k = len(cols)
    P = np.zeros((n, k))
    for idx, (j, s) in enumerate(cols):
        P[j, idx] = s

    A2 = p.A @ P
    b2 = p.b - p.A @ shift
    c2 = p.c @ P

    # upper bounds on shifted variables become equality rows with slacks
    extra_rows = []
    extra_rhs = []
    slack_count = 0
    slack_for = []
    for idx, (j, s) in enumerate(cols):
        lo, up = lower[j], upper[j]
        if math.isfinite(lo) and math.isfinite(up) and s > 0:
            extra_rows.append(idx)
            extra_rhs.append(up - lo)
            slack_for.append(idx)
            slack_count += 1
    rows = m + slack_count
    A3 = np.zeros((rows, k + slack_count))
    A3[:m, :k] = A2
    b3 = np.concatenate([b2, np.asarray(extra_rhs, dtype=float)])
    for srow, idx in enumerate(extra_rows):
        A3[m + srow, idx] = 1.0
        A3[m + srow, k + srow] = 1.0
    c3 = np.concatenate([c2, np.zeros(slack_count)])

    status, z, obj, y = _simplex_standard(c3, A3, b3, max_iter=max_iter)
    if status != LpStatus.OPTIMAL:
        dual = y[:m] if (status == LpStatus.INFEASIBLE and y is not None) else None
        return LpSolution(status=status, dual=dual)
    x = shift + P @ z[:k]
    return LpSolution(status=LpStatus.OPTIMAL, x=x, objective=float(p.c @ x), dual=y[:m])


def _as_columns(M, d):
    if M is None:
        return np.zeros((d, 0))
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((d, 0))
    M = np.atleast_2d(M)
    if M.shape[0] != d:
        raise ValueError(f"expected {d} rows, got {M.shape}")
    return M


def cone_feasibility(G, H, v, tol: float = 1e-9):
    """Decide v in cone(G) + span(H) up to tolerance.

    Feasible: FeasibilityCertificate with lam >= 0, free y, and
    |G lam + H y - v|_inf <= tol. Infeasible: ConeRefutation whose
    separator a satisfies <a, v> > 0 >= <a, g_i>, <a, h_j> = 0, |a|_inf = 1.
    """
    v = np.asarray(v, dtype=float)
    d = v.shape[0]
    G = _as_columns(G, d)
    H = _as_columns(H, d)
    mg, mh = G.shape[1], H.shape[1]

    # min sum(mu+ + mu-) s.t. G lam + H(y+ - y-) + mu+ - mu- = v
    A = np.hstack([G, H, -H, np.eye(d), -np.eye(d)])
    c = np.concatenate([np.zeros(mg + 2 * mh), np.ones(2 * d)])
    status, z, obj, y = _simplex_standard(c, A, v)
    if status != LpStatus.OPTIMAL:
        raise LpFailure(f"cone feasibility LP ended with status {status.value}")
    if obj <= max(tol, 1e-15):
        lam = z[:mg]
        yy = z[mg : mg + mh] - z[mg + mh : mg + 2 * mh]
        residual = float(np.max(np.abs(G @ lam + H @ yy - v))) if d else 0.0
        return FeasibilityCertificate(lam=lam, y=yy, residual=residual)
    a = y
    peak = np.max(np.abs(a))
    if peak <= 0:
        raise LpFailure("degenerate separator from cone feasibility LP")
    a = a / peak
    return ConeRefutation(separator=a, value=float(a @ v))


@dataclass
class HullFeasibility:
    """0 = F w + G lam + H y with convex weights w and lam >= 0."""

    weights: np.ndarray
    lam: np.ndarray
    y: np.ndarray
    residual: float


@dataclass
class HullRefutation:
    """Functional a with <a, f_i> <= -gap < 0, <a, g_j> <= 0, <a, h_k> = 0."""

    separator: np.ndarray
    gap: float


def hull_plus_cone_feasibility(F, G, H, tol: float = 1e-9):
    """Decide 0 in co(F) + cone(G) + span(H) up to tolerance.

    F, G, H hold columns. Feasible: convex weights over F, nonnegative lam
    over G, free y, with |F w + G lam + H y|_inf <= tol. Otherwise a
    separating functional proving every such combination stays away from 0.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    d = F.shape[0]
    if F.shape[1] == 0:
        raise ValueError("hull part needs at least one column")
    G = _as_columns(G, d)
    H = _as_columns(H, d)
    mf, mg, mh = F.shape[1], G.shape[1], H.shape[1]
    A = np.zeros((d + 1, mf + mg + 2 * mh + 2 * d))
    A[:d, :mf] = F
    A[:d, mf : mf + mg] = G
    A[:d, mf + mg : mf + mg + mh] = H
    A[:d, mf + mg + mh : mf + mg + 2 * mh] = -H
    A[:d, mf + mg + 2 * mh : mf + mg + 2 * mh + d] = np.eye(d)
    A[:d, mf + mg + 2 * mh + d :] = -np.eye(d)
    A[d, :mf] = 1.0
    b = np.zeros(d + 1)
    b[d] = 1.0
    c = np.concatenate([np.zeros(mf + mg + 2 * mh), np.ones(2 * d)])
    status, z, obj, y = _simplex_standard(c, A, b)
    if status != LpStatus.OPTIMAL:
        raise LpFailure(f"hull feasibility LP ended with status {status.value}")
    if obj <= max(tol, 1e-15):
        w = z[:mf]
        lam = z[mf : mf + mg]
        yy = z[mf + mg : mf + mg + mh] - z[mf + mg + mh : mf + mg + 2 * mh]
        recon = F @ w + (G @ lam if mg else 0.0) + (H @ yy if mh else 0.0)
        return HullFeasibility(weights=w, lam=lam, y=yy, residual=float(np.max(np.abs(recon))))
    a = y[:d]
    gap = float(y[d])
    peak = np.max(np.abs(a))
    if peak <= 0:
        raise LpFailure("degenerate separator from hull feasibility LP")
    return HullRefutation(separator=a / peak, gap=gap / peak)


def max_margin_direction(G, H, *, max_iter: int | None = None) -> MarginResult:
    """Best uniform margin: max s with <g_i, x> <= -s for all generators,
    H^T rows annihilated, and |x|_inf <= 1.

    Solved through the dual (rows = ambient dimension + 1); the primal
    witness is recovered from the dual multipliers. With no generators the
    margin is +inf and the witness is 0.
    """
    G = np.asarray(G, dtype=float)
    if G.size == 0:
        d = G.shape[0] if G.ndim == 2 else 0
        return MarginResult(direction=np.zeros(d), margin=math.inf)
    G = np.atleast_2d(G)
    d, mg = G.shape
    H = _as_columns(H, d)
    mh = H.shape[1]

    # dual: min 1.(u+ + u-) s.t. G lam + H y + u+ - u- = 0, sum lam = 1
    A = np.zeros((d + 1, mg + 2 * mh + 2 * d))
    A[:d, :mg] = G
    A[:d, mg : mg + mh] = H
    A[:d, mg + mh : mg + 2 * mh] = -H
    A[:d, mg + 2 * mh : mg + 2 * mh + d] = np.eye(d)
    A[:d, mg + 2 * mh + d :] = -np.eye(d)
    A[d, :mg] = 1.0
    b = np.zeros(d + 1)
    b[d] = 1.0
    c = np.concatenate([np.zeros(mg + 2 * mh), np.ones(2 * d)])
    status, z, obj, y = _simplex_standard(c, A, b, max_iter=max_iter)
    if status != LpStatus.OPTIMAL:
        raise LpFailure(f"margin LP ended with status {status.value}")
    x = y[:d]
    margin = float(obj)
    return MarginResult(direction=x, margin=margin)
