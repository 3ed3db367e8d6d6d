"""Constraint qualification checkers.

Verdicts are three-valued. A Holds or Fails always carries re-checkable
evidence: a witness direction with its margin, a closedness witness, or a
strong Slater point with its supremum. Whenever the materialization cannot
resolve a question (for instance an eps-active set whose family part lies
entirely beyond the truncation), the answer is reported as censored or
Unknown rather than guessed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import expr as ex
from . import linsolve
from .cones import Closedness, ClosednessVerdict, accumulation_rays, augmented_generators
from .model import (
    ConstraintScan,
    FamilyScan,
    SipInstance,
    scan_constraints,
)

EPS_SCHEDULE = tuple(10.0 ** (-k) for k in range(1, 9))
MARGIN_TOL = 1e-6
ACT_TOL = 1e-9

_DECAY_RATIO = 0.9
_STABLE_RATIO = 0.75
_DECAY_STEPS = 3


class Verdict(Enum):
    HOLDS = "holds"
    FAILS = "fails"
    UNKNOWN = "unknown"


@dataclass
class EmfcqResult:
    verdict: Verdict
    margin: float
    witness: np.ndarray | None
    rank: int
    eq_count: int
    reason: str = ""


@dataclass
class EpsTrace:
    eps: float
    margins: list[float]
    status: str  # stable | decaying | degenerate | censored | ambiguous


@dataclass
class PmfcqResult:
    verdict: Verdict
    traces: list[EpsTrace]
    stabilized_eps: float | None
    margin: float | None
    witness: np.ndarray | None
    rank: int
    eq_count: int
    reason: str = ""


@dataclass
class NfmcqResult:
    verdict: Verdict
    closedness: ClosednessVerdict
    inequality_part_only: bool
    ray_count: int
    reason: str = ""


@dataclass
class SscResult:
    verdict: Verdict
    slater_point: np.ndarray | None
    sup_value: float | None
    reason: str = ""


@dataclass
class CqReport:
    emfcq: EmfcqResult
    pmfcq: PmfcqResult
    nfmcq: NfmcqResult
    ssc: SscResult
    surjective: bool
    diagnostics: list[str] = field(default_factory=list)


def _equality_data(inst: SipInstance, x):
    J = inst.eq_jacobian(x)
    m = J.shape[0]
    if m == 0:
        return J, 0, 0, True
    rank, _ = linsolve.rank_nullspace(J, 1e-9)
    return J, m, rank, rank == m


def _level_generators(scan: ConstraintScan, level: int, threshold) -> np.ndarray:
    """Columns of active gradients: value >= -threshold(value, grad)."""
    cols = []
    for i in range(len(scan.fixed_names)):
        if threshold(scan.fixed_values[i], scan.fixed_grads[i]):
            cols.append(scan.fixed_grads[i])
    for fam in scan.families:
        lev = min(level, len(fam.levels) - 1)
        vals, grads = fam.values[lev], fam.grads[lev]
        keep = [j for j in range(len(vals)) if threshold(vals[j], grads[j])]
        cols.extend(grads[j] for j in keep)
    n = scan.x.shape[0]
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def check_emfcq(
    inst: SipInstance,
    x,
    *,
    margin_tol: float = MARGIN_TOL,
    act_tol: float = ACT_TOL,
    scan: ConstraintScan | None = None,
) -> EmfcqResult:
    """Surjectivity of the equality Jacobian plus a direction in its kernel
    that is uniformly negative against every exactly-active gradient."""
    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    J, m, rank, surjective = _equality_data(inst, x)
    if not surjective:
        return EmfcqResult(Verdict.FAILS, -math.inf, None, rank, m,
                           "equality Jacobian is not surjective")
    G = _level_generators(scan, scan.n_levels - 1, lambda v, g: v >= -act_tol)
    res = linsolve.max_margin_direction(G, J.T if m else None)
    if res.margin > margin_tol:
        return EmfcqResult(Verdict.HOLDS, res.margin, res.direction, rank, m)
    return EmfcqResult(Verdict.FAILS, res.margin, res.direction, rank, m,
                       "no direction makes all active gradients strictly negative")


def _value_resolution(fam: FamilyScan) -> float:
    """How much higher the family value could sit between grid points near
    the materialized maximizer: a quadratic local bound from the second
    difference at the argmax. Boundary maximizers resolve exactly at closed
    endpoints and are covered by the tail ladders at open ones."""
    vals = fam.values[-1]
    if len(vals) < 3:
        return 0.0
    i = int(np.argmax(vals))
    if i == 0 or i == len(vals) - 1:
        return 0.0
    return abs(float(vals[i - 1] - 2.0 * vals[i] + vals[i + 1])) / 4.0


def _family_censored(fam: FamilyScan, eps: float, act_tol: float) -> bool:
    """The eps-activity structure of the family is not resolved by the
    materialization at this eps: either the set is eps-active only beyond the
    truncation (tail ladders), or the grid's value resolution around an
    interior maximizer is too coarse relative to eps. Margins computed at a
    censored eps must not count as a stable hold."""
    vals = fam.values[-1]
    m_star = float(np.max(vals)) if len(vals) else -math.inf
    has_member = m_star >= -(eps + act_tol)
    if not has_member:
        for tl in fam.tails:
            if tl.ok and tl.value_limit is not None and tl.value_limit >= -(eps + 1e-12):
                return True
    delta = _value_resolution(fam)
    near_slice = m_star + delta >= -(eps + 1e-12)
    if not has_member and near_slice:
        return True
    if has_member and near_slice and delta >= eps / 10.0:
        return True
    return False


def _classify_trace(margins: list[float], margin_tol: float) -> str:
    finite_ok = all(m > margin_tol for m in margins)
    if finite_ok:
        a, b = margins[-2] if len(margins) > 1 else margins[-1], margins[-1]
        if len(margins) == 1 or b >= _STABLE_RATIO * a:
            return "stable"
    if margins[-1] <= margin_tol:
        return "degenerate"
    if len(margins) >= _DECAY_STEPS + 1:
        tail = margins[-(_DECAY_STEPS + 1):]
        if all(nxt <= _DECAY_RATIO * cur for cur, nxt in zip(tail, tail[1:])):
            return "decaying"
    return "ambiguous"


def check_pmfcq(
    inst: SipInstance,
    x,
    eps_schedule=EPS_SCHEDULE,
    *,
    margin_tol: float = MARGIN_TOL,
    act_tol: float = ACT_TOL,
    scan: ConstraintScan | None = None,
) -> PmfcqResult:
    """Margin of the best direction against the eps-active gradients, traced
    over the eps schedule and the grid refinement levels.

    Holds needs one eps whose margins stay above margin_tol across all
    levels without decaying. Fails needs every eps to be degenerate, to decay
    across at least three consecutive refinement levels, or to be censored
    (eps-active only beyond the truncation). Anything else is Unknown.
    """
    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    J, m, rank, surjective = _equality_data(inst, x)
    if not surjective:
        return PmfcqResult(Verdict.FAILS, [], None, None, None, rank, m,
                           "equality Jacobian is not surjective")
    H = J.T if m else None
    n_levels = scan.n_levels
    traces: list[EpsTrace] = []
    best_eps, best_margin, best_witness = None, None, None
    for eps in eps_schedule:
        if any(_family_censored(fam, eps, act_tol) for fam in scan.families):
            traces.append(EpsTrace(eps, [], "censored"))
            continue
        margins = []
        witness = None
        for level in range(n_levels):
            G = _level_generators(scan, level, lambda v, g: v >= -(eps + act_tol))
            res = linsolve.max_margin_direction(G, H)
            margins.append(res.margin)
            witness = res.direction
        status = _classify_trace(margins, margin_tol)
        traces.append(EpsTrace(eps, margins, status))
        if status == "stable" and best_eps is None:
            best_eps, best_margin, best_witness = eps, margins[-1], witness
    statuses = {t.status for t in traces}
    if best_eps is not None:
        return PmfcqResult(Verdict.HOLDS, traces, best_eps, best_margin, best_witness, rank, m)
    if statuses <= {"censored", "decaying", "degenerate"} and statuses & {"decaying", "degenerate"}:
        return PmfcqResult(Verdict.FAILS, traces, None, None, None, rank, m,
                           "margins decay or vanish at every resolvable eps")
    return PmfcqResult(Verdict.UNKNOWN, traces, None, None, None, rank, m,
                       "margin traces are not conclusive within the refinement budget")


def check_nfmcq(
    inst: SipInstance,
    x,
    *,
    scan: ConstraintScan | None = None,
    tol: float = ACT_TOL,
) -> NfmcqResult:
    """Closedness of the cone of value-augmented constraint coefficients.

    With a nonempty equality block the check covers the inequality system
    only and is labelled as such.
    """
    from .cones import closedness_diagnostic

    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    labels, cols, tail_samples = augmented_generators(inst, x, scan)
    rays = []
    extrap_ok = True
    for fam in scan.families:
        samples = tail_samples.get(fam.name)
        if not samples:
            if not fam.complete:
                extrap_ok = False
            continue
        fam_rays, ok = accumulation_rays(samples, attained_dirs=cols.T)
        rays.extend(fam_rays)
        extrap_ok = extrap_ok and ok
    complete = all(f.complete for f in scan.families)
    verdict = closedness_diagnostic(
        labels, cols, rays, complete=complete, extrapolation_ok=extrap_ok, tol=tol
    )
    mapping = {
        Closedness.CLOSED: Verdict.HOLDS,
        Closedness.NOT_CLOSED: Verdict.FAILS,
        Closedness.UNKNOWN: Verdict.UNKNOWN,
    }
    return NfmcqResult(
        verdict=mapping[verdict.status],
        closedness=verdict,
        inequality_part_only=len(inst.equalities) > 0,
        ray_count=len(rays),
        reason=verdict.reason,
    )


def _sup_inequalities(inst: SipInstance, x) -> float:
    """Upper estimate of sup_t g_t(x): the materialized maximum plus the
    between-grid-points slack bounded by local curvature at each family's
    maximizer. Keeps a grid from hiding a positive peak between its points."""
    scan = scan_constraints(inst, np.asarray(x, dtype=float))
    best, _ = scan.max_value(tail=True)
    if not math.isfinite(best):
        return 0.0
    slack = max((4.0 * _value_resolution(fam) for fam in scan.families), default=0.0)
    return best + slack


def _coarse_sup_and_gradient(inst: SipInstance, x):
    """Constraint supremum and a worst-index gradient on a thinned grid."""
    x = np.asarray(x, dtype=float)
    scan = scan_constraints(inst, x, truncation=512, resolution=65, refinements=2, tail=False)
    best, who = scan.max_value(tail=False)
    if who is None:
        return 0.0, np.zeros(inst.dim)
    if who.family is None:
        return best, scan.fixed_grads[who.block]
    fam = next(f for f, _ in inst.families if f.name == who.family)
    return best, ex.eval_grad(fam.body, x, {fam.index_name: who.value})[1]


def _affine_projector(inst: SipInstance):
    """Projection onto the affine equality set, or identity when empty."""
    if not len(inst.equalities):
        return lambda x: x
    n = inst.dim
    J = inst.eq_jacobian(np.zeros(n))
    c = inst.eq_values(np.zeros(n))

    def project(x):
        resid = J @ x + c
        corr, *_ = np.linalg.lstsq(J, resid, rcond=None)
        return x - corr

    return project


def check_ssc(
    inst: SipInstance,
    x_hat=None,
    *,
    seed: int = 0,
    pmfcq: PmfcqResult | None = None,
    starts: int = 6,
    iters: int = 80,
) -> SscResult:
    """Strong Slater condition for declared-convex instances.

    A supplied candidate is verified directly. Otherwise a multistart
    projected subgradient search tries to drive the constraint supremum
    strictly negative; search failure alone never yields Fails. Fails comes
    only from the equivalence with the perturbed margin criterion on convex
    instances.
    """
    if not inst.convex:
        return SscResult(Verdict.UNKNOWN, None, None, "instance not declared convex")
    if len(inst.equalities) and not inst.equalities.affine:
        return SscResult(Verdict.UNKNOWN, None, None, "equality block not declared affine")
    notes = []
    if x_hat is not None:
        x_hat = np.asarray(x_hat, dtype=float)
        eq = float(np.max(np.abs(inst.eq_values(x_hat)))) if len(inst.equalities) else 0.0
        sup = _sup_inequalities(inst, x_hat)
        if eq <= 1e-9 and sup < -1e-9:
            return SscResult(Verdict.HOLDS, x_hat, sup)
        notes.append("supplied point is not strongly feasible")

    project = _affine_projector(inst)
    rng = np.random.default_rng(seed)
    if inst.box is not None:
        lo = np.array([b[0] for b in inst.box])
        hi = np.array([b[1] for b in inst.box])
    else:
        lo, hi = -np.ones(inst.dim), np.ones(inst.dim)
    start_pts = [project(np.zeros(inst.dim))]
    for _ in range(starts - 1):
        start_pts.append(project(rng.uniform(lo, hi)))
    best_x, best_sup = None, math.inf
    for pt in start_pts:
        xk = pt.copy()
        step0 = float(np.max(hi - lo)) / 2.0
        for k in range(iters):
            sup, g = _coarse_sup_and_gradient(inst, xk)
            if sup < best_sup:
                best_sup, best_x = sup, xk.copy()
            if sup < -1e-6:
                break
            norm = np.linalg.norm(g)
            if norm < 1e-14:
                break
            xk = project(xk - (step0 / math.sqrt(k + 1.0)) * g / norm)
    if best_x is not None and best_sup < -1e-8:
        sup_full = _sup_inequalities(inst, best_x)
        if sup_full < -1e-9:
            return SscResult(Verdict.HOLDS, best_x, sup_full)
        notes.append("coarse search point failed full verification")
    if pmfcq is not None and pmfcq.verdict == Verdict.FAILS:
        return SscResult(Verdict.FAILS, None, None,
                         "perturbed margin criterion fails on a convex instance")
    notes.append("search found no strongly feasible point")
    return SscResult(Verdict.UNKNOWN, None, None, "; ".join(notes))


def cq_summary(
    inst: SipInstance,
    x,
    eps_schedule=EPS_SCHEDULE,
    *,
    margin_tol: float = MARGIN_TOL,
    seed: int = 0,
    scan: ConstraintScan | None = None,
) -> CqReport:
    """All four checks plus cross-implication consistency enforcement."""
    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    emfcq = check_emfcq(inst, x, margin_tol=margin_tol, scan=scan)
    pmfcq = check_pmfcq(inst, x, eps_schedule, margin_tol=margin_tol, scan=scan)
    nfmcq = check_nfmcq(inst, x, scan=scan)
    ssc = check_ssc(inst, seed=seed, pmfcq=pmfcq)
    diagnostics: list[str] = []
    if pmfcq.verdict == Verdict.HOLDS and emfcq.verdict != Verdict.HOLDS:
        diagnostics.append(
            "inconsistency: perturbed margin holds while the exact-active margin does not; "
            "both downgraded"
        )
        emfcq.verdict = Verdict.UNKNOWN
        pmfcq.verdict = Verdict.UNKNOWN
    complete = all(f.complete for f in scan.families)
    if complete and emfcq.verdict == Verdict.HOLDS and nfmcq.verdict == Verdict.FAILS:
        diagnostics.append(
            "inconsistency: finite index set with a strict-margin direction cannot have a "
            "non-closed coefficient cone; closedness downgraded"
        )
        nfmcq.verdict = Verdict.UNKNOWN
    if (
        inst.convex
        and (not len(inst.equalities) or inst.equalities.affine)
        and ssc.verdict != Verdict.UNKNOWN
        and pmfcq.verdict != Verdict.UNKNOWN
        and ssc.verdict != pmfcq.verdict
    ):
        diagnostics.append(
            "inconsistency: strong Slater and perturbed margin verdicts disagree on a convex "
            "instance; both downgraded"
        )
        ssc.verdict = Verdict.UNKNOWN
        pmfcq.verdict = Verdict.UNKNOWN
    return CqReport(
        emfcq=emfcq,
        pmfcq=pmfcq,
        nfmcq=nfmcq,
        ssc=ssc,
        surjective=emfcq.rank == emfcq.eq_count,
        diagnostics=diagnostics,
    )
