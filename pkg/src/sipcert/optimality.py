"""Normal cones to the feasible set and stationarity certificates.

The intersection over eps > 0 behind the perturbed representations is
realized finitely: one cone per scheduled eps, each augmented with the limit
rays whose generating trajectories stay eps-active in the limit, and
membership in the intersection proxy means membership at every scheduled
eps. This is a semidecision and is reported as such whenever the
qualification hypotheses behind a representation do not hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import expr as ex
from . import linsolve
from .cones import (
    GeneratedCone,
    Ray,
    accumulation_rays,
    caratheodory_reduce,
    membership,
    reduce_support,
)
from .cq import ACT_TOL, EPS_SCHEDULE, CqReport, Verdict, cq_summary
from .linsolve import (
    ConeRefutation,
    FeasibilityCertificate,
    HullFeasibility,
    HullRefutation,
    LpFailure,
)
from .model import (
    ConstraintScan,
    CountableIndexSet,
    FiniteIndexSet,
    IntervalGridIndexSet,
    SipInstance,
    SmoothCost,
    UniformityModuli,
    feasibility_check,
    scan_constraints,
)


@dataclass
class MembershipAnswer:
    is_member: bool
    certificate: FeasibilityCertificate | None = None
    refutation: ConeRefutation | None = None
    eps: float | None = None  # the eps where membership failed, if any


@dataclass
class NormalConeRep:
    point: np.ndarray
    variant: str  # perturbed | unperturbed | normalized
    per_eps: list[tuple[float, GeneratedCone]]
    cone: GeneratedCone  # unperturbed cone, or the stabilized representative
    valid: bool
    warnings: list[str] = field(default_factory=list)
    regular: bool | None = None

    def member(self, v, tol: float = 1e-6, use_limit_rays: bool = True) -> MembershipAnswer:
        """Perturbed/normalized variants: membership must hold at every
        scheduled eps (the intersection proxy). Unperturbed: one cone."""
        v = np.asarray(v, dtype=float)
        if self.variant == "unperturbed":
            out = membership(self.cone, v, tol, use_limit_rays)
            if isinstance(out, FeasibilityCertificate):
                return MembershipAnswer(True, certificate=out)
            return MembershipAnswer(False, refutation=out)
        answer = None
        for eps, cone in self.per_eps:
            out = membership(cone, v, tol, use_limit_rays)
            if isinstance(out, ConeRefutation):
                return MembershipAnswer(False, refutation=out, eps=eps)
            answer = out
        return MembershipAnswer(True, certificate=answer)


@dataclass
class KktCertificate:
    support: list[str]
    lam: np.ndarray
    y: np.ndarray
    residual: float
    cost_weights: np.ndarray | None = None
    uses_limit_rays: bool = False


@dataclass
class StationarityReport:
    condition: str  # unperturbed-kkt | perturbed-stationarity | convex-global
    outcome: str  # certificate | refuted | inconclusive
    certificate: KktCertificate | None = None
    separator: np.ndarray | None = None
    eps_trace: list[tuple[float, bool]] = field(default_factory=list)
    global_optimal: bool | None = None
    notes: list[str] = field(default_factory=list)


def _require_feasible(inst: SipInstance, x, scan: ConstraintScan):
    res = feasibility_check(inst, x, scan=scan)
    if not res.feasible:
        raise ValueError(
            f"point is not feasible: max violation {res.max_violation:.3e}, "
            f"equality residual {res.eq_residual:.3e}"
        )


def _family_rays(scan: ConstraintScan, attained_dirs) -> list[Ray]:
    """Gradient limit rays per family, with the trajectory value limit
    attached so eps-qualification can be decided per cone."""
    out: list[Ray] = []
    for fam in scan.families:
        samples = []
        vlimit = None
        for tl in fam.tails:
            if not tl.ok:
                continue
            samples.extend(zip(tl.params, tl.grads))
            vlimit = tl.value_limit if vlimit is None else max(vlimit, tl.value_limit)
        hints = [fam.declared_ray] if fam.declared_ray is not None else None
        if hints and vlimit is None:
            vlimit = 0.0
        if not samples and not hints:
            continue
        rays, ok = accumulation_rays(samples, hints, attained_dirs=attained_dirs)
        if not ok:
            continue
        for ray in rays:
            out.append(replace(ray, label=f"{fam.name}:{ray.label}", value_limit=vlimit))
    return out


def _active_columns(scan: ConstraintScan, predicate):
    labels, cols = [], []
    for i, name in enumerate(scan.fixed_names):
        if predicate(scan.fixed_values[i], scan.fixed_grads[i]):
            labels.append(name)
            cols.append(scan.fixed_grads[i])
    for fam in scan.families:
        t, vals, grads = fam.finest()
        for j in range(len(t)):
            if predicate(float(vals[j]), grads[j]):
                labels.append(f"{fam.name}({t[j]:.12g})")
                cols.append(grads[j])
    n = scan.x.shape[0]
    return labels, (np.column_stack(cols) if cols else np.zeros((n, 0)))


def _qualified_rays(rays: list[Ray], threshold: float) -> list[Ray]:
    return [r for r in rays if r.value_limit is not None and r.value_limit >= -threshold]


def normal_cone(
    inst: SipInstance,
    x,
    schedule: Sequence[float] = EPS_SCHEDULE,
    variant: str = "perturbed",
    *,
    scan: ConstraintScan | None = None,
    cq: CqReport | None = None,
    moduli: UniformityModuli | None = None,
    act_tol: float = ACT_TOL,
) -> NormalConeRep:
    """Finite representation of the normal cone to the feasible set at x.

    perturbed: one cone per scheduled eps over the eps-active gradients plus
    qualified limit rays, plus the equality lineality space. unperturbed:
    the exactly-active gradients only. normalized: eps-activity scaled by
    each gradient's norm, for families with widely spread gradient norms.
    """
    if variant not in ("perturbed", "unperturbed", "normalized"):
        raise ValueError(f"unknown variant {variant!r}")
    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    _require_feasible(inst, x, scan)
    cq = cq or cq_summary(inst, x, schedule, scan=scan)
    J = inst.eq_jacobian(x)
    lineality = J.T if J.size else np.zeros((inst.dim, 0))
    warnings: list[str] = []
    valid = True

    _, all_cols = _active_columns(scan, lambda v, g: True)
    rays = _family_rays(scan, attained_dirs=all_cols.T if all_cols.size else None)

    regular = None
    if moduli is not None and len(moduli.r_est):
        regular = bool(moduli.r_est[0] <= max(1e-2, 0.05 * moduli.r_est[-1]))

    if variant == "unperturbed":
        labels, cols = _active_columns(scan, lambda v, g: v >= -act_tol)
        cone = GeneratedCone(inst.dim, labels, cols, lineality, limit_rays=[])
        compact_t = all(
            isinstance(d, FiniteIndexSet)
            or (isinstance(d, IntervalGridIndexSet) and d.include_lower and d.include_upper)
            for _, d in inst.families
        )
        if cq.nfmcq.verdict == Verdict.HOLDS and cq.pmfcq.verdict == Verdict.HOLDS:
            pass
        elif compact_t and cq.pmfcq.verdict == Verdict.HOLDS:
            pass
        else:
            valid = False
            warnings.append(
                "unperturbed representation not guaranteed: needs a closed augmented "
                "coefficient cone (or a compact index set) together with the perturbed "
                "margin criterion"
            )
        return NormalConeRep(x, variant, [], cone, valid, warnings, regular)

    per_eps: list[tuple[float, GeneratedCone]] = []
    for eps in sorted(schedule, reverse=True):
        if variant == "perturbed":
            labels, cols = _active_columns(scan, lambda v, g: v >= -(eps + act_tol))
            eps_rays = _qualified_rays(rays, eps + 1e-12)
        else:
            labels, cols = _active_columns(
                scan, lambda v, g: v >= -(eps * float(np.linalg.norm(g)) + act_tol)
            )
            eps_rays = [
                r
                for r in rays
                if r.value_limit is not None and r.value_limit >= -(eps + 1e-12)
            ]
        per_eps.append((eps, GeneratedCone(inst.dim, labels, cols, lineality, eps_rays)))
    if cq.pmfcq.verdict != Verdict.HOLDS:
        valid = False
        warnings.append(
            "perturbed representation not guaranteed: the perturbed margin criterion "
            "does not hold at this point"
        )
    if variant == "normalized" and any(np.linalg.norm(g) < 1e-12 for g in all_cols.T):
        warnings.append("some gradients vanish; normalized activity is ill-scaled for them")
    # stabilized representative: the smallest-eps generator set plus rays
    cone = per_eps[-1][1]
    return NormalConeRep(x, variant, per_eps, cone, valid, warnings, regular)


@dataclass
class ProbeResult:
    quotient: float
    feasible_samples: int
    status: str  # ok | inconclusive


def empirical_normal_cone_probe(
    inst: SipInstance,
    x,
    v,
    samples: int = 2000,
    radius: float = 1e-3,
    *,
    seed: int = 0,
    shrink_levels: int = 3,
    min_feasible: int = 50,
    scan: ConstraintScan | None = None,
) -> ProbeResult:
    """Largest quotient <v, x' - x> / |x' - x| over feasible points sampled
    in shrinking balls around x. An oracle for membership in the regular
    normal cone that never looks at the cone construction: true normals give
    quotients near zero, and interior-pointing directions are rejected with
    quotients near one.

    Feasibility of samples is strict (no tolerance) over the materialized
    index grid and its tail ladders.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    scan = scan or scan_constraints(inst, x)
    _require_feasible(inst, x, scan)
    rng = np.random.default_rng(seed)
    n = inst.dim

    # frozen index grids from the base-point scan, tails included
    family_ts = []
    for fam in scan.families:
        t_all = fam.levels[-1]
        for tl in fam.tails:
            t_all = np.concatenate([t_all, tl.t])
        fam_obj = next(f for f, _ in inst.families if f.name == fam.name)
        family_ts.append((fam_obj, np.unique(t_all)))

    project = None
    if len(inst.equalities):
        J = inst.eq_jacobian(x)

        def project(p):
            resid = inst.eq_values(p)
            corr, *_ = np.linalg.lstsq(J, resid, rcond=None)
            return p - corr

    def feasible_mask(pts: np.ndarray) -> np.ndarray:
        ok = np.ones(len(pts), dtype=bool)
        for _, body in inst.fixed:
            vals = np.broadcast_to(
                np.asarray(ex.eval_value(body, pts), dtype=float), (len(pts),)
            )
            ok &= vals <= 0.0
        chunk = max(1, 2_000_000 // max(1, max((len(t) for _, t in family_ts), default=1)))
        for fam_obj, ts in family_ts:
            for start in range(0, len(pts), chunk):
                sl = slice(start, min(start + chunk, len(pts)))
                if not np.any(ok[sl]):
                    continue
                # broadcast samples against the whole index grid at once
                vals = np.asarray(
                    ex.eval_value(fam_obj.body, pts[sl][:, None, :], {fam_obj.index_name: ts}),
                    dtype=float,
                )
                if vals.ndim < 2:
                    vals = np.broadcast_to(vals, (sl.stop - sl.start, len(ts)))
                ok[sl] &= np.all(vals <= 0.0, axis=-1)
        for comp in inst.equalities.components:
            vals = np.broadcast_to(
                np.asarray(ex.eval_value(comp, pts), dtype=float), (len(pts),)
            )
            ok &= np.abs(vals) <= 1e-12
        return ok

    quot = -math.inf
    feasible_count = 0
    per_level = max(1, samples // max(shrink_levels, 1))
    for level in range(max(shrink_levels, 1)):
        r = radius / (2.0**level)
        u = rng.normal(size=(per_level, n))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        radii = r * rng.uniform(0.0, 1.0, size=(per_level, 1)) ** (1.0 / n)
        pts = x + radii * u
        if project is not None:
            pts = np.vstack([project(p) for p in pts])
        good = pts[feasible_mask(pts)]
        feasible_count += len(good)
        if len(good):
            d = good - x
            norms = np.linalg.norm(d, axis=1)
            keep = norms > 1e-15
            if np.any(keep):
                quot = max(quot, float(np.max(d[keep] @ v / norms[keep])))
    if feasible_count < min_feasible:
        return ProbeResult(math.inf, feasible_count, "inconclusive")
    return ProbeResult(quot, feasible_count, "ok")


def _cost_hull(inst: SipInstance, x, tol: float):
    """Columns of the cost subdifferential hull: the gradient for a smooth
    cost, the active-piece gradients for a max-type cost."""
    x = np.asarray(x, dtype=float)
    if isinstance(inst.cost, SmoothCost):
        return np.asarray(ex.eval_grad(inst.cost.body, x)[1]).reshape(-1, 1), None
    vals = np.array([float(ex.eval_value(p, x)) for p in inst.cost.pieces])
    top = float(np.max(vals))
    active = [i for i, vv in enumerate(vals) if vv >= top - max(tol, 1e-9)]
    cols = np.column_stack([ex.eval_grad(inst.cost.pieces[i], x)[1] for i in active])
    return cols, active


def _certificate_from_hull(out: HullFeasibility, labels: list[str], G, H, F) -> KktCertificate:
    lam, y = reduce_support(G, H, out.lam, out.y)
    support_idx = np.flatnonzero(lam > 1e-12)
    support = [labels[i] for i in support_idx]
    recon = F @ out.weights + (G @ lam if G.size else 0.0) + (H @ y if H.size else 0.0)
    return KktCertificate(
        support=support,
        lam=lam[support_idx],
        y=y,
        residual=float(np.max(np.abs(recon))),
        cost_weights=out.weights if len(out.weights) > 1 else None,
        uses_limit_rays=any("ray" in s for s in support),
    )


def _stationarity(inst, x, cone: GeneratedCone, tol, condition) -> StationarityReport:
    F, _ = _cost_hull(inst, x, tol)
    G, labels = cone.columns(use_limit_rays=True)
    try:
        out = linsolve.hull_plus_cone_feasibility(F, G, cone.lineality, tol)
    except LpFailure as err:
        return StationarityReport(condition, "inconclusive", notes=[str(err)])
    if isinstance(out, HullFeasibility):
        cert = _certificate_from_hull(out, labels, G, cone.lineality, F)
        return StationarityReport(condition, "certificate", certificate=cert)
    a = out.separator
    checks = [
        out.gap > 0,
        bool(np.all(F.T @ a <= -out.gap + 1e-9)),
        bool(np.all(G.T @ a <= 1e-9)) if G.size else True,
    ]
    if cone.lineality.size:
        checks.append(bool(np.max(np.abs(cone.lineality.T @ a)) <= 1e-9))
    if not all(checks):
        return StationarityReport(condition, "inconclusive",
                                  notes=["separator failed verification"])
    return StationarityReport(condition, "refuted", separator=a)


def verify_kkt(
    inst: SipInstance,
    x,
    tol: float = 1e-9,
    *,
    scan: ConstraintScan | None = None,
    act_tol: float = ACT_TOL,
) -> StationarityReport:
    """Multiplier certificate for stationarity over the exactly-active
    gradients, or a separating functional refuting it.

    The certificate support is Caratheodory-reduced. The separator a
    satisfies <a, s> <= -gap < 0 for every cost subgradient s, <a, grad> <= 0
    for every active gradient, and <a, h-row> = 0.
    """
    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    _require_feasible(inst, x, scan)
    labels, cols = _active_columns(scan, lambda v, g: v >= -act_tol)
    J = inst.eq_jacobian(x)
    lineality = J.T if J.size else np.zeros((inst.dim, 0))
    cone = GeneratedCone(inst.dim, labels, cols, lineality, limit_rays=[])
    return _stationarity(inst, x, cone, tol, "unperturbed-kkt")


def verify_perturbed_stationarity(
    inst: SipInstance,
    x,
    schedule: Sequence[float] = EPS_SCHEDULE,
    tol: float = 1e-9,
    *,
    scan: ConstraintScan | None = None,
    cq: CqReport | None = None,
) -> StationarityReport:
    """Stationarity against the eps-active cones for every scheduled eps,
    limit rays included (the finite proxy for the intersection over eps)."""
    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    _require_feasible(inst, x, scan)
    rep = normal_cone(inst, x, schedule, "perturbed", scan=scan, cq=cq)
    trace: list[tuple[float, bool]] = []
    last = None
    for eps, cone in rep.per_eps:
        report = _stationarity(inst, x, cone, tol, "perturbed-stationarity")
        trace.append((eps, report.outcome == "certificate"))
        if report.outcome != "certificate":
            report.eps_trace = trace
            report.notes = rep.warnings + report.notes
            return report
        last = report
    last.eps_trace = trace
    last.notes = rep.warnings + last.notes
    return last


def convex_global_check(
    inst: SipInstance,
    x,
    tol: float = 1e-9,
    *,
    scan: ConstraintScan | None = None,
    cq: CqReport | None = None,
) -> StationarityReport:
    """For declared-convex instances with affine equalities under the strong
    Slater (equivalently perturbed margin) and closed-cone qualifications,
    a multiplier certificate is equivalent to global optimality."""
    x = np.asarray(x, dtype=float)
    if not inst.convex:
        return StationarityReport("convex-global", "inconclusive",
                                  notes=["instance not declared convex"])
    if len(inst.equalities) and not inst.equalities.affine:
        return StationarityReport("convex-global", "inconclusive",
                                  notes=["equality block not declared affine"])
    scan = scan or scan_constraints(inst, x)
    cq = cq or cq_summary(inst, x, scan=scan)
    if not (cq.pmfcq.verdict == Verdict.HOLDS or cq.ssc.verdict == Verdict.HOLDS):
        return StationarityReport(
            "convex-global", "inconclusive",
            notes=["neither the strong Slater condition nor the perturbed margin "
                   "criterion is verified"])
    if cq.nfmcq.verdict != Verdict.HOLDS:
        return StationarityReport(
            "convex-global", "inconclusive",
            notes=["augmented coefficient cone not verified closed"])
    report = verify_kkt(inst, x, tol, scan=scan)
    report.condition = "convex-global"
    if report.outcome == "certificate":
        report.global_optimal = True
        report.notes.append("multipliers certify a global minimizer of the convex program")
    elif report.outcome == "refuted":
        report.global_optimal = False
        report.notes.append("not a global minimizer of the convex program")
    return report


def linear_specialization(
    inst: SipInstance, x, *, scan: ConstraintScan | None = None
) -> NormalConeRep:
    """Normal cone for systems affine in the decision variables.

    With a strong Slater point the perturbed representation is exact; with a
    closed augmented coefficient cone and no equalities the unperturbed cone
    of active coefficients is exact.
    """
    x = np.asarray(x, dtype=float)
    bodies = [b for _, b in inst.fixed] + [fam.body for fam, _ in inst.families]
    if not all(ex.is_affine_in_x(b) for b in bodies):
        raise ValueError("instance is not affine in the decision variables")
    if len(inst.equalities) and not all(
        ex.is_affine_in_x(c) for c in inst.equalities.components
    ):
        raise ValueError("equality block is not affine")
    convex_view = replace(inst, convex=True)
    scan = scan or scan_constraints(convex_view, x)
    cq = cq_summary(convex_view, x, scan=scan)
    if cq.ssc.verdict == Verdict.HOLDS or cq.pmfcq.verdict == Verdict.HOLDS:
        rep = normal_cone(convex_view, x, variant="perturbed", scan=scan, cq=cq)
        rep.warnings.append("affine system with a strong Slater point; representation exact")
        return rep
    if cq.nfmcq.verdict == Verdict.HOLDS and not len(inst.equalities):
        rep = normal_cone(convex_view, x, variant="unperturbed", scan=scan, cq=cq)
        rep.warnings.append("affine system with closed coefficient cone; "
                            "unperturbed representation exact")
        return rep
    rep = normal_cone(convex_view, x, variant="perturbed", scan=scan, cq=cq)
    rep.valid = False
    rep.warnings.append("affine system without a verified strong Slater point; "
                        "representation not guaranteed")
    return rep


def membership_residual_trace(
    inst: SipInstance,
    x,
    v,
    truncations: Sequence[int] = (100, 1000, 10_000),
    eps: float = 0.1,
    *,
    use_limit_rays: bool = False,
) -> list[tuple[int, float]]:
    """Distance of v from the eps-active cone as the countable truncation
    grows; shows the convergence behind tolerance-membership semantics."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    out = []
    for N in truncations:
        scan = scan_constraints(inst, x, truncation=int(N))
        labels, cols = _active_columns(scan, lambda val, g: val >= -(eps + ACT_TOL))
        J = inst.eq_jacobian(x)
        lineality = J.T if J.size else np.zeros((inst.dim, 0))
        rays = _family_rays(scan, attained_dirs=cols.T if cols.size else None)
        cone = GeneratedCone(inst.dim, labels, cols, lineality,
                             _qualified_rays(rays, eps) if use_limit_rays else [])
        res = membership(cone, v, tol=1e-9, use_limit_rays=use_limit_rays)
        if isinstance(res, FeasibilityCertificate):
            out.append((int(N), res.residual))
        else:
            out.append((int(N), float(res.value)))
    return out
