"""Problem instances: data model, instance-file loading, feasibility,
active index sets, and uniform-differentiability moduli estimates.

Index families over truncated infinite sets carry a *tail ladder*: the family
is also evaluated at indices pushed toward the unattained end of the set
(huge countable indices, or interval points geometrically approaching an open
endpoint). The ladder gives honest finite surrogates for suprema that are
approached but never attained, and feeds the limit-ray machinery.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import expr as ex

_CONSTRAINT_NAME = re.compile(
    r"^([A-Za-z_][A-Za-z0-9_]*)\s*(?:\(\s*([A-Za-z_][A-Za-z0-9_]*)\s*\))?$"
)

DEFAULT_TRUNCATION = 10_000
DEFAULT_RESOLUTION = 257
DEFAULT_REFINEMENTS = 4
FEAS_TOL = 1e-9


class InstanceError(ValueError):
    """Instance validation or file-format failure."""

    def __init__(self, message: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(message + where)
        self.line = line


@dataclass(frozen=True)
class FiniteIndexSet:
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise InstanceError("finite index set needs at least one value")


@dataclass(frozen=True)
class IntervalGridIndexSet:
    lower: float
    upper: float
    include_lower: bool = True
    include_upper: bool = True
    resolution: int = DEFAULT_RESOLUTION
    refinements: int = DEFAULT_REFINEMENTS

    def __post_init__(self):
        if not self.lower < self.upper:
            raise InstanceError("interval index set needs lower < upper")
        if self.resolution < 2:
            raise InstanceError("interval resolution must be at least 2")


@dataclass(frozen=True)
class CountableIndexSet:
    start: int = 0
    truncation: int = DEFAULT_TRUNCATION
    limit_ray: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.start < 0 or self.truncation < self.start:
            raise InstanceError("countable index set needs 0 <= start <= truncation")


IndexSetDescriptor = Union[FiniteIndexSet, IntervalGridIndexSet, CountableIndexSet]


@dataclass(frozen=True)
class ConstraintFamily:
    name: str
    index_name: str
    body: ex.ExprAst


@dataclass(frozen=True)
class EqualityBlock:
    components: tuple[ex.ExprAst, ...] = ()
    affine: bool = False
    names: tuple[str, ...] = ()

    def __len__(self):
        return len(self.components)


@dataclass(frozen=True)
class SmoothCost:
    body: ex.ExprAst


@dataclass(frozen=True)
class ConvexMaxCost:
    pieces: tuple[ex.ExprAst, ...]

    def __post_init__(self):
        if not self.pieces:
            raise InstanceError("max-type cost needs at least one piece")


@dataclass(frozen=True)
class SipInstance:
    dim: int
    cost: SmoothCost | ConvexMaxCost
    fixed: tuple[tuple[str, ex.ExprAst], ...] = ()
    families: tuple[tuple[ConstraintFamily, IndexSetDescriptor], ...] = ()
    equalities: EqualityBlock = EqualityBlock()
    convex: bool = False
    box: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not 1 <= self.dim <= ex.MAX_DIM:
            raise InstanceError(f"dimension must be between 1 and {ex.MAX_DIM}")
        bodies = []
        if isinstance(self.cost, SmoothCost):
            bodies.append(("cost", self.cost.body, set()))
        else:
            bodies.extend((f"cost piece {i}", p, set()) for i, p in enumerate(self.cost.pieces))
        for name, body in self.fixed:
            bodies.append((name, body, set()))
        for fam, _ in self.families:
            bodies.append((fam.name, fam.body, {fam.index_name}))
        for i, comp in enumerate(self.equalities.components):
            name = self.equalities.names[i] if i < len(self.equalities.names) else f"h{i + 1}"
            bodies.append((name, comp, set()))
        for name, body, allowed in bodies:
            if ex.max_var_position(body) > self.dim:
                raise InstanceError(f"'{name}' references a variable beyond dimension {self.dim}")
            extra = ex.free_index_names(body) - allowed
            if extra:
                raise InstanceError(f"'{name}' uses undeclared index variable(s) {sorted(extra)}")
        if len(self.equalities) >= self.dim:
            raise InstanceError("need fewer equalities than decision variables")
        if self.box is not None and len(self.box) != self.dim:
            raise InstanceError("box must give one range per variable")

    # equality block helpers
    def eq_values(self, x) -> np.ndarray:
        return np.array([float(ex.eval_value(c, x)) for c in self.equalities.components])

    def eq_jacobian(self, x) -> np.ndarray:
        if not self.equalities.components:
            return np.zeros((0, self.dim))
        return np.vstack([ex.eval_grad(c, x)[1] for c in self.equalities.components])

    def cost_value(self, x) -> float:
        if isinstance(self.cost, SmoothCost):
            return float(ex.eval_value(self.cost.body, x))
        return max(float(ex.eval_value(p, x)) for p in self.cost.pieces)

    def cost_grad(self, x) -> np.ndarray:
        """Gradient of a smooth cost; for a max-type cost, the gradient of the
        first piece attaining the maximum (a valid subgradient)."""
        if isinstance(self.cost, SmoothCost):
            return ex.eval_grad(self.cost.body, x)[1]
        vals = [float(ex.eval_value(p, x)) for p in self.cost.pieces]
        best = int(np.argmax(vals))
        return ex.eval_grad(self.cost.pieces[best], x)[1]


# ---------------------------------------------------------------------------
# materialization


@dataclass(frozen=True, order=True)
class IndexId:
    block: int
    value: float
    label: str = field(compare=False)
    family: str | None = field(compare=False, default=None)


def _index_label(family: str, t: float) -> str:
    if float(t).is_integer() and abs(t) < 1e15:
        return f"{family}({int(t)})"
    return f"{family}({t:.12g})"


@dataclass
class FamilyTail:
    params: np.ndarray
    t: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    value_limit: float | None
    grad_limit: np.ndarray | None
    ray: np.ndarray | None
    value_residual: float
    ray_residual: float
    ok: bool


@dataclass
class FamilyScan:
    name: str
    block: int
    index_name: str
    descriptor: IndexSetDescriptor
    levels: list[np.ndarray]       # cumulative sorted index values per level
    values: list[np.ndarray]
    grads: list[np.ndarray]
    tails: list[FamilyTail]
    complete: bool
    declared_ray: np.ndarray | None = None

    def finest(self):
        return self.levels[-1], self.values[-1], self.grads[-1]

    def ids(self, level: int = -1) -> list[IndexId]:
        return [
            IndexId(self.block, float(t), _index_label(self.name, float(t)), self.name)
            for t in self.levels[level]
        ]


@dataclass
class ConstraintScan:
    x: np.ndarray
    fixed_names: list[str]
    fixed_values: np.ndarray
    fixed_grads: np.ndarray
    families: list[FamilyScan]
    n_levels: int

    def fixed_ids(self) -> list[IndexId]:
        return [IndexId(i, 0.0, name, None) for i, name in enumerate(self.fixed_names)]

    def max_value(self, tail: bool = True) -> tuple[float, IndexId | None]:
        best, who = -math.inf, None
        for i, name in enumerate(self.fixed_names):
            if self.fixed_values[i] > best:
                best, who = float(self.fixed_values[i]), IndexId(i, 0.0, name, None)
        for fam in self.families:
            t, v, _ = fam.finest()
            if len(v):
                j = int(np.argmax(v))
                if v[j] > best:
                    best = float(v[j])
                    who = IndexId(fam.block, float(t[j]), _index_label(fam.name, float(t[j])), fam.name)
            if tail:
                for tl in fam.tails:
                    if len(tl.values):
                        j = int(np.argmax(tl.values))
                        if tl.values[j] > best:
                            best = float(tl.values[j])
                            who = IndexId(
                                fam.block,
                                float(tl.t[j]),
                                _index_label(fam.name, float(tl.t[j])),
                                fam.name,
                            )
        return best, who


def _safe_unit(v: np.ndarray) -> np.ndarray | None:
    """Unit vector along v, robust to entries near the underflow floor."""
    peak = float(np.max(np.abs(v)))
    if peak == 0.0 or not math.isfinite(peak):
        return None
    scaled = v / peak
    return scaled / np.linalg.norm(scaled)


def _ladder_exponents(k0: int) -> list[int]:
    ks = list(range(k0, min(k0 + 5, 300)))
    k = k0 + 6
    while k < 300:
        ks.append(k)
        k = int(k * 1.6) + 2
    ks.append(300)
    return sorted(set(ks))


def _family_batch(fam: ConstraintFamily, x, ts: np.ndarray, need_grads: bool):
    """Values (and gradients) of one family over an index array, broadcasting
    expressions that do not mention the index variable."""
    m = len(ts)
    n = len(x)
    if m == 0:
        return np.zeros(0), np.zeros((0, n))
    env = {fam.index_name: ts}
    if need_grads:
        vals, grads = ex.eval_grad(fam.body, x, env)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), (m,)).copy()
        grads = np.broadcast_to(np.asarray(grads, dtype=float), (m, n)).copy()
        return vals, grads
    vals = np.broadcast_to(np.asarray(ex.eval_value(fam.body, x, env), dtype=float), (m,)).copy()
    return vals, None


def _tail_ladder(fam: ConstraintFamily, desc: IndexSetDescriptor, x, need_grads: bool):
    """Evaluate toward the unattained ends of the index set."""
    ladders: list[tuple[np.ndarray, np.ndarray]] = []  # (params s -> 0, index values)
    if isinstance(desc, CountableIndexSet):
        e0 = int(math.floor(math.log10(max(desc.truncation, 1)))) + 1
        ns = np.array([10.0**e for e in _ladder_exponents(e0)])
        ladders.append((1.0 / ns, ns))
    elif isinstance(desc, IntervalGridIndexSet):
        width = desc.upper - desc.lower
        k0 = int(math.ceil(math.log10(desc.resolution))) + 1
        ss = np.array([10.0 ** (-k) for k in _ladder_exponents(k0)])
        if not desc.include_lower:
            ladders.append((ss, desc.lower + width * ss))
        if not desc.include_upper:
            ladders.append((ss, desc.upper - width * ss))
    tails = []
    n = len(x)
    for params, ts in ladders:
        order = np.argsort(-params)  # approach the limit last
        params, ts = params[order], ts[order]
        try:
            vals, grads = _family_batch(fam, x, ts, True)
        except ex.ExprError:
            # evaluate entrywise, dropping points the expression rejects
            keep, vlist, glist = [], [], []
            for i, t in enumerate(ts):
                try:
                    v, g = ex.eval_grad(fam.body, x, {fam.index_name: float(t)})
                except ex.ExprError:
                    continue
                keep.append(i)
                vlist.append(float(v))
                glist.append(g)
            if len(keep) < 2:
                tails.append(
                    FamilyTail(params[:0], ts[:0], np.zeros(0), np.zeros((0, n)),
                               None, None, None, math.inf, math.inf, False)
                )
                continue
            params, ts = params[keep], ts[keep]
            vals, grads = np.array(vlist), np.vstack(glist)
        finite = np.isfinite(vals) & np.all(np.isfinite(grads), axis=1)
        params, ts, vals, grads = params[finite], ts[finite], vals[finite], grads[finite]
        if len(vals) < 2:
            tails.append(
                FamilyTail(params, ts, vals, grads, None, None, None, math.inf, math.inf, False)
            )
            continue
        value_limit = float(vals[-1])
        value_residual = abs(float(vals[-1] - vals[-2]))
        grad_limit = grads[-1]
        last_dir = _safe_unit(grads[-1])
        prev_dir = _safe_unit(grads[-2])
        if last_dir is not None and prev_dir is not None:
            ray = last_dir
            ray_residual = float(np.linalg.norm(last_dir - prev_dir))
        else:
            ray, ray_residual = None, math.inf
        ok = value_residual <= 1e-6 and np.max(np.abs(grads[-1] - grads[-2])) <= 1e-6
        tails.append(
            FamilyTail(params, ts, vals, grads, value_limit, grad_limit, ray,
                       value_residual, ray_residual if ray is not None else math.inf, ok)
        )
    return tails


def _base_grid(desc: IndexSetDescriptor) -> np.ndarray:
    if isinstance(desc, FiniteIndexSet):
        return np.array(sorted(desc.values), dtype=float)
    if isinstance(desc, CountableIndexSet):
        return np.arange(desc.start, desc.truncation + 1, dtype=float)
    ts = np.linspace(desc.lower, desc.upper, desc.resolution)
    if not desc.include_lower:
        ts = ts[1:]
    if not desc.include_upper:
        ts = ts[:-1]
    return ts


_REFINE_SITES = 12


def _refine_once(desc: IntervalGridIndexSet, ts: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Insert bisection points around local maximizers of the value profile."""
    m = len(ts)
    if m == 0:
        return ts
    is_max = np.ones(m, dtype=bool)
    if m > 1:
        is_max[1:] &= vals[1:] >= vals[:-1]
        is_max[:-1] &= vals[:-1] >= vals[1:]
    order = np.argsort(-vals, kind="stable")
    sites = [int(i) for i in order if is_max[i]][:_REFINE_SITES]
    new_pts = []
    for i in sites:
        if i > 0:
            new_pts.append(0.5 * (ts[i - 1] + ts[i]))
        elif not desc.include_lower:
            new_pts.append(0.5 * (desc.lower + ts[0]))
        if i < m - 1:
            new_pts.append(0.5 * (ts[i] + ts[i + 1]))
        elif not desc.include_upper:
            new_pts.append(0.5 * (ts[-1] + desc.upper))
    merged = np.union1d(ts, np.array(new_pts))
    lo_ok = merged > desc.lower if not desc.include_lower else merged >= desc.lower
    up_ok = merged < desc.upper if not desc.include_upper else merged <= desc.upper
    return merged[lo_ok & up_ok]


def _apply_overrides(desc, truncation, resolution, refinements):
    if isinstance(desc, CountableIndexSet) and truncation is not None:
        desc = replace(desc, truncation=max(truncation, desc.start))
    if isinstance(desc, IntervalGridIndexSet):
        if resolution is not None:
            desc = replace(desc, resolution=resolution)
        if refinements is not None:
            desc = replace(desc, refinements=refinements)
    return desc


def scan_constraints(
    inst: SipInstance,
    x,
    *,
    truncation: int | None = None,
    resolution: int | None = None,
    refinements: int | None = None,
    tail: bool = True,
) -> ConstraintScan:
    """Evaluate every constraint at x: fixed constraints, family grids with
    refinement levels (interval grids refine around local maximizers of the
    constraint value), and tail ladders for truncated descriptors."""
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.dim,):
        raise InstanceError(f"point must have dimension {inst.dim}")
    fixed_names = [name for name, _ in inst.fixed]
    if inst.fixed:
        fixed_values = np.array([float(ex.eval_value(b, x)) for _, b in inst.fixed])
        fixed_grads = np.vstack([ex.eval_grad(b, x)[1] for _, b in inst.fixed])
    else:
        fixed_values = np.zeros(0)
        fixed_grads = np.zeros((0, inst.dim))

    families = []
    n_levels = 1
    for pos, (fam, desc0) in enumerate(inst.families):
        desc = _apply_overrides(desc0, truncation, resolution, refinements)
        ts = _base_grid(desc)
        if len(ts) == 0:
            raise InstanceError(f"family '{fam.name}' materializes to an empty index set")
        levels, values, grads = [], [], []
        vals, grs = _family_batch(fam, x, ts, True)
        levels.append(ts)
        values.append(vals)
        grads.append(grs)
        if isinstance(desc, IntervalGridIndexSet):
            for _ in range(desc.refinements):
                ts = _refine_once(desc, levels[-1], values[-1])
                vals, grs = _family_batch(fam, x, ts, True)
                levels.append(ts)
                values.append(vals)
                grads.append(grs)
        tails = _tail_ladder(fam, desc, x, True) if tail else []
        declared = None
        if isinstance(desc, CountableIndexSet) and desc.limit_ray is not None:
            v = np.asarray(desc.limit_ray, dtype=float)
            declared = v / np.linalg.norm(v)
        families.append(
            FamilyScan(
                name=fam.name,
                block=len(fixed_names) + pos,
                index_name=fam.index_name,
                descriptor=desc,
                levels=levels,
                values=values,
                grads=grads,
                tails=tails,
                complete=isinstance(desc, FiniteIndexSet),
                declared_ray=declared,
            )
        )
        n_levels = max(n_levels, len(levels))
    return ConstraintScan(
        x=x,
        fixed_names=fixed_names,
        fixed_values=fixed_values,
        fixed_grads=fixed_grads,
        families=families,
        n_levels=n_levels,
    )


# ---------------------------------------------------------------------------
# feasibility and active sets


@dataclass
class FeasibilityResult:
    max_violation: float
    eq_residual: float
    feasible: bool
    worst: IndexId | None


def feasibility_check(
    inst: SipInstance, x, tol: float = FEAS_TOL, *, tail: bool = True, scan: ConstraintScan | None = None
) -> FeasibilityResult:
    """Largest inequality value and equality residual at x.

    Tail ladders are included by default so suprema that are approached as the
    index runs off a truncated set still count against feasibility.
    """
    scan = scan or scan_constraints(inst, x, tail=tail)
    best, who = scan.max_value(tail=tail)
    if best == -math.inf:
        best, who = 0.0, None
    eq = float(np.max(np.abs(inst.eq_values(x)))) if len(inst.equalities) else 0.0
    return FeasibilityResult(
        max_violation=best,
        eq_residual=eq,
        feasible=(best <= tol and eq <= tol),
        worst=who,
    )


@dataclass
class IndexEntry:
    id: IndexId
    value: float
    grad: np.ndarray


@dataclass
class ActiveSetReport:
    point: np.ndarray
    eps: float
    act_tol: float
    active: list[IndexEntry]
    eps_active: list[IndexEntry]
    normalized_eps_active: list[IndexEntry]
    grad_norm_bound: float
    grad_norm_min: float


def _collect_entries(scan: ConstraintScan, predicate) -> list[IndexEntry]:
    out = []
    for i, name in enumerate(scan.fixed_names):
        v = float(scan.fixed_values[i])
        g = scan.fixed_grads[i]
        if predicate(v, g):
            out.append(IndexEntry(IndexId(i, 0.0, name, None), v, g))
    for fam in scan.families:
        t, vals, grads = fam.finest()
        for j in range(len(t)):
            if predicate(float(vals[j]), grads[j]):
                out.append(
                    IndexEntry(
                        IndexId(fam.block, float(t[j]), _index_label(fam.name, float(t[j])), fam.name),
                        float(vals[j]),
                        grads[j],
                    )
                )
    out.sort(key=lambda e: e.id)
    return out


def active_set(
    inst: SipInstance,
    x,
    eps: float = 0.0,
    *,
    act_tol: float = FEAS_TOL,
    scan: ConstraintScan | None = None,
) -> ActiveSetReport:
    """Exact active set (values within act_tol of zero), the eps-active set
    (values >= -eps), and the gradient-normalized eps-active set
    (values >= -eps * |grad|)."""
    if eps < 0:
        raise InstanceError("eps must be nonnegative")
    scan = scan or scan_constraints(inst, x)
    active = _collect_entries(scan, lambda v, g: v >= -act_tol)
    eps_active = _collect_entries(scan, lambda v, g: v >= -(eps + act_tol))
    normalized = _collect_entries(
        scan, lambda v, g: v >= -(eps * float(np.linalg.norm(g)) + act_tol)
    )
    norms = [float(np.linalg.norm(scan.fixed_grads[i])) for i in range(len(scan.fixed_names))]
    for fam in scan.families:
        _, _, grads = fam.finest()
        if len(grads):
            fam_norms = np.linalg.norm(grads, axis=1)
            norms.extend([float(np.max(fam_norms)), float(np.min(fam_norms))])
    bound = max(norms) if norms else 0.0
    lowest = min(norms) if norms else 0.0
    return ActiveSetReport(
        point=scan.x,
        eps=eps,
        act_tol=act_tol,
        active=active,
        eps_active=eps_active,
        normalized_eps_active=normalized,
        grad_norm_bound=bound,
        grad_norm_min=lowest,
    )


def gradient_bound_check(report: ActiveSetReport) -> tuple[float, bool, bool]:
    """(bound, finite flag, normalization trigger). The trigger fires when
    gradient norms spread by three orders of magnitude or more, which is when
    the gradient-normalized active set becomes the better representation."""
    bound = report.grad_norm_bound
    ok = math.isfinite(bound)
    spread = bound / max(report.grad_norm_min, 1e-300)
    return bound, ok, bool(ok and spread >= 1e3)


# ---------------------------------------------------------------------------
# uniform differentiability moduli


@dataclass
class UniformityModuli:
    etas: np.ndarray
    s_est: np.ndarray
    r_est: np.ndarray
    samples_per_eta: int
    index_samples: int


def _index_sample_pool(scan: ConstraintScan, per_family: int = 48):
    pool = []
    for i in range(len(scan.fixed_names)):
        pool.append(("fixed", i, None))
    for fam in scan.families:
        t, _, _ = fam.finest()
        if len(t) <= per_family:
            chosen = t
        else:
            take = np.unique(np.linspace(0, len(t) - 1, per_family).astype(int))
            chosen = t[take]
        for tv in chosen:
            pool.append(("family", fam, float(tv)))
        for tl in fam.tails:
            for tv in tl.t[-3:]:
                pool.append(("family", fam, float(tv)))
    return pool


def estimate_moduli(
    inst: SipInstance,
    x,
    etas: Sequence[float] = (0.2, 0.1, 0.05, 0.02, 0.01),
    samples_per_eta: int = 200,
    seed: int = 0,
) -> UniformityModuli:
    """Monte-Carlo lower estimates of the uniform linearization moduli.

    s(eta) takes quotients against the base point only; r(eta) additionally
    uses independent point pairs in the eta-ball and always dominates s.
    Estimates are running suprema, so both are nondecreasing in eta and in
    the sample count."""
    x = np.asarray(x, dtype=float)
    n = inst.dim
    rng = np.random.default_rng(seed)
    scan = scan_constraints(inst, x)
    pool = _index_sample_pool(scan)
    etas_sorted = np.array(sorted(etas))
    s_est = np.zeros(len(etas_sorted))
    r_est = np.zeros(len(etas_sorted))

    # precompute base values/gradients per pool entry
    base = []
    for entry in pool:
        kind, a, b = entry
        if kind == "fixed":
            base.append((inst.fixed[a][1], None, float(scan.fixed_values[a]), scan.fixed_grads[a]))
        else:
            fam_obj = next(f for f, _ in inst.families if f.name == a.name)
            v, g = ex.eval_grad(fam_obj.body, x, {fam_obj.index_name: b})
            base.append((fam_obj.body, (fam_obj.index_name, b), float(v), np.asarray(g)))

    s_run, r_run = 0.0, 0.0
    for k, eta in enumerate(etas_sorted):
        for body, binding, v0, g0 in base:
            u = rng.normal(size=(samples_per_eta, n))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            radii = eta * rng.uniform(0.05, 1.0, size=(samples_per_eta, 1)) ** (1.0 / n)
            pts = x + radii * u
            env = {binding[0]: binding[1]} if binding else None
            try:
                vals = np.asarray(ex.eval_value(body, pts, env), dtype=float)
            except ex.ExprError:
                continue
            diffs = pts - x
            norms = np.linalg.norm(diffs, axis=1)
            lin = diffs @ g0
            quot_s = np.abs(vals - v0 - lin) / norms
            s_run = max(s_run, float(np.max(quot_s)))
            # pairs for the two-point modulus, plus the base-point pairs
            half = samples_per_eta // 2
            pa, pb = pts[:half], pts[half : 2 * half]
            va, vb = vals[:half], vals[half : 2 * half]
            d2 = pa - pb
            n2 = np.linalg.norm(d2, axis=1)
            keep = n2 > 1e-12
            if np.any(keep):
                quot_r = np.abs(va[keep] - vb[keep] - d2[keep] @ g0) / n2[keep]
                r_run = max(r_run, float(np.max(quot_r)))
            r_run = max(r_run, s_run)
        s_est[k] = s_run
        r_est[k] = r_run
    return UniformityModuli(
        etas=etas_sorted,
        s_est=s_est,
        r_est=r_est,
        samples_per_eta=samples_per_eta,
        index_samples=len(pool),
    )


# ---------------------------------------------------------------------------
# instance file format


def _parse_bool(text: str, line: int) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise InstanceError(f"expected a boolean, got {text!r}", line)


def _parse_expr(text: str, line: int) -> ex.ExprAst:
    try:
        return ex.parse(text)
    except ex.ParseError as err:
        raise InstanceError(f"bad expression: {err}", line) from err


def loads_instance(text: str, origin: str = "<string>") -> SipInstance:
    """Parse the sectioned instance format. See the README for the grammar."""
    section = None
    index_sections: dict[str, dict] = {}
    problem: dict = {}
    constraints: list[tuple[str, str | None, str, int]] = []
    equalities: list[tuple[str, str, int]] = []
    eq_affine = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            head = line[1:-1].strip()
            if head == "problem":
                section = ("problem",)
            elif head.startswith("index"):
                name = head[len("index") :].strip()
                if not name.isidentifier():
                    raise InstanceError(f"bad index section name {name!r}", lineno)
                index_sections[name] = {"_line": lineno}
                section = ("index", name)
            elif head == "constraints":
                section = ("constraints",)
            elif head == "equalities":
                section = ("equalities",)
            else:
                raise InstanceError(f"unknown section [{head}]", lineno)
            continue
        if "=" not in line:
            raise InstanceError("expected 'key = value'", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if section is None:
            raise InstanceError("content before any section header", lineno)
        if section[0] == "problem":
            problem[key] = (value, lineno)
        elif section[0] == "index":
            index_sections[section[1]][key] = (value, lineno)
        elif section[0] == "constraints":
            m = _CONSTRAINT_NAME.match(key)
            if not m:
                raise InstanceError(f"bad constraint name {key!r}", lineno)
            constraints.append((m.group(1), m.group(2), value, lineno))
        else:
            if key == "affine":
                eq_affine = _parse_bool(value, lineno)
            else:
                equalities.append((key, value, lineno))

    if "vars" not in problem:
        raise InstanceError("[problem] section must declare 'vars'")
    var_names = problem["vars"][0].split()
    dim = len(var_names)
    for i, vn in enumerate(var_names, start=1):
        if vn != f"x{i}":
            raise InstanceError(
                f"variables must be named x1..x{ex.MAX_DIM} in order, got {vn!r}",
                problem["vars"][1],
            )

    if "minimize" in problem and "minimize_max" in problem:
        raise InstanceError("give either 'minimize' or 'minimize_max', not both")
    if "minimize" in problem:
        cost: SmoothCost | ConvexMaxCost = SmoothCost(
            _parse_expr(problem["minimize"][0], problem["minimize"][1])
        )
    elif "minimize_max" in problem:
        src, ln = problem["minimize_max"]
        pieces = tuple(_parse_expr(p.strip(), ln) for p in src.split(";") if p.strip())
        cost = ConvexMaxCost(pieces)
    else:
        raise InstanceError("[problem] section must declare a cost")

    convex = _parse_bool(*problem["convex"]) if "convex" in problem else False
    box = None
    if "box" in problem:
        src, ln = problem["box"]
        ranges = []
        for part in src.split(";"):
            nums = part.split()
            if len(nums) != 2:
                raise InstanceError("each box range needs two numbers", ln)
            lo, hi = float(nums[0]), float(nums[1])
            if not lo < hi:
                raise InstanceError("box range needs lower < upper", ln)
            ranges.append((lo, hi))
        box = tuple(ranges)

    def build_descriptor(name: str) -> IndexSetDescriptor:
        sec = index_sections[name]
        line = sec["_line"]

        def get(key, default=None):
            return sec.get(key, (default, line))[0]

        kind = get("kind")
        if kind is None:
            raise InstanceError(f"[index {name}] must declare 'kind'", line)
        try:
            if kind == "finite":
                vals = get("values")
                if vals is None:
                    raise InstanceError(f"[index {name}] needs 'values'", line)
                return FiniteIndexSet(tuple(float(v) for v in vals.split()))
            if kind == "countable":
                ray = get("limit_ray")
                return CountableIndexSet(
                    start=int(get("start", "0")),
                    truncation=int(get("truncation", str(DEFAULT_TRUNCATION))),
                    limit_ray=tuple(float(v) for v in ray.split()) if ray else None,
                )
            if kind == "interval":
                return IntervalGridIndexSet(
                    lower=float(get("a", "0")),
                    upper=float(get("b", "1")),
                    include_lower=_parse_bool(get("include_a", "true"), line),
                    include_upper=_parse_bool(get("include_b", "true"), line),
                    resolution=int(get("resolution", str(DEFAULT_RESOLUTION))),
                    refinements=int(get("refinements", str(DEFAULT_REFINEMENTS))),
                )
        except (ValueError, TypeError) as err:
            raise InstanceError(f"[index {name}]: {err}", line) from err
        raise InstanceError(f"[index {name}] has unknown kind {kind!r}", line)

    fixed: list[tuple[str, ex.ExprAst]] = []
    families: list[tuple[ConstraintFamily, IndexSetDescriptor]] = []
    for cname, idx_name, src, lineno in constraints:
        body = _parse_expr(src, lineno)
        if idx_name is None:
            extra = ex.free_index_names(body)
            if extra:
                raise InstanceError(
                    f"constraint '{cname}' uses index variable(s) {sorted(extra)} "
                    "but declares none",
                    lineno,
                )
            fixed.append((cname, body))
        else:
            if idx_name not in index_sections:
                raise InstanceError(
                    f"constraint '{cname}({idx_name})' references undeclared [index {idx_name}]",
                    lineno,
                )
            families.append(
                (ConstraintFamily(cname, idx_name, body), build_descriptor(idx_name))
            )

    eq_components = tuple(_parse_expr(src, ln) for _, src, ln in equalities)
    eq_names = tuple(name for name, _, _ in equalities)
    try:
        return SipInstance(
            dim=dim,
            cost=cost,
            fixed=tuple(fixed),
            families=tuple(families),
            equalities=EqualityBlock(components=eq_components, affine=eq_affine, names=eq_names),
            convex=convex,
            box=box,
        )
    except InstanceError:
        raise
    except ex.ExprError as err:
        raise InstanceError(str(err)) from err


def load_instance(path) -> SipInstance:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise InstanceError(f"cannot read {p}: {err}") from err
    return loads_instance(text, origin=str(p))
