"""Finitely generated convex cones with lineality and limit rays.

A truncated infinite family approaches limit directions it never attains.
Those directions enter here as *limit rays*: extrapolated from normalized
tail gradients, or declared in the instance. Membership, separation, and the
closedness diagnostic all work on the finite surrogate cone(generators
[+ rays]) + span(lineality), so every verdict is backed by a certificate a
test can re-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import linsolve
from .linsolve import ConeRefutation, FeasibilityCertificate
from .model import ConstraintScan, SipInstance, scan_constraints


@dataclass(frozen=True)
class Ray:
    direction: np.ndarray
    provenance: str  # "declared" or "extrapolated"
    attained: bool
    label: str = "ray"
    value_limit: float | None = None


class Closedness(Enum):
    CLOSED = "closed"
    NOT_CLOSED = "not_closed"
    UNKNOWN = "unknown"


@dataclass
class ClosednessVerdict:
    status: Closedness
    reason: str
    witness_ray: Ray | None = None
    witness_separator: np.ndarray | None = None


@dataclass
class GeneratedCone:
    dim: int
    labels: list[str]
    generators: np.ndarray  # (dim, m), columns are generators
    lineality: np.ndarray  # (dim, k), columns span the subspace part
    limit_rays: list[Ray] = field(default_factory=list)
    closedness: ClosednessVerdict | None = None

    def __post_init__(self):
        self.generators = np.asarray(self.generators, dtype=float).reshape(self.dim, -1)
        self.lineality = np.asarray(self.lineality, dtype=float).reshape(self.dim, -1)
        if len(self.labels) != self.generators.shape[1]:
            raise ValueError("one label per generator column")

    def columns(self, use_limit_rays: bool):
        G = self.generators
        labels = list(self.labels)
        if use_limit_rays and self.limit_rays:
            R = np.column_stack([r.direction for r in self.limit_rays])
            G = np.hstack([G, R]) if G.size else R
            labels += [r.label for r in self.limit_rays]
        return G, labels


def membership(
    cone: GeneratedCone, v, tol: float = 1e-9, use_limit_rays: bool = True
):
    """Certificate or separating functional for v against the cone."""
    v = np.asarray(v, dtype=float)
    if v.shape != (cone.dim,):
        raise ValueError(f"probe vector must have dimension {cone.dim}")
    G, labels = cone.columns(use_limit_rays)
    out = linsolve.cone_feasibility(G, cone.lineality, v, tol)
    if isinstance(out, FeasibilityCertificate):
        out.labels = labels  # type: ignore[attr-defined]
    return out


def caratheodory_reduce(
    cert: FeasibilityCertificate, cone: GeneratedCone, v, use_limit_rays: bool | None = None
) -> FeasibilityCertificate:
    """Shrink a conic certificate to at most dim + 1 supporting generators by
    eliminating null vectors of the supported columns. Never increases the
    reconstruction residual beyond roundoff."""
    v = np.asarray(v, dtype=float)
    if use_limit_rays is None:
        use_limit_rays = len(cert.lam) == cone.generators.shape[1] + len(cone.limit_rays)
    G, labels = cone.columns(use_limit_rays)
    lam, y = reduce_support(G, cone.lineality, cert.lam.copy(), cert.y.copy())
    H = cone.lineality
    recon = (G @ lam if G.size else 0.0) + (H @ y if H.size else 0.0)
    residual = float(np.max(np.abs(recon - v))) if cone.dim else 0.0
    out = FeasibilityCertificate(lam=lam, y=y, residual=residual)
    out.labels = labels  # type: ignore[attr-defined]
    return out


def reduce_support(G, H, lam, y):
    """Null-vector elimination on the support of lam."""
    G = np.asarray(G, dtype=float)
    H = np.asarray(H, dtype=float)
    d = G.shape[0]
    lam = np.asarray(lam, dtype=float).copy()
    y = np.asarray(y, dtype=float).copy()
    scale = float(np.max(lam)) if lam.size else 0.0
    while True:
        support = np.flatnonzero(lam > max(1e-14 * max(scale, 1.0), 0.0))
        if len(support) + H.shape[1] <= d:
            break
        M = np.hstack([G[:, support], H]) if H.size else G[:, support]
        _, kernel = linsolve.rank_nullspace(M, 1e-12)
        direction = None
        for k in kernel:
            if np.max(np.abs(k[: len(support)])) > 1e-9:
                direction = k
                break
        if direction is None:
            break
        alpha = direction[: len(support)]
        beta = direction[len(support) :]
        if np.max(alpha) <= 0:
            alpha, beta = -alpha, -beta
        pos = alpha > 1e-15
        theta = np.min(lam[support][pos] / alpha[pos])
        lam[support] = lam[support] - theta * alpha
        if beta.size:
            y = y - theta * beta
        lam[support] = np.maximum(lam[support], 0.0)
        zeroed = np.argmin(np.abs(lam[support]))
        lam[support[zeroed]] = 0.0
    lam[lam < 0] = 0.0
    return lam, y


def accumulation_rays(
    samples,
    hints=None,
    *,
    theta_tol: float = 1e-3,
    k_tail: int = 16,
    residual_tol: float = 1e-6,
    attained_dirs=None,
    attain_tol: float = 1e-9,
):
    """Limit directions of an indexed gradient sequence.

    ``samples`` is a sequence of (parameter, vector) pairs with parameter
    decreasing to 0 along the tail. Declared hints pass through. Otherwise
    the normalized tail is Richardson-extrapolated pairwise and the estimates
    clustered at angular tolerance ``theta_tol``; only clusters whose tail
    estimates agree to ``residual_tol`` survive. Returns (rays, ok); an
    inconclusive extrapolation gives ([], False).

    The attained flag compares against ``attained_dirs`` (the directions the
    materialized generator set actually realizes) when given; tail samples
    approach the limit by construction, so they are a poor attainment
    reference and are used only as a fallback.
    """
    rays: list[Ray] = []
    pairs = sorted(((float(s), np.asarray(w, dtype=float)) for s, w in samples),
                   key=lambda p: -p[0])
    units = []
    for s, w in pairs:
        u = _unit(w)
        if u is not None:
            units.append((s, u))
    if attained_dirs is not None:
        ref_dirs = [u for u in (_unit(np.asarray(d, dtype=float)) for d in attained_dirs)
                    if u is not None]
    else:
        ref_dirs = [u for _, u in units]

    def is_attained(direction):
        return any(_angle(direction, u) <= attain_tol for u in ref_dirs)

    if hints:
        for h in hints:
            hv = _unit(np.asarray(h, dtype=float))
            if hv is None:
                continue
            rays.append(Ray(hv, "declared", is_attained(hv), label="declared-ray"))
        return rays, True
    tail = units[-k_tail:]
    if len(tail) < 2:
        return [], False
    estimates = []
    for (s1, u1), (s2, u2) in zip(tail, tail[1:]):
        if s1 <= s2:
            continue
        est = (s1 * u2 - s2 * u1) / (s1 - s2)
        est = _unit(est)
        if est is not None:
            estimates.append(est)
    if not estimates:
        return [], False
    clusters: list[list[np.ndarray]] = []
    for est in estimates:
        for cl in clusters:
            if _angle(est, cl[0]) <= theta_tol:
                cl.append(est)
                break
        else:
            clusters.append([est])
    for ci, cl in enumerate(clusters):
        rep = _unit(np.mean(cl[-3:], axis=0))
        if rep is None:
            continue
        if len(cl) >= 2:
            # the tail estimates of a convergent cluster must agree
            resid = max(_angle(a, b) for a, b in zip(cl[-3:], cl[-2:]))
        else:
            # an uncorroborated single estimate only counts if the raw tail
            # already sits on it
            resid = _angle(cl[0], units[-1][1])
        if resid > residual_tol:
            continue
        rays.append(Ray(rep, "extrapolated", is_attained(rep), label=f"limit-ray-{ci}"))
    if not rays:
        return [], False
    return rays, True


def _unit(v: np.ndarray) -> np.ndarray | None:
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0 or not math.isfinite(peak):
        return None
    w = v / peak
    return w / np.linalg.norm(w)


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    c = float(np.clip(u @ v, -1.0, 1.0))
    return math.acos(c)


def augmented_generators(inst: SipInstance, x, scan: ConstraintScan | None = None):
    """Value-augmented coefficient vectors (grad, <grad, x> - g(x)) over the
    base materialization, plus tail samples of the same lift for ray work.

    Returns (labels, columns (d+1, m), tail_samples) where tail_samples maps
    family name to a list of (parameter, augmented vector, value) tuples.
    """
    x = np.asarray(x, dtype=float)
    scan = scan or scan_constraints(inst, x)
    labels: list[str] = []
    cols: list[np.ndarray] = []
    for i, name in enumerate(scan.fixed_names):
        g = scan.fixed_grads[i]
        labels.append(name)
        cols.append(np.concatenate([g, [g @ x - scan.fixed_values[i]]]))
    for fam in scan.families:
        t, vals, grads = fam.levels[0], fam.values[0], fam.grads[0]
        lift = np.hstack([grads, (grads @ x - vals)[:, None]])
        for j in range(len(t)):
            labels.append(f"{fam.name}({t[j]:.12g})")
            cols.append(lift[j])
    tail_samples: dict[str, list[tuple[float, np.ndarray]]] = {}
    for fam in scan.families:
        entries = []
        for tl in fam.tails:
            lift = np.hstack([tl.grads, (tl.grads @ x - tl.values)[:, None]])
            entries.extend((float(s), lift[j]) for j, s in enumerate(tl.params))
        if entries:
            tail_samples[fam.name] = sorted(entries, key=lambda p: -p[0])
    matrix = np.column_stack(cols) if cols else np.zeros((inst.dim + 1, 0))
    return labels, matrix, tail_samples


NORM_RATIO_CAP = 1e3
NORM_FLOOR = 1e-6


def closedness_diagnostic(
    labels,
    generators,
    rays: list[Ray],
    *,
    complete: bool,
    extrapolation_ok: bool = True,
    tol: float = 1e-9,
) -> ClosednessVerdict:
    """Three-way closedness verdict for cone(generators).

    Closed: the generator set is complete, or the raw norms sit in a bounded
    band and the origin is separated from the convex hull of the normalized
    generators and rays. NotClosed: some unattained limit ray is not a conic
    combination of the generators, witnessed by a separating functional.
    Unknown otherwise.
    """
    G = np.asarray(generators, dtype=float)
    if G.size == 0:
        return ClosednessVerdict(Closedness.CLOSED, "no generators; trivial cone")
    if complete:
        return ClosednessVerdict(Closedness.CLOSED, "complete finite generator set; polyhedral cone")
    for ray in rays:
        # an attained ray passes this membership test trivially, so no gate
        out = linsolve.cone_feasibility(G, None, ray.direction, tol)
        if isinstance(out, ConeRefutation):
            a = out.separator
            if a @ ray.direction > tol and np.all(G.T @ a <= tol):
                return ClosednessVerdict(
                    Closedness.NOT_CLOSED,
                    "unattained limit direction is separated from the generated cone",
                    witness_ray=ray,
                    witness_separator=a,
                )
            return ClosednessVerdict(
                Closedness.UNKNOWN, "separator failed verification", witness_ray=ray
            )
    if not extrapolation_ok:
        return ClosednessVerdict(
            Closedness.UNKNOWN, "tail extrapolation inconclusive; compactness not certifiable"
        )
    norms = np.linalg.norm(G, axis=0)
    if np.min(norms) < NORM_FLOOR or np.max(norms) / max(np.min(norms), 1e-300) > NORM_RATIO_CAP:
        return ClosednessVerdict(
            Closedness.UNKNOWN,
            "generator norms spread outside the compactness band",
        )
    U = G / norms
    if rays:
        U = np.hstack([U, np.column_stack([r.direction for r in rays])])
    res = linsolve.max_margin_direction(U, None)
    hull_gap = min(res.margin, 1.0) if math.isfinite(res.margin) else 1.0
    if hull_gap > max(tol, 1e-7):
        return ClosednessVerdict(
            Closedness.CLOSED,
            f"normalized generators are compact with origin-hull gap {hull_gap:.3e}",
        )
    return ClosednessVerdict(
        Closedness.UNKNOWN, "origin sits in (or near) the hull of normalized generators"
    )
