import itertools
import math

import numpy as np
import pytest

from sipcert.cones import (
    Closedness,
    GeneratedCone,
    Ray,
    accumulation_rays,
    augmented_generators,
    caratheodory_reduce,
    closedness_diagnostic,
    membership,
)
from sipcert.linsolve import ConeRefutation, FeasibilityCertificate

from test_model import countable_cubic, interval_ramp


def quadrant_like_cone(n_tail=50, with_ray=True):
    gens = [np.array([1.0, 0.0])] + [np.array([1.0 / n, -1.0]) for n in range(2, n_tail)]
    labels = ["g1"] + [f"g({n})" for n in range(2, n_tail)]
    rays = [Ray(np.array([0.0, -1.0]), "extrapolated", False, "limit-ray")] if with_ray else []
    return GeneratedCone(
        dim=2,
        labels=labels,
        generators=np.column_stack(gens),
        lineality=np.zeros((2, 0)),
        limit_rays=rays,
    )


class TestMembership:
    def test_two_generator_combination(self):
        cone = GeneratedCone(
            dim=2,
            labels=["a", "b"],
            generators=np.array([[1.0, 0.5], [0.0, -1.0]]),
            lineality=np.zeros((2, 0)),
        )
        out = membership(cone, [1.0, -1.0])
        assert isinstance(out, FeasibilityCertificate)
        np.testing.assert_allclose(out.lam, [0.5, 1.0], atol=1e-9)

    def test_zero_vector_member(self):
        cone = quadrant_like_cone()
        out = membership(cone, [0.0, 0.0])
        assert isinstance(out, FeasibilityCertificate)
        assert np.max(out.lam) <= 1e-12

    def test_limit_ray_closes_the_gap(self):
        cone = quadrant_like_cone(n_tail=100, with_ray=True)
        with_ray = membership(cone, [0.0, -1.0], tol=1e-9, use_limit_rays=True)
        without = membership(cone, [0.0, -1.0], tol=1e-9, use_limit_rays=False)
        assert isinstance(with_ray, FeasibilityCertificate)
        assert isinstance(without, ConeRefutation)
        # the refutation margin shrinks like the truncation level
        assert 0 < without.value <= 2.0 / 98

    def test_membership_and_separation_exclusive(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            d = int(rng.integers(2, 4))
            m = int(rng.integers(1, 5))
            cone = GeneratedCone(
                dim=d,
                labels=[f"c{i}" for i in range(m)],
                generators=rng.normal(size=(d, m)),
                lineality=np.zeros((d, 0)),
            )
            v = rng.normal(size=d)
            out = membership(cone, v)
            if isinstance(out, FeasibilityCertificate):
                G, _ = cone.columns(False)
                assert np.max(np.abs(G @ out.lam - v)) <= 1e-8
                assert np.all(out.lam >= -1e-12)
            else:
                assert out.separator @ v > 1e-9
                G, _ = cone.columns(False)
                assert np.all(G.T @ out.separator <= 1e-9)


class TestCaratheodory:
    def test_small_support_fixed_point(self):
        cone = GeneratedCone(
            dim=2,
            labels=["a", "b"],
            generators=np.array([[1.0, 0.0], [0.0, 1.0]]),
            lineality=np.zeros((2, 0)),
        )
        cert = membership(cone, [1.0, 1.0])
        red = caratheodory_reduce(cert, cone, [1.0, 1.0])
        np.testing.assert_allclose(red.lam, cert.lam, atol=1e-12)

    def test_dense_combination_reduces(self):
        G = np.array([[1.0, 2.0, 1.0, 1.0], [0.0, 0.0, 1.0, -1.0]])
        cone = GeneratedCone(dim=2, labels=list("abcd"), generators=G, lineality=np.zeros((2, 0)))
        lam = np.array([0.5, 0.5, 0.5, 0.5])
        v = G @ lam
        cert = FeasibilityCertificate(lam=lam, y=np.zeros(0), residual=0.0)
        red = caratheodory_reduce(cert, cone, v, use_limit_rays=False)
        support = np.flatnonzero(red.lam > 1e-12)
        assert len(support) <= 3
        assert red.residual <= 1e-9
        # brute-force: some support of size <= 3 reproduces v
        found = False
        for size in (1, 2, 3):
            for idx in itertools.combinations(range(4), size):
                sub = G[:, idx]
                sol, res, *_ = np.linalg.lstsq(sub, v, rcond=None)
                if np.all(sol >= -1e-9) and np.max(np.abs(sub @ sol - v)) < 1e-9:
                    found = True
        assert found

    def test_zero_vector_empty_support(self):
        cone = quadrant_like_cone(n_tail=10)
        cert = membership(cone, [0.0, 0.0])
        red = caratheodory_reduce(cert, cone, [0.0, 0.0])
        assert np.max(red.lam) <= 1e-12

    def test_never_increases_residual_random(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            d = int(rng.integers(2, 5))
            m = int(rng.integers(d + 2, d + 7))
            G = rng.normal(size=(d, m))
            lam = rng.uniform(0.1, 1.0, size=m)
            v = G @ lam
            cone = GeneratedCone(
                dim=d, labels=[str(i) for i in range(m)], generators=G, lineality=np.zeros((d, 0))
            )
            cert = FeasibilityCertificate(lam=lam, y=np.zeros(0), residual=0.0)
            red = caratheodory_reduce(cert, cone, v, use_limit_rays=False)
            assert np.sum(red.lam > 1e-10) <= d + 1
            assert red.residual <= 1e-8
            assert np.all(red.lam >= 0)


class TestAccumulationRays:
    def test_reciprocal_tail(self):
        samples = [(1.0 / n, np.array([1.0 / n, -1.0])) for n in range(2, 200)]
        rays, ok = accumulation_rays(samples)
        assert ok and len(rays) == 1
        np.testing.assert_allclose(rays[0].direction, [0.0, -1.0], atol=1e-6)
        assert not rays[0].attained
        assert rays[0].provenance == "extrapolated"

    def test_constant_sequence_attained(self):
        samples = [(1.0 / n, np.array([1.0, 0.0])) for n in range(2, 40)]
        rays, ok = accumulation_rays(samples)
        assert ok and len(rays) == 1
        np.testing.assert_allclose(rays[0].direction, [1.0, 0.0], atol=1e-9)
        assert rays[0].attained

    def test_scaling_family_attained_direction(self):
        ts = np.linspace(1e-3, 1.0, 60)
        samples = [(t, np.array([t, 0.0])) for t in ts]
        rays, ok = accumulation_rays(samples)
        assert ok and len(rays) == 1
        np.testing.assert_allclose(rays[0].direction, [1.0, 0.0], atol=1e-9)
        assert rays[0].attained

    def test_declared_hint_passes_through(self):
        samples = [(1.0 / n, np.array([1.0 / n, -1.0])) for n in range(2, 10)]
        rays, ok = accumulation_rays(samples, hints=[np.array([0.0, -2.0])])
        assert ok and len(rays) == 1
        np.testing.assert_allclose(rays[0].direction, [0.0, -1.0])
        assert rays[0].provenance == "declared"

    def test_oscillating_tail_inconclusive(self):
        samples = [
            (1.0 / n, np.array([math.cos(n * 2.0), math.sin(n * 2.0)])) for n in range(2, 60)
        ]
        rays, ok = accumulation_rays(samples)
        assert rays == [] and not ok

    def test_too_few_samples(self):
        rays, ok = accumulation_rays([(0.5, np.array([1.0, 0.0]))])
        assert rays == [] and not ok


class TestAugmentedGenerators:
    def test_interval_ramp_lift(self):
        inst = interval_ramp(resolution=9, refinements=0)
        labels, cols, tails = augmented_generators(inst, [-1.0, 0.0])
        assert cols.shape[0] == 3
        np.testing.assert_allclose(cols[:, 0], [1.0, 0.0, -1.0], atol=1e-12)
        # family columns are (t, 0, 0)
        for j in range(1, cols.shape[1]):
            t = cols[0, j]
            np.testing.assert_allclose(cols[:, j], [t, 0.0, 0.0], atol=1e-12)
        assert "g" in tails

    def test_countable_cubic_lift(self):
        inst = countable_cubic(truncation=10)
        labels, cols, _ = augmented_generators(inst, [-1.0, 0.0])
        np.testing.assert_allclose(cols[:, 0], [1.0, 0.0, -1.0], atol=1e-12)
        for j, n in enumerate(range(2, 11), start=1):
            np.testing.assert_allclose(
                cols[:, j], [1.0 / n, -1.0, -2.0 / (3.0 * n)], atol=1e-12
            )

    def test_parabola_band_lift(self):
        from sipcert.model import load_instance
        from pathlib import Path

        inst = load_instance(
            Path(__file__).resolve().parent.parent / "instances" / "parabola_band.sip"
        )
        labels, cols, _ = augmented_generators(inst, [0.0, 0.0])
        for j in range(cols.shape[1]):
            np.testing.assert_allclose(cols[:, j], [0.0, -1.0, 0.0], atol=1e-12)


class TestClosedness:
    def _aug_cone(self, inst, x):
        from sipcert.model import scan_constraints

        scan = scan_constraints(inst, np.asarray(x, dtype=float))
        labels, cols, tails = augmented_generators(inst, x, scan)
        all_rays = []
        ok_all = True
        for fam_name, samples in tails.items():
            rays, ok = accumulation_rays(samples, attained_dirs=cols.T)
            all_rays.extend(rays)
            ok_all = ok_all and ok
        complete = all(f.complete for f in scan.families)
        return labels, cols, all_rays, complete, ok_all

    def test_interval_ramp_closed(self):
        inst = interval_ramp()
        labels, cols, rays, complete, ok = self._aug_cone(inst, [-1.0, 0.0])
        verdict = closedness_diagnostic(
            labels, cols, rays, complete=complete, extrapolation_ok=ok
        )
        assert verdict.status == Closedness.CLOSED

    def test_countable_cubic_not_closed(self):
        inst = countable_cubic()
        labels, cols, rays, complete, ok = self._aug_cone(inst, [-1.0, 0.0])
        verdict = closedness_diagnostic(
            labels, cols, rays, complete=complete, extrapolation_ok=ok
        )
        assert verdict.status == Closedness.NOT_CLOSED
        a = verdict.witness_separator
        ray = verdict.witness_ray.direction
        # witness re-verifies: strictly positive on the ray, nonpositive on generators
        assert a @ ray > 1e-9
        assert np.all(cols.T @ a <= 1e-9)

    def test_parabola_band_closed(self):
        from sipcert.model import load_instance
        from pathlib import Path

        inst = load_instance(
            Path(__file__).resolve().parent.parent / "instances" / "parabola_band.sip"
        )
        labels, cols, rays, complete, ok = self._aug_cone(inst, [0.0, 0.0])
        verdict = closedness_diagnostic(
            labels, cols, rays, complete=complete, extrapolation_ok=ok
        )
        assert verdict.status == Closedness.CLOSED

    def test_finite_sets_always_closed(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            d = int(rng.integers(2, 5))
            m = int(rng.integers(1, 7))
            verdict = closedness_diagnostic(
                [str(i) for i in range(m)],
                rng.normal(size=(d, m)),
                [],
                complete=True,
            )
            assert verdict.status == Closedness.CLOSED

    def test_monotone_information(self):
        # adding an extrapolated ray can refine Unknown but never flips a
        # definite verdict on the worked instances
        inst = countable_cubic()
        labels, cols, rays, complete, ok = self._aug_cone(inst, [-1.0, 0.0])
        without = closedness_diagnostic(labels, cols, [], complete=False, extrapolation_ok=False)
        with_rays = closedness_diagnostic(labels, cols, rays, complete=False, extrapolation_ok=ok)
        assert without.status == Closedness.UNKNOWN
        assert with_rays.status == Closedness.NOT_CLOSED

    def test_inconclusive_extrapolation_gives_unknown(self):
        verdict = closedness_diagnostic(
            ["a", "b"],
            np.array([[1.0, 0.9], [0.1, 0.2]]),
            [],
            complete=False,
            extrapolation_ok=False,
        )
        assert verdict.status == Closedness.UNKNOWN
