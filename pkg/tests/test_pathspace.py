"""Partitions, path ensembles, H^1 curves, stochastic integrals, Girsanov."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pathcurv.geometry as geo
import pathcurv.montecarlo as mc
import pathcurv.pathspace as ps

FLAT1 = geo.EuclideanWeighted(1, 0.0)
OU = geo.EuclideanWeighted(1, 1.0)
SPHERE = geo.Sphere2(1.0, 32)


def test_partition_validation():
    with pytest.raises(ValueError):
        ps.Partition(())
    with pytest.raises(ValueError):
        ps.Partition((0.0, 1.0))
    with pytest.raises(ValueError):
        ps.Partition((1.0, 1.0))
    p = ps.Partition((0.5, 1.0))
    assert p.horizon == 1.0
    assert np.array_equal(p.grid(), [0.0, 0.5, 1.0])
    assert p.index_of(0.0) == 0 and p.index_of(1.0) == 2
    with pytest.raises(KeyError):
        p.index_of(0.25)


def test_uniform_and_refine():
    p = ps.Partition.uniform(1.0, 4)
    assert p.times == (0.25, 0.5, 0.75, 1.0)
    r = ps.refine_partition(p, [0.1, 0.5])
    assert r.times == (0.1, 0.25, 0.5, 0.75, 1.0)


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_refine_keeps_order_and_horizon(extra):
    base = ps.Partition((1.0, 2.0))
    r = ps.refine_partition(base, extra)
    ts = np.asarray(r.times)
    assert np.all(np.diff(ts) > 0)
    assert {1.0, 2.0} <= set(r.times)


def test_sample_paths_shapes_and_start():
    part = ps.Partition.uniform(1.0, 8)
    ens = ps.sample_paths(FLAT1, np.zeros(1), part, 300, 5, "test/shapes")
    assert ens.points.shape == (300, 9, 1)
    assert np.all(ens.points[:, 0, :] == 0.0)
    assert ens.frames is None
    assert ens.n_paths == 300


def test_sample_paths_worker_invariance():
    part = ps.Partition.uniform(1.0, 4)
    n = mc.BLOCK + 257
    a = ps.sample_paths(OU, np.zeros(1), part, n, 9, "test/workers", workers=1)
    b = ps.sample_paths(OU, np.zeros(1), part, n, 9, "test/workers", workers=6)
    assert np.array_equal(a.points, b.points)


def test_sample_paths_seed_and_tag_sensitivity():
    part = ps.Partition.uniform(1.0, 4)
    a = ps.sample_paths(FLAT1, np.zeros(1), part, 64, 1, "test/a")
    b = ps.sample_paths(FLAT1, np.zeros(1), part, 64, 2, "test/a")
    c = ps.sample_paths(FLAT1, np.zeros(1), part, 64, 1, "test/b")
    assert not np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_sphere_paths_have_frames_on_sphere():
    part = ps.Partition.uniform(0.5, 4)
    x = np.array([1.0, 0.0, 0.0])
    ens = ps.sample_paths(SPHERE, x, part, 50, 3, "test/sphere")
    assert np.allclose(np.linalg.norm(ens.points, axis=2), 1.0, atol=1e-9)
    assert ens.frames.shape == (50, 5, 3, 2)
    for k in range(5):
        frames = ens.frames[:, k]
        gram = np.einsum("bij,bik->bjk", frames, frames)
        assert np.allclose(gram, np.eye(2), atol=1e-9)
        # frame columns are tangent at the current point
        dots = np.einsum("bij,bi->bj", frames, ens.points[:, k])
        assert np.allclose(dots, 0.0, atol=1e-9)


def test_flat_brownian_map_recovers_increments():
    part = ps.Partition.uniform(1.0, 8)
    ens = ps.sample_paths(FLAT1, np.full(1, 0.7), part, 200, 4, "test/bm")
    W = ps.brownian_motion_map(ens)
    assert np.allclose(W[:, :, 0], ens.points[:, :, 0] - 0.7, atol=1e-12)


def test_drifted_map_is_martingale_on_ou():
    """Anti-development with the drift correction has mean 0, variance T."""
    part = ps.Partition.uniform(1.0, 64)
    ens = ps.sample_paths(OU, np.zeros(1), part, 50000, 6, "test/drift")
    W = ps.drifted_brownian_map(ens)
    WT = W[:, -1]
    se = WT.std(ddof=1) / math.sqrt(WT.size)
    assert abs(WT.mean()) < 4 * se
    # discretized drift quadrature leaves an O(dt) bias on the variance
    assert abs(WT.var() - 1.0) < 0.02


def test_sobolev_curve_basics():
    h = ps.linear_curve(2.0, [3.0])
    assert h.horizon == 2.0
    assert np.allclose(h.at(2.0), [6.0])
    assert np.allclose(h.at(1.0), [3.0])
    assert np.allclose(h.deriv(0.5), [3.0])
    assert h.norm_sq() == pytest.approx(2.0 * 3.0 ** 2)
    assert np.allclose(h.at(5.0), h.values[-1])
    assert np.allclose(h.deriv(5.0), 0.0)


def test_sobolev_curve_validation():
    with pytest.raises(ValueError):
        ps.SobolevCurve((0.5, 1.0), np.array([[0.0], [1.0]]))
    with pytest.raises(ValueError):
        ps.SobolevCurve((0.0, 1.0), np.array([[0.5], [1.0]]))


def test_basis_curves_are_nontrivial():
    curves = ps.basis_curves(2, 1.0, count=8)
    assert len(curves) == 8
    for h in curves:
        assert h.horizon == 1.0
        assert h.norm_sq() > 0


def test_ito_sum_telescopes_for_constant_integrand():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 6, 1)).cumsum(axis=1)
    Y = np.ones((40, 6, 1))
    got = ps.ito_sum(Y, X)
    assert np.allclose(got, (X[:, -1] - X[:, 0]).sum(axis=-1), atol=1e-12)


def test_stratonovich_ito_boundary_correction():
    """For piecewise-constant h' the conventions differ only where h' jumps.

    A linear ramp has a single jump of h' at the horizon, so the midpoint sum
    drops exactly half the final increment.
    """
    part = ps.Partition.uniform(1.0, 32)
    ens = ps.sample_paths(FLAT1, np.zeros(1), part, 100, 7, "test/strat")
    h = ps.linear_curve(1.0, [1.0])
    a = ps.ito_integral(ens, h, drifted=False)
    b = ps.stratonovich_integral(ens, h, drifted=False)
    W = ps.brownian_motion_map(ens)[:, :, 0]
    last = W[:, -1] - W[:, -2]
    assert np.allclose(a - b, 0.5 * last, atol=1e-12)


def test_flat_ito_integral_is_exact():
    """For h(t) = t v the integral telescopes to v . W_T pathwise."""
    part = ps.Partition.uniform(1.0, 16)
    ens = ps.sample_paths(FLAT1, np.zeros(1), part, 100, 8, "test/exact")
    h = ps.linear_curve(1.0, [2.0])
    vals = ps.ito_integral(ens, h)
    assert np.allclose(vals, 2.0 * ens.points[:, -1, 0], atol=1e-12)


def test_ito_isometry_flat():
    part = ps.Partition.uniform(1.0, 32)
    ens = ps.sample_paths(FLAT1, np.zeros(1), part, 40000, 9, "test/isom")
    h = ps.SobolevCurve((0.0, 0.25, 1.0), np.array([[0.0], [1.0], [0.5]]))
    vals = ps.ito_integral(ens, h)
    est = mc.accumulate(vals ** 2)
    assert abs(est.mean - h.norm_sq()) < 4 * est.se


def test_radon_nikodym_normalization_and_importance():
    """Reweighted free paths must reproduce the weighted kernel's moments."""
    kf, T = 1.0, 1.0
    free = FLAT1
    part = ps.Partition.uniform(T, 128)
    ens = ps.sample_paths(free, np.zeros(1), part, 60000, 10, "test/girsanov")
    Z = ps.radon_nikodym(OU, ens)
    zbar = mc.accumulate(Z)
    assert abs(zbar.mean - 1.0) < 4 * zbar.se

    # E_weighted[x_T^2] from x0 = 0 equals the Mehler variance
    want = (1 - math.exp(-kf * T)) / kf
    assert want == pytest.approx(0.6321205588285577, abs=1e-15)
    vals = Z * ens.points[:, -1, 0] ** 2
    est = mc.accumulate(vals)
    # the Euler-discretized density carries a small O(dt) bias
    assert abs(est.mean - want) < 4 * est.se + 2e-3


def test_radon_nikodym_from_offset_start():
    kf, T, x0 = 1.0, 1.0, 2.0
    part = ps.Partition.uniform(T, 128)
    ens = ps.sample_paths(FLAT1, np.full(1, x0), part, 60000, 11, "test/gir2")
    Z = ps.radon_nikodym(OU, ens)
    want = math.exp(-kf * T) * x0 ** 2 + (1 - math.exp(-kf * T)) / kf
    assert want == pytest.approx(2.103638323514327, abs=1e-12)
    est = mc.accumulate(Z * ens.points[:, -1, 0] ** 2)
    assert abs(est.mean - want) < 4 * est.se + 4e-3
