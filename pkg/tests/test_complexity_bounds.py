"""Bound calculators, random projection, and the k-planes lifting identity."""
import math

import numpy as np
import pytest

from manifold_test.complexity_bounds import (
    BoundParams,
    FatProfile,
    chaining_bound,
    covering_bound,
    empirical_rademacher,
    fat_bound_maxmin,
    jl_project,
    lift_identity_check,
    lift_plane,
    lift_point,
    rademacher_exact,
    sample_complexity,
    sauer_shelah,
)
from manifold_test.core_geometry import AffineSubspace, PointCloud, dist_to_affine
from manifold_test.errors import InvalidParameterError, PlaneOutsideBallError


def random_planes(rng, n: int, d: int, count: int):
    planes = []
    for _ in range(count):
        basis = np.linalg.qr(rng.standard_normal((n, max(d, 1))))[0][:, :d].T
        base = rng.standard_normal(n)
        base *= rng.uniform(0.0, 0.9) / np.linalg.norm(base)
        planes.append(AffineSubspace(base=base, basis=basis))
    return planes


# ---- covering and sample-size bounds ----

def test_covering_bound_matches_formula():
    for d in (1, 2, 3):
        for V in (1.0, 7.0):
            for tau in (0.3, 0.5):
                for r in (1e-4, 0.01, 0.2):
                    params = BoundParams(d=d, V=V, tau=tau, eps=0.01,
                                         delta=0.1, C=2.0)
                    expect = 2.0 * V * (tau ** -d + (tau * r) ** (-d / 2))
                    assert covering_bound(params, r) == pytest.approx(expect, rel=1e-12)


def test_covering_bound_rejects_nonpositive_scale():
    params = BoundParams(d=1, V=1.0, tau=0.5, eps=0.1, delta=0.1)
    with pytest.raises(InvalidParameterError):
        covering_bound(params, 0.0)


def test_bound_params_validation():
    good = dict(d=1, V=1.0, tau=0.5, eps=0.1, delta=0.1)
    BoundParams(**good)
    for bad in (dict(d=0), dict(V=0.0), dict(tau=1.0), dict(eps=0.0),
                dict(delta=1.0), dict(C=0.0)):
        with pytest.raises(InvalidParameterError):
            BoundParams(**{**good, **bad})


def test_sample_complexity_matches_formula():
    params = BoundParams(d=1, V=7.0, tau=0.3, eps=1e-4, delta=0.1, C=1.0)
    u = covering_bound(params, params.eps)
    expect = u / params.eps ** 2 * math.log(u / params.eps) ** 4 \
        + params.eps ** -2 * math.log(1.0 / params.delta)
    assert sample_complexity(params) == pytest.approx(expect, rel=1e-12)


def test_sample_complexity_clamps_the_log():
    # a tiny volume budget drives the covering bound below eps; the quartic
    # log term must vanish instead of going negative
    params = BoundParams(d=1, V=1e-12, tau=0.5, eps=0.5, delta=0.5, C=1.0)
    expect = params.eps ** -2 * math.log(2.0)
    assert sample_complexity(params) == pytest.approx(expect, rel=1e-12)


def test_fat_bound_matches_formula():
    k, l, gamma, C = 3, 4, 0.2, 1.5
    x = C * k * l / gamma ** 2
    assert fat_bound_maxmin(k, l, gamma, C) == pytest.approx(
        x * math.log(x) ** 2, rel=1e-12)


def test_fat_bound_zero_beyond_range():
    assert fat_bound_maxmin(5, 5, 2.5) == 0.0


def test_fat_bound_log_clamped_at_e():
    # k = l = C = gamma = 1 gives x = 1 < e, so the squared log clamps to 1
    assert fat_bound_maxmin(1, 1, 1.0, 1.0) == pytest.approx(1.0)


def test_fat_bound_monotonicity():
    gammas = np.linspace(0.05, 1.9, 12)
    vals = [fat_bound_maxmin(4, 4, float(g)) for g in gammas]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    ks = range(1, 8)
    vals_k = [fat_bound_maxmin(k, 3, 0.25) for k in ks]
    assert all(a <= b for a, b in zip(vals_k, vals_k[1:]))


def test_fat_bound_validation():
    with pytest.raises(InvalidParameterError):
        fat_bound_maxmin(0, 1, 0.5)
    with pytest.raises(InvalidParameterError):
        fat_bound_maxmin(1, 1, 0.0)


def test_chaining_bound_of_zero_profile_is_eps():
    profile = FatProfile(evaluator=lambda g: 0.0, support_ceiling=0.0)
    assert chaining_bound(profile, eps=0.3, s=100.0) == 0.3
    low = FatProfile(evaluator=lambda g: 5.0, support_ceiling=0.05)
    assert chaining_bound(low, eps=0.3, s=100.0) == 0.3


def test_chaining_bound_closed_form_profile():
    # profile(eta) = A / eta integrates in closed form:
    # eps + 24 sqrt(A / (c s)) (sqrt(H) - sqrt(eps / 4))
    A, c, s, eps, H = 2.0, 1.5, 100.0, 0.2, 1.0
    profile = FatProfile(evaluator=lambda g: A / g, support_ceiling=H)
    expect = eps + 24.0 * math.sqrt(A / (c * s)) * (math.sqrt(H) - math.sqrt(eps / 4.0))
    assert chaining_bound(profile, eps=eps, s=s, c=c) == pytest.approx(expect, rel=1e-6)


def test_chaining_bound_validation():
    profile = FatProfile(evaluator=lambda g: 1.0, support_ceiling=1.0)
    with pytest.raises(InvalidParameterError):
        chaining_bound(profile, eps=0.0, s=10.0)
    with pytest.raises(InvalidParameterError):
        chaining_bound(profile, eps=0.1, s=0.0)


# ---- Rademacher averages ----

def test_rademacher_exact_sign_pair():
    # the class {f, -f} with f = (1, 1): E max = E|s1 + s2| / 2 = 1/2
    values = np.array([[1.0, 1.0], [-1.0, -1.0]])
    assert rademacher_exact(values) == pytest.approx(0.5)


def test_rademacher_exact_single_function_is_zero():
    assert rademacher_exact(np.array([[0.7, -0.3, 0.2]])) == pytest.approx(0.0)


def test_empirical_rademacher_tracks_exact():
    rng = np.random.default_rng(1)
    values = rng.uniform(-1.0, 1.0, (3, 6))
    exact = rademacher_exact(values)
    emp = empirical_rademacher(values, trials=40000, seed=2)
    assert abs(emp - exact) <= 0.02


def test_rademacher_validation():
    with pytest.raises(InvalidParameterError):
        rademacher_exact(np.zeros((0, 3)))
    with pytest.raises(InvalidParameterError):
        rademacher_exact(np.zeros((1, 25)))
    with pytest.raises(InvalidParameterError):
        empirical_rademacher(np.zeros((2, 2)), trials=0, seed=0)


# ---- random projection ----

def test_jl_project_full_dimension_is_identity():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-0.4, 0.4, (15, 6))
    cloud = PointCloud.from_points(pts)
    proj, scale = jl_project(cloud, g=6, seed=0)
    np.testing.assert_allclose(proj.points, pts, atol=1e-12)
    assert scale == pytest.approx(1.0)


def test_jl_project_output_rank():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-0.4, 0.4, (30, 6))
    cloud = PointCloud.from_points(pts)
    proj, scale = jl_project(cloud, g=2, seed=3)
    assert scale == pytest.approx(3.0)
    sv = np.linalg.svd(proj.points, compute_uv=False)
    assert np.sum(sv > 1e-10) <= 2


def test_jl_project_validation():
    cloud = PointCloud.from_points(np.zeros((3, 4)))
    with pytest.raises(InvalidParameterError):
        jl_project(cloud, g=0, seed=0)
    with pytest.raises(InvalidParameterError):
        jl_project(cloud, g=5, seed=0)


def test_jl_distortion_frequency_small():
    gamma, ell, n = 0.5, 20, 64
    g = math.ceil(4.0 * math.log(ell) / gamma ** 2)
    rng = np.random.default_rng(777)
    vecs = rng.standard_normal((ell, n))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    cloud = PointCloud.from_points(vecs, require_unit_ball=False)
    iu = np.triu_indices(ell, 1)
    base = np.linalg.norm(vecs[iu[0]] - vecs[iu[1]], axis=1)
    hits = 0
    for seed in range(50):
        proj, scale = jl_project(cloud, g, seed)
        red = np.linalg.norm(proj.points[iu[0]] - proj.points[iu[1]], axis=1)
        red = red * math.sqrt(scale)
        hits += bool(np.all(np.abs(red - base) <= (gamma / 2.0) * base))
    assert hits / 50 >= 0.6


# ---- lifting ----

def test_lift_point_is_unit_norm_on_the_sphere():
    x = np.array([0.6, 0.8])
    psi = lift_point(x)
    assert float(np.linalg.norm(psi)) == pytest.approx(1.0, abs=1e-12)
    inner = lift_point(0.5 * x)
    assert float(np.linalg.norm(inner)) < 1.0


def test_lift_plane_norm_in_ball():
    rng = np.random.default_rng(2)
    for sub in random_planes(rng, 5, 2, 10):
        phi = lift_plane(sub)
        assert float(np.linalg.norm(phi)) <= 1.0 + 1e-9


def test_lift_plane_outside_ball_raises():
    sub = AffineSubspace(base=np.array([1.5, 0.0]), basis=np.array([[0.0, 1.0]]))
    with pytest.raises(PlaneOutsideBallError):
        lift_plane(sub)


def test_lift_identity_against_brute_force():
    rng = np.random.default_rng(123)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(0, n))
        count = int(rng.integers(1, 6))
        planes = random_planes(rng, n, d, count)
        x = rng.standard_normal(n)
        x *= rng.uniform(0.0, 1.0) / np.linalg.norm(x)
        lhs, rhs = lift_identity_check(x, planes)
        brute = min(dist_to_affine(x, sub) ** 2 for sub in planes)
        assert lhs == pytest.approx(brute, abs=1e-12)
        assert abs(lhs - rhs) <= 1e-9


def test_lift_identity_validation():
    with pytest.raises(InvalidParameterError):
        lift_identity_check(np.zeros(2), [])
    mixed = [AffineSubspace(base=np.zeros(2), basis=np.array([[1.0, 0.0]])),
             AffineSubspace(base=np.zeros(2), basis=np.zeros((0, 2)))]
    with pytest.raises(InvalidParameterError):
        lift_identity_check(np.zeros(2), mixed)


# ---- growth bound ----

def test_sauer_shelah_values():
    assert sauer_shelah(2, 5) == 16
    assert sauer_shelah(0, 9) == 1
    assert sauer_shelah(7, 5) == 32  # vc >= k collapses to 2^k
    assert sauer_shelah(3, 0) == 1


def test_sauer_shelah_validation():
    with pytest.raises(InvalidParameterError):
        sauer_shelah(-1, 4)
