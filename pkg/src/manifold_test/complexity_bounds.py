"""Covering, sample-complexity, fat-shattering and chaining calculators.

Also houses the random-projection helper and the k-plane lifting identity,
which turn minimum squared distances to planes into inner products of
unit-norm lifted vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_geometry import AffineSubspace, PointCloud, dist_to_affine
from .errors import InvalidParameterError, PlaneOutsideBallError

LIFT_BALL_TOL = 1e-9


@dataclass(frozen=True)
class BoundParams:
    """Shared parameters of the bound calculators."""

    d: int            # intrinsic dimension, >= 1
    V: float          # volume budget, > 0
    tau: float        # reach floor, in (0, 1)
    eps: float        # loss scale, in (0, 1)
    delta: float      # failure probability, in (0, 1)
    C: float = 1.0    # leading controlled constant, > 0

    def __post_init__(self):
        if self.d < 1:
            raise InvalidParameterError(f"d must be >= 1, got {self.d}")
        if not (self.V > 0):
            raise InvalidParameterError(f"V must be positive, got {self.V}")
        for name in ("tau", "eps", "delta"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise InvalidParameterError(f"{name} must lie in (0, 1), got {v}")
        if not (self.C > 0):
            raise InvalidParameterError(f"C must be positive, got {self.C}")


@dataclass(frozen=True)
class FatProfile:
    """Fat-shattering profile: gamma -> bound, zero beyond support_ceiling."""

    evaluator: Callable[[float], float]
    support_ceiling: float

    def __post_init__(self):
        if not (self.support_ceiling >= 0):
            raise InvalidParameterError("support ceiling must be nonnegative")


def covering_bound(params: BoundParams, r: float) -> float:
    """Covering-number bound C * V * (tau^-d + (tau r)^(-d/2)) at scale r."""
    if not (r > 0):
        raise InvalidParameterError(f"scale r must be positive, got {r}")
    return params.C * params.V * (
        params.tau ** (-params.d) + (params.tau * r) ** (-params.d / 2.0)
    )


def sample_complexity(params: BoundParams) -> float:
    """Samples sufficient to estimate the loss to eps with confidence 1 - delta.

    C * (U / eps^2 * log^4(U / eps) + eps^-2 * log(1 / delta)) with
    U the covering bound at scale eps; the log argument is clamped below
    at 1 so the quartic term vanishes instead of going negative.
    """
    u = covering_bound(params, params.eps)
    log_term = math.log(max(u / params.eps, 1.0)) ** 4
    inv_eps2 = params.eps ** -2
    return params.C * (u * inv_eps2 * log_term + inv_eps2 * math.log(1.0 / params.delta))


def fat_bound_maxmin(k: int, l: int, gamma: float, C: float = 1.0) -> float:
    """Fat-shattering bound for max-min compositions of k*l bounded pieces.

    (C k l / gamma^2) * log^2(C k l / gamma^2), exactly zero for gamma > 2
    (the class takes values in a diameter-2 range). The log argument is
    clamped below at e so the squared log stays >= 1.
    """
    if k < 1 or l < 1:
        raise InvalidParameterError("k and l must be positive integers")
    if not (gamma > 0):
        raise InvalidParameterError(f"gamma must be positive, got {gamma}")
    if not (C > 0):
        raise InvalidParameterError(f"C must be positive, got {C}")
    if gamma > 2.0:
        return 0.0
    x = C * k * l / gamma ** 2
    return x * math.log(max(x, math.e)) ** 2


def _adaptive_simpson(f: Callable[[float], float], a: float, b: float,
                      rel_tol: float, max_depth: int = 60) -> float:
    """Adaptive Simpson quadrature with a relative tolerance."""

    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = simpson(a, b, fa, fm, fb)
    scale = max(abs(whole), 1e-300)
    tol0 = rel_tol * scale

    # stack entries: (a, m, b, fa, fm, fb, whole, tol, depth)
    stack = [(a, m, b, fa, fm, fb, whole, tol0, 0)]
    total = 0.0
    while stack:
        x0, x1, x2, f0, f1, f2, s, tol, depth = stack.pop()
        lm = 0.5 * (x0 + x1)
        rm = 0.5 * (x1 + x2)
        flm, frm = f(lm), f(rm)
        left = simpson(x0, x1, f0, flm, f1)
        right = simpson(x1, x2, f1, frm, f2)
        if depth >= max_depth or abs(left + right - s) <= 15.0 * tol:
            total += left + right + (left + right - s) / 15.0
        else:
            stack.append((x0, lm, x1, f0, flm, f1, left, tol / 2.0, depth + 1))
            stack.append((x1, rm, x2, f1, frm, f2, right, tol / 2.0, depth + 1))
    return total


def chaining_bound(profile: FatProfile, eps: float, s: float, c: float = 1.0) -> float:
    """Dudley-style chaining bound eps + 12 * integral sqrt(profile(c eta)/s).

    The integral runs from eps/4 to the profile's support ceiling with
    adaptive Simpson quadrature at 1e-8 relative tolerance. A profile that
    is identically zero gives back exactly eps.
    """
    if not (eps > 0):
        raise InvalidParameterError(f"eps must be positive, got {eps}")
    if not (s > 0):
        raise InvalidParameterError(f"sample count must be positive, got {s}")
    if not (c > 0):
        raise InvalidParameterError(f"scale c must be positive, got {c}")
    lo = eps / 4.0
    hi = profile.support_ceiling
    if hi <= lo:
        return eps

    def integrand(eta: float) -> float:
        val = profile.evaluator(c * eta)
        return math.sqrt(max(val, 0.0) / s)

    return eps + 12.0 * _adaptive_simpson(integrand, lo, hi, rel_tol=1e-8)


def rademacher_exact(values) -> float:
    """Exact Rademacher average by enumerating all 2^s sign patterns."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidParameterError("values must be a nonempty (F, s) matrix")
    s = arr.shape[1]
    if s > 20:
        raise InvalidParameterError("exact enumeration limited to s <= 20")
    total = 0.0
    for code in range(1 << s):
        sigma = np.array([1.0 if code >> i & 1 else -1.0 for i in range(s)])
        total += float(np.max(arr @ sigma))
    return total / (1 << s) / s


def empirical_rademacher(values, trials: int, seed: int) -> float:
    """Monte Carlo empirical Rademacher complexity of a finite class.

    values is an (F, s) matrix whose rows are the function values on the
    sample; the estimate averages (1/s) sup_f sum_i sigma_i f(x_i) over
    `trials` independent sign vectors drawn from the seeded generator.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidParameterError("values must be a nonempty (F, s) matrix")
    if trials < 1:
        raise InvalidParameterError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    s = arr.shape[1]
    sigma = rng.integers(0, 2, size=(trials, s)) * 2.0 - 1.0
    sups = np.max(arr @ sigma.T, axis=0)
    return float(sups.mean() / s)


def jl_project(cloud: PointCloud, g: int, seed: int) -> tuple[PointCloud, float]:
    """Orthogonal projection onto a uniformly random g-dimensional subspace.

    Returns the projected cloud (still in ambient coordinates) and the
    scale n/g that makes squared norms and inner products unbiased.
    """
    n = cloud.ambient_dim
    if not (1 <= g <= n):
        raise InvalidParameterError(f"target dimension {g} invalid for ambient {n}")
    rng = np.random.default_rng(seed)
    frame = rng.standard_normal((n, g))
    q, r = np.linalg.qr(frame)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    projected = (cloud.points @ q) @ q.T
    out = PointCloud(points=projected, weights=cloud.weights.copy(),
                     require_unit_ball=cloud.require_unit_ball)
    return out, n / g


def _plane_lift_parts(sub: AffineSubspace) -> tuple[np.ndarray, np.ndarray]:
    """Projector onto the direction space and the nearest point to origin."""
    n = sub.ambient_dim
    if sub.dim == 0:
        proj = np.zeros((n, n))
    else:
        proj = sub.basis.T @ sub.basis
    c = sub.nearest_to_origin()
    return proj, c


def lift_plane(sub: AffineSubspace) -> np.ndarray:
    """Phi(H): unit-norm lift of a plane meeting the unit ball.

    Layout: (1/sqrt(d+5)) * (|c|^2, -vec(P), -2c) with P the projector onto
    the direction space and c the plane's nearest point to the origin.
    """
    proj, c = _plane_lift_parts(sub)
    if float(np.linalg.norm(c)) > 1.0 + LIFT_BALL_TOL:
        raise PlaneOutsideBallError(
            f"plane at distance {np.linalg.norm(c):.6g} does not meet the unit ball")
    d = sub.dim
    return np.concatenate(
        [[float(c @ c)], -proj.ravel(), -2.0 * c]) / math.sqrt(d + 5.0)


def lift_point(x) -> np.ndarray:
    """Psi(x): unit-norm lift (1/sqrt 3) * (1, vec(x x^T), x) of a ball point."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([[1.0], np.outer(x, x).ravel(), x]) / math.sqrt(3.0)


def lift_identity_check(x, planes: Sequence[AffineSubspace]) -> tuple[float, float]:
    """Evaluate both sides of the lifting identity for min squared distance.

    lhs is the brute-force min over planes of d(x, H_i)^2; rhs is
    |x|^2 + sqrt(3 (d+5)) * min_i <Phi(H_i), Psi(x)>. All planes must share
    dimension and intersect the unit ball; |x| <= 1.
    """
    if not planes:
        raise InvalidParameterError("need at least one plane")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    d = planes[0].dim
    for sub in planes:
        if sub.ambient_dim != n:
            raise InvalidParameterError("plane ambient dimension mismatch")
        if sub.dim != d:
            raise InvalidParameterError("planes must share a common dimension")
    if float(np.linalg.norm(x)) > 1.0 + LIFT_BALL_TOL:
        raise InvalidParameterError("query point must lie in the unit ball")

    lhs = min(dist_to_affine(x, sub) ** 2 for sub in planes)

    psi = lift_point(x)
    assert float(np.linalg.norm(psi)) <= 1.0 + LIFT_BALL_TOL
    best = math.inf
    for sub in planes:
        phi = lift_plane(sub)
        assert float(np.linalg.norm(phi)) <= 1.0 + LIFT_BALL_TOL
        best = min(best, float(phi @ psi))
    rhs = float(x @ x) + math.sqrt(3.0 * (d + 5.0)) * best
    return lhs, rhs


def sauer_shelah(vc: int, k: int) -> int:
    """Exact Sauer-Shelah growth bound sum_{i<=vc} C(k, i) as a big integer."""
    if vc < 0 or k < 0:
        raise InvalidParameterError("vc and k must be nonnegative")
    return sum(math.comb(k, i) for i in range(min(vc, k) + 1))
