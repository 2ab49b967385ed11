"""Point-cloud geometry: clouds, affine subspaces, nets, tangents, reach.

Conventions used throughout the package:
  - points are float64 rows of an (N, n) array;
  - an affine subspace is stored as a base point plus orthonormal basis rows;
  - distances are Euclidean.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateNeighborhoodError,
    EmptyInputError,
    InsufficientDataError,
    InvalidParameterError,
    UnderdeterminedTangentError,
)

WEIGHT_SUM_TOL = 1e-12
UNIT_BALL_TOL = 1e-9
ORTHONORMAL_TOL = 1e-10
ON_SUBSPACE_TOL = 1e-12
REACH_PAIR_FLOOR = 1e-14  # pairs with smaller tangent deviation are excluded
MNFD_MAGIC = b"MNFD"


def _as_float_matrix(points, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidParameterError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Weighted finite point set in R^n.

    weights are nonnegative and sum to one (checked to 1e-12). When
    require_unit_ball is set every point must satisfy |x| <= 1 + 1e-9.
    An empty cloud (N = 0) is representable; operations that need points
    raise EmptyInputError themselves.
    """

    points: np.ndarray            # (N, n)
    weights: np.ndarray           # (N,)
    require_unit_ball: bool = True

    def __post_init__(self):
        pts = _as_float_matrix(self.points)
        if pts.shape[1] < 1:
            raise InvalidParameterError("ambient dimension must be at least 1")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise InvalidParameterError(
                f"weights shape {w.shape} does not match {pts.shape[0]} points")
        if pts.shape[0] > 0:
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise InvalidParameterError("weights must be finite and nonnegative")
            if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOL:
                raise InvalidParameterError(
                    f"weights sum to {w.sum():.17g}, expected 1 within {WEIGHT_SUM_TOL}")
            if self.require_unit_ball:
                worst = float(np.max(np.linalg.norm(pts, axis=1)))
                if worst > 1.0 + UNIT_BALL_TOL:
                    raise InvalidParameterError(
                        f"point with norm {worst:.17g} outside the unit ball")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_points(cls, points, weights=None, require_unit_ball: bool = True) -> "PointCloud":
        """Build a cloud, defaulting to uniform weights."""
        pts = _as_float_matrix(points)
        if weights is None:
            n = pts.shape[0]
            w = np.full(n, 1.0 / n) if n else np.zeros(0)
        else:
            w = np.asarray(weights, dtype=np.float64)
            total = float(w.sum())
            if total <= 0:
                raise InvalidParameterError("weights must have positive sum")
            w = w / total
        return cls(points=pts, weights=w, require_unit_ball=require_unit_ball)


@dataclass(frozen=True, eq=False)
class AffineSubspace:
    """Affine subspace given by a base point and orthonormal basis rows.

    basis has shape (d, n); d = 0 (a single point) is allowed.
    """

    base: np.ndarray    # (n,)
    basis: np.ndarray   # (d, n), rows orthonormal to 1e-10

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64)
        basis = np.asarray(self.basis, dtype=np.float64)
        if base.ndim != 1 or not np.all(np.isfinite(base)):
            raise InvalidParameterError("base must be a finite vector")
        if basis.ndim != 2 or basis.shape[1] != base.shape[0]:
            raise InvalidParameterError(
                f"basis shape {basis.shape} incompatible with base of dim {base.shape[0]}")
        d = basis.shape[0]
        if d > base.shape[0]:
            raise InvalidParameterError("subspace dimension exceeds ambient dimension")
        if d > 0:
            gram = basis @ basis.T
            if float(np.max(np.abs(gram - np.eye(d)))) > ORTHONORMAL_TOL:
                raise InvalidParameterError("basis rows are not orthonormal to 1e-10")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "basis", basis)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.base.shape[0]

    def nearest_to_origin(self) -> np.ndarray:
        """The point of the subspace closest to the origin."""
        if self.dim == 0:
            return self.base.copy()
        return self.base - self.basis.T @ (self.basis @ self.base)


@dataclass(frozen=True)
class ReachEstimate:
    """Federer reach estimate: the minimizing value and its ordered pair.

    value is math.inf (argpair None) when every ordered pair was excluded
    by the deviation floor.
    """

    value: float
    argpair: tuple[int, int] | None

    def __post_init__(self):
        if not (self.value > 0):
            raise InvalidParameterError("reach estimate must be positive")
        if math.isinf(self.value):
            if self.argpair is not None:
                raise InvalidParameterError("infinite estimate cannot carry an argpair")
        else:
            if self.argpair is None:
                raise InvalidParameterError("finite estimate needs an argpair")
            a, b = self.argpair
            if a == b:
                raise InvalidParameterError("argpair indices must be distinct")


def residuals_to_subspace(points: np.ndarray, sub: AffineSubspace) -> np.ndarray:
    """Componentwise residuals of points after projecting onto sub."""
    rel = points - sub.base
    if sub.dim == 0:
        return rel
    return rel - (rel @ sub.basis.T) @ sub.basis


def dist_to_affine(x, sub: AffineSubspace) -> float:
    """Euclidean distance from x to the affine subspace."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (sub.ambient_dim,):
        raise InvalidParameterError(
            f"point of dim {x.shape} does not match ambient dim {sub.ambient_dim}")
    res = residuals_to_subspace(x[None, :], sub)
    return float(np.linalg.norm(res[0]))


def greedy_net(cloud: PointCloud, r: float) -> list[int]:
    """Greedy r-net indices in scan order.

    The first point is always selected; a later point is selected exactly
    when it is at distance >= r from everything selected so far. The result
    covers the cloud at radius < r and is r-separated.
    """
    if cloud.size == 0:
        raise EmptyInputError("cannot build a net of an empty cloud")
    if not (r > 0):
        raise InvalidParameterError(f"net radius must be positive, got {r!r}")
    pts = cloud.points
    selected = [0]
    dmin = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, cloud.size):
        if dmin[i] >= r:
            selected.append(i)
            np.minimum(dmin, np.linalg.norm(pts - pts[i], axis=1), out=dmin)
    return selected


def _sign_fix_rows(rows: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each row so its first entry of magnitude > tol is positive."""
    out = rows.copy()
    for k in range(out.shape[0]):
        row = out[k]
        nz = np.nonzero(np.abs(row) > tol)[0]
        if nz.size and row[nz[0]] < 0:
            out[k] = -row
    return out


def estimate_tangent(cloud: PointCloud, center_index: int, radius: float, d: int) -> AffineSubspace:
    """Tangent estimate at one point: top-d PCA of the centered neighborhood.

    The neighborhood is every cloud point within `radius` of the center
    (the center included). Needs at least d+1 neighbors and a nonzero
    neighborhood covariance.
    """
    if cloud.size == 0:
        raise EmptyInputError("cannot estimate a tangent on an empty cloud")
    if not (0 <= center_index < cloud.size):
        raise InvalidParameterError(f"center index {center_index} out of range")
    if not (radius > 0):
        raise InvalidParameterError("tangent radius must be positive")
    n = cloud.ambient_dim
    if not (1 <= d <= n):
        raise InvalidParameterError(f"tangent dimension {d} invalid for ambient dim {n}")
    center = cloud.points[center_index]
    mask = np.linalg.norm(cloud.points - center, axis=1) <= radius
    nb = cloud.points[mask]
    if nb.shape[0] < d + 1:
        raise UnderdeterminedTangentError(
            f"{nb.shape[0]} neighbors within radius {radius}, need at least {d + 1}")
    centered = nb - nb.mean(axis=0)
    cov = centered.T @ centered / nb.shape[0]
    if float(np.max(np.abs(cov))) < 1e-24:
        raise DegenerateNeighborhoodError("neighborhood covariance is zero")
    evals, evecs = np.linalg.eigh(cov)
    # columns of evecs are ascending by eigenvalue; take the top d
    top = evecs[:, ::-1][:, :d].T
    basis = _sign_fix_rows(top)
    return AffineSubspace(base=center.copy(), basis=basis)


def federer_reach(cloud: PointCloud, tangents: Mapping[int, AffineSubspace]) -> ReachEstimate:
    """Reach estimate: inf over ordered pairs of |a-b|^2 / (2 d(b, Tan(a))).

    tangents must provide an AffineSubspace through every cloud point
    (base within 1e-9 of the point). Pairs whose deviation d(b, Tan(a))
    is below 1e-14 are excluded; if everything is excluded the estimate
    is +inf with no argpair.
    """
    if cloud.size < 2:
        raise InsufficientDataError("reach estimation needs at least two points")
    pts = cloud.points
    for i in range(cloud.size):
        if i not in tangents:
            raise InvalidParameterError(f"no tangent supplied for index {i}")
        sub = tangents[i]
        if float(np.linalg.norm(sub.base - pts[i])) > 1e-9:
            raise InvalidParameterError(f"tangent base at index {i} is not on the point")
    best = math.inf
    best_pair: tuple[int, int] | None = None
    for a in range(cloud.size):
        res = residuals_to_subspace(pts, tangents[a])
        dev = np.linalg.norm(res, axis=1)
        dist2 = np.einsum("ij,ij->i", pts - pts[a], pts - pts[a])
        dev[a] = 0.0  # excludes the diagonal via the floor below
        valid = dev > REACH_PAIR_FLOOR
        if not np.any(valid):
            continue
        ratios = np.full(cloud.size, math.inf)
        ratios[valid] = dist2[valid] / (2.0 * dev[valid])
        b = int(np.argmin(ratios))
        if ratios[b] < best:
            best = float(ratios[b])
            best_pair = (a, b)
    return ReachEstimate(value=best, argpair=best_pair)


def _directed_hausdorff(a: np.ndarray, b: np.ndarray, block: int = 512) -> float:
    worst = 0.0
    for start in range(0, a.shape[0], block):
        chunk = a[start:start + block]
        d2 = (
            np.sum(chunk * chunk, axis=1)[:, None]
            - 2.0 * chunk @ b.T
            + np.sum(b * b, axis=1)[None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
    return worst


def hausdorff_distance(cloud_a: PointCloud, cloud_b: PointCloud) -> float:
    """Symmetric Hausdorff distance between two finite clouds."""
    if cloud_a.size == 0 or cloud_b.size == 0:
        raise EmptyInputError("Hausdorff distance needs two nonempty clouds")
    if cloud_a.ambient_dim != cloud_b.ambient_dim:
        raise InvalidParameterError("clouds live in different ambient dimensions")
    return max(
        _directed_hausdorff(cloud_a.points, cloud_b.points),
        _directed_hausdorff(cloud_b.points, cloud_a.points),
    )


# ---- serialization ----

def save_csv(cloud: PointCloud, path: str, include_weights: bool = False) -> None:
    """Write one point per row; optionally append the weight column."""
    data = cloud.points
    if include_weights:
        data = np.hstack([data, cloud.weights[:, None]])
    np.savetxt(path, data, delimiter=",", fmt="%.17g")


def load_csv(path: str, has_weights: bool = False, require_unit_ball: bool = True) -> PointCloud:
    """Read a CSV written by save_csv."""
    data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if data.size == 0:
        raise EmptyInputError(f"no points in {path}")
    if has_weights:
        if data.shape[1] < 2:
            raise InvalidParameterError("weighted CSV needs at least two columns")
        return PointCloud.from_points(
            data[:, :-1], weights=data[:, -1], require_unit_ball=require_unit_ball)
    return PointCloud.from_points(data, require_unit_ball=require_unit_ball)


def save_mnfd(cloud: PointCloud, path: str) -> None:
    """Binary format: magic 'MNFD', u32 n, u64 N, N*n f64 points, N f64 weights.

    All fields little-endian; points are row-major.
    """
    with open(path, "wb") as fh:
        fh.write(MNFD_MAGIC)
        fh.write(struct.pack("<IQ", cloud.ambient_dim, cloud.size))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cloud.weights, dtype="<f8").tobytes())


def load_mnfd(path: str, require_unit_ball: bool = False) -> PointCloud:
    """Read the binary format written by save_mnfd."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MNFD_MAGIC:
            raise InvalidParameterError(f"bad magic {magic!r}, expected {MNFD_MAGIC!r}")
        n, count = struct.unpack("<IQ", fh.read(12))
        pts = np.frombuffer(fh.read(8 * count * n), dtype="<f8").reshape(count, n)
        w = np.frombuffer(fh.read(8 * count), dtype="<f8")
    return PointCloud(points=pts.astype(np.float64), weights=w.astype(np.float64),
                      require_unit_ball=require_unit_ball)


def orthonormal_completion(basis: np.ndarray, n: int) -> np.ndarray:
    """Rows spanning the orthogonal complement of the given orthonormal rows.

    Deterministic: built from the SVD of the input and sign-fixed.
    """
    d = basis.shape[0]
    if d == 0:
        return np.eye(n)
    if d == n:
        return np.zeros((0, n))
    _, _, vt = np.linalg.svd(basis, full_matrices=True)
    comp = vt[d:]
    return _sign_fix_rows(comp)


def frame_from_tangent(sub: AffineSubspace) -> np.ndarray:
    """Proper-rotation matrix whose first d columns span the tangent.

    Columns 0..d-1 are the tangent basis rows, the rest a deterministic
    orthonormal completion; the last column is flipped if needed so the
    determinant is +1.
    """
    n = sub.ambient_dim
    comp = orthonormal_completion(sub.basis, n)
    frame = np.vstack([sub.basis, comp]).T  # columns are the axes
    if np.linalg.det(frame) < 0:
        frame = frame.copy()
        frame[:, -1] = -frame[:, -1]
    return frame
