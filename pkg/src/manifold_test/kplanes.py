"""k-planes fitting: alternating minimization over unions of affine pieces."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_geometry import AffineSubspace, PointCloud, _sign_fix_rows
from .errors import EmptyInputError, InfeasibleModelError, InvalidParameterError

CONVERGENCE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class KPlanesModel:
    """Union of at most k affine pieces of dimension at most d.

    Each plane is re-anchored so its base is the point nearest the origin,
    which must lie in the unit ball (all model data comes from ball points).
    """

    planes: tuple[AffineSubspace, ...]
    k: int
    d: int

    def __post_init__(self):
        if not (1 <= len(self.planes) <= self.k):
            raise InvalidParameterError(
                f"{len(self.planes)} planes violates the budget k={self.k}")
        for sub in self.planes:
            if sub.dim > self.d:
                raise InvalidParameterError("plane dimension exceeds the budget d")
            anchor = sub.nearest_to_origin()
            if float(np.linalg.norm(anchor)) > 1.0 + 1e-9:
                raise InvalidParameterError("plane does not meet the unit ball")


def _plane_distances_sq(points: np.ndarray, sub: AffineSubspace) -> np.ndarray:
    rel = points - sub.base
    if sub.dim == 0:
        return np.einsum("ij,ij->i", rel, rel)
    coef = rel @ sub.basis.T
    return np.einsum("ij,ij->i", rel, rel) - np.einsum("ij,ij->i", coef, coef)


def _model_distances_sq(points: np.ndarray, model: KPlanesModel) -> np.ndarray:
    d2 = np.stack([_plane_distances_sq(points, sub) for sub in model.planes])
    np.maximum(d2, 0.0, out=d2)
    return d2


def kplanes_loss(cloud: PointCloud, model: KPlanesModel) -> float:
    """Weighted mean over the cloud of min squared distance to the model."""
    if cloud.size == 0:
        raise EmptyInputError("loss of an empty cloud is undefined")
    d2 = _model_distances_sq(cloud.points, model)
    return float(cloud.weights @ d2.min(axis=0))


def _anchored_plane(base: np.ndarray, basis: np.ndarray) -> AffineSubspace:
    sub = AffineSubspace(base=base, basis=basis)
    return AffineSubspace(base=sub.nearest_to_origin(), basis=basis)


def _pca_plane(points: np.ndarray, weights: np.ndarray, d: int) -> AffineSubspace:
    """Best-fit d-plane of a weighted set: weighted mean plus top-d directions."""
    total = float(weights.sum())
    if total <= 0:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
        total = 1.0
    mean = weights @ points / total
    centered = points - mean
    cov = (centered * weights[:, None]).T @ centered / total
    if d == 0:
        return _anchored_plane(mean, np.zeros((0, points.shape[1])))
    _, evecs = np.linalg.eigh(cov)
    basis = _sign_fix_rows(evecs[:, ::-1][:, :d].T)
    return _anchored_plane(mean, basis)


def _seed_model(points: np.ndarray, weights: np.ndarray, k: int, d: int,
                rng: np.random.Generator) -> KPlanesModel:
    """Farthest-point seeding; bases from local PCA of the nearest points."""
    n_pts = points.shape[0]
    centers = [int(rng.integers(n_pts))]
    dmin = np.linalg.norm(points - points[centers[0]], axis=1)
    while len(centers) < k:
        nxt = int(np.argmax(dmin))
        centers.append(nxt)
        np.minimum(dmin, np.linalg.norm(points - points[nxt], axis=1), out=dmin)
    m = math.ceil(n_pts / k)
    planes = []
    for c in centers:
        order = np.argsort(np.linalg.norm(points - points[c], axis=1), kind="stable")
        local = points[order[:max(m, d + 1)]]
        planes.append(_pca_plane(local, np.full(local.shape[0], 1.0 / local.shape[0]), d))
    return KPlanesModel(planes=tuple(planes), k=k, d=d)


def fit_kplanes(cloud: PointCloud, k: int, d: int, restarts: int = 5,
                max_iters: int = 100, seed: int = 0) -> KPlanesModel:
    """Alternating minimization for the k-planes model.

    Assignment ties go to the lowest plane index; an emptied plane is
    re-seeded at the point farthest from the current model. Iteration stops
    when the loss improves by less than 1e-10 or max_iters is reached.
    max_iters = 0 returns the seeded initialization unchanged. Restart r
    uses seed + r; the best (loss, restart index) wins.
    """
    if cloud.size == 0:
        raise EmptyInputError("cannot fit planes to an empty cloud")
    if k < 1 or d < 0 or d > cloud.ambient_dim:
        raise InvalidParameterError(f"invalid k={k} or d={d}")
    if k > cloud.size:
        raise InfeasibleModelError(f"k={k} exceeds the {cloud.size} available points")
    if restarts < 1 or max_iters < 0:
        raise InvalidParameterError("restarts must be >= 1 and max_iters >= 0")

    points, weights = cloud.points, cloud.weights
    best: tuple[float, int, KPlanesModel] | None = None
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        model = _seed_model(points, weights, k, d, rng)
        trace = [kplanes_loss(cloud, model)]
        for _ in range(max_iters):
            d2 = _model_distances_sq(points, model)
            assign = np.argmin(d2, axis=0)
            planes = list(model.planes)
            for j in range(k):
                mask = assign == j
                if not np.any(mask):
                    far = int(np.argmax(d2.min(axis=0)))
                    order = np.argsort(
                        np.linalg.norm(points - points[far], axis=1), kind="stable")
                    local = points[order[:max(math.ceil(points.shape[0] / k), d + 1)]]
                    planes[j] = _pca_plane(
                        local, np.full(local.shape[0], 1.0 / local.shape[0]), d)
                else:
                    planes[j] = _pca_plane(points[mask], weights[mask], d)
            model = KPlanesModel(planes=tuple(planes), k=k, d=d)
            trace.append(kplanes_loss(cloud, model))
            assert trace[-1] <= trace[-2] + 1e-12, "loss trace must be nonincreasing"
            if trace[-2] - trace[-1] < CONVERGENCE_TOL:
                break
        loss = trace[-1]
        if best is None or (loss, r) < (best[0], best[1]):
            best = (loss, r, model)
    return best[2]


@dataclass(frozen=True)
class DeviationReport:
    """Train-vs-holdout loss deviations of repeated k-planes fits."""

    deviations: tuple[float, ...]
    median: float
    train_losses: tuple[float, ...]
    holdout_losses: tuple[float, ...]


def deviation_experiment(sampler: Callable[[int, np.random.Generator], np.ndarray],
                         k: int, d: int, s: int, trials: int, seed: int,
                         restarts: int = 3, max_iters: int = 50) -> DeviationReport:
    """Fit on s samples, evaluate on a 10s holdout, record |train - holdout|.

    sampler(count, rng) must return a (count, n) array of unit-ball points.
    """
    if trials < 1 or s < 1:
        raise InvalidParameterError("trials and s must be positive")
    devs, train_ls, hold_ls = [], [], []
    for t in range(trials):
        rng = np.random.default_rng(seed + 7919 * t)
        train = PointCloud.from_points(sampler(s, rng))
        holdout = PointCloud.from_points(sampler(10 * s, rng))
        model = fit_kplanes(train, k, d, restarts=restarts,
                            max_iters=max_iters, seed=seed + 104729 * t)
        lt = kplanes_loss(train, model)
        lh = kplanes_loss(holdout, model)
        devs.append(abs(lt - lh))
        train_ls.append(lt)
        hold_ls.append(lh)
    return DeviationReport(
        deviations=tuple(devs),
        median=float(np.median(devs)),
        train_losses=tuple(train_ls),
        holdout_losses=tuple(hold_ls),
    )


def model_to_json(model: KPlanesModel) -> str:
    """Serialize a model: base point plus basis rows per plane."""
    payload = {
        "k": model.k,
        "d": model.d,
        "planes": [
            {"base": sub.base.tolist(), "basis": sub.basis.tolist()}
            for sub in model.planes
        ],
    }
    return json.dumps(payload, sort_keys=True)


def model_from_json(text: str) -> KPlanesModel:
    """Inverse of model_to_json."""
    payload = json.loads(text)
    planes = tuple(
        AffineSubspace(base=np.asarray(p["base"], dtype=np.float64),
                       basis=np.asarray(p["basis"], dtype=np.float64).reshape(
                           len(p["basis"]), len(p["base"])))
        for p in payload["planes"]
    )
    return KPlanesModel(planes=planes, k=int(payload["k"]), d=int(payload["d"]))
