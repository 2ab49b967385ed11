"""End-to-end manifold hypothesis test at desk scale.

Given a weighted sample in the unit ball and target manifold parameters
(dimension d, volume V, reach tau) with tolerances (eps, delta), the test
searches a budget of cylinder packets, extracts a putative manifold from
each, fits patched graph sections, and compares the best empirical loss
against the decision threshold C * eps.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .asdf_bundle import (
    Cylinder,
    CylinderPacket,
    PacketValidation,
    extract_putative_manifold,
    ideal_packet,
    validate_packet,
)
from .core_geometry import (
    AffineSubspace,
    PointCloud,
    estimate_tangent,
    federer_reach,
    greedy_net,
)
from .errors import (
    EmptyInputError,
    InvalidParameterError,
    ManifoldTestError,
    NoValidPacketError,
    OutOfTubeError,
)
from .whitney_sections import SectionModel, fit_sections, mfin_distance

TANGENT_RADIUS_LADDER = (2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class TestConfig:
    """All knobs of the manifold test in one place.

    d, V, tau describe the manifold class; eps and delta the loss tolerance
    and failure probability; C scales the decision threshold. cbar12 sets
    the cylinder scale tau_bar = cbar12 * tau.
    """

    d: int
    V: float
    tau: float
    eps: float
    delta: float
    C: float = 4.0
    cbar12: float = 0.1
    packet_budget: int = 4
    seed: int = 0
    eps_bar: float = 0.5
    extra_dim: int = 5
    out_of_tube_factor: float = 1.5
    c_rec: float = 0.5
    max_cylinders: int | None = None
    solver: str = "cutting-plane"
    solver_budget: int | None = None
    newton_tol: float = 1e-10

    def __post_init__(self):
        if self.d < 1:
            raise InvalidParameterError("d must be at least 1")
        if not (0 < self.tau < 1):
            raise InvalidParameterError("tau must lie in (0, 1)")
        if not (self.V > 0 and self.eps > 0 and self.C > 0):
            raise InvalidParameterError("V, eps and C must be positive")
        if not (0 < self.delta < 1):
            raise InvalidParameterError("delta must lie in (0, 1)")
        if not (0 < self.cbar12 < 1):
            raise InvalidParameterError("cbar12 must lie in (0, 1)")
        if self.packet_budget < 1:
            raise InvalidParameterError("packet budget must be at least 1")
        if not (self.eps_bar > 0):
            raise InvalidParameterError("eps_bar must be positive")

    @property
    def tau_bar(self) -> float:
        return self.cbar12 * self.tau

    @property
    def threshold(self) -> float:
        return self.C * self.eps

    @property
    def cylinder_cap(self) -> int:
        if self.max_cylinders is not None:
            return self.max_cylinders
        return int(math.ceil((4.0 / self.cbar12) * self.V / self.tau ** self.d))


# ---- synthetic data ----

def _unit_ball_clip(points: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(points, axis=1)
    over = norms > 1.0
    if np.any(over):
        points = points.copy()
        points[over] /= norms[over, None] * (1.0 + 1e-12)
    return points


def generate_synthetic(kind: str, n: int, size: int, seed: int = 0,
                       noise: float = 0.0, **params) -> tuple[PointCloud, dict]:
    """Synthetic samples in the unit ball of R^n with known structure.

    Kinds: "sphere" (intrinsic dim `dim`, radius `radius`, optional `even`
    spacing when dim is 1), "torus" (radii `R` and `r` with R + r <= 1),
    "kplanes" (`k` random `dim`-planes), "uniform_ball". Gaussian ambient
    noise of the given scale is added, then points are clipped to the ball.
    """
    if size < 1:
        raise InvalidParameterError("size must be at least 1")
    rng = np.random.default_rng(seed)
    meta: dict = {"kind": kind, "n": n, "size": size, "seed": seed, "noise": noise}
    if kind == "sphere":
        dim = int(params.get("dim", 1))
        radius = float(params.get("radius", 0.9))
        even = bool(params.get("even", False))
        if not (1 <= dim < n):
            raise InvalidParameterError(f"sphere dim {dim} invalid for ambient {n}")
        if not (0 < radius <= 1):
            raise InvalidParameterError("sphere radius must lie in (0, 1]")
        if even and dim == 1:
            ang = 2.0 * math.pi * np.arange(size) / size
            core = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            g = rng.normal(size=(size, dim + 1))
            core = radius * g / np.linalg.norm(g, axis=1, keepdims=True)
        points = np.zeros((size, n))
        points[:, :dim + 1] = core
        meta.update(dim=dim, radius=radius, even=even)
    elif kind == "torus":
        R = float(params.get("R", 0.6))
        r = float(params.get("r", 0.25))
        if R + r > 1.0 or r <= 0 or R <= r:
            raise InvalidParameterError("torus radii need 0 < r < R and R + r <= 1")
        if n < 3:
            raise InvalidParameterError("a torus needs ambient dimension >= 3")
        theta = rng.uniform(0.0, 2.0 * math.pi, size)
        phi = rng.uniform(0.0, 2.0 * math.pi, size)
        points = np.zeros((size, n))
        points[:, 0] = (R + r * np.cos(phi)) * np.cos(theta)
        points[:, 1] = (R + r * np.cos(phi)) * np.sin(theta)
        points[:, 2] = r * np.sin(phi)
        meta.update(R=R, r=r)
    elif kind == "kplanes":
        k = int(params.get("k", 2))
        dim = int(params.get("dim", 1))
        if not (1 <= dim <= n) or k < 1:
            raise InvalidParameterError("kplanes needs 1 <= dim <= n and k >= 1")
        points = np.zeros((size, n))
        bases = []
        for _ in range(k):
            g = rng.normal(size=(n, dim))
            q, _r = np.linalg.qr(g)
            center = rng.normal(size=n)
            center = 0.4 * center / np.linalg.norm(center) * rng.uniform(0.2, 1.0)
            bases.append((center, q[:, :dim]))
        which = rng.integers(0, k, size)
        coeff = rng.uniform(-0.5, 0.5, (size, dim))
        for i in range(size):
            c, b = bases[which[i]]
            points[i] = c + b @ coeff[i]
        meta.update(k=k, dim=dim)
    elif kind == "uniform_ball":
        g = rng.normal(size=(size, n))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        radii = rng.uniform(0.0, 1.0, size) ** (1.0 / n)
        points = g * radii[:, None]
    else:
        raise InvalidParameterError(f"unknown synthetic kind {kind!r}")
    if noise > 0:
        points = points + rng.normal(0.0, noise, points.shape)
    points = _unit_ball_clip(points)
    return PointCloud.from_points(points), meta


# ---- dimension reduction ----

@dataclass(frozen=True, eq=False)
class ReducedCloud:
    """Sample expressed in an orthonormal basis of a low-dimensional span.

    The span is linear (through the origin), so norms survive and the
    reduced cloud stays in the unit ball. perp_sq holds each point's
    squared distance to the span; ambient squared distances decompose as
    reduced squared distance plus perp_sq.
    """

    cloud: PointCloud        # (N, g) coordinates in the span
    basis: np.ndarray        # (g, n) orthonormal rows
    perp_sq: np.ndarray      # (N,)
    span_rank: int           # rank of the net-point span before extras

    @property
    def reduced_dim(self) -> int:
        return self.basis.shape[0]

    def to_ambient(self, reduced_points: np.ndarray) -> np.ndarray:
        return np.asarray(reduced_points, dtype=np.float64) @ self.basis


def reduce_dimension(cloud: PointCloud, net_indices, extra_dim: int = 5,
                     rank_tol: float = 1e-10) -> ReducedCloud:
    """Project onto the linear span of the net points plus residual modes.

    The basis starts with the span of the net points (rank determined by
    singular values above rank_tol relative to the largest) and is extended
    by up to extra_dim principal directions of the remaining residuals.
    """
    if cloud.size == 0:
        raise EmptyInputError("cannot reduce an empty cloud")
    net_indices = np.asarray(net_indices, dtype=np.int64)
    if net_indices.size == 0:
        raise EmptyInputError("need at least one net index")
    n = cloud.ambient_dim
    net_pts = cloud.points[net_indices]
    _u, sv, vt = np.linalg.svd(net_pts, full_matrices=False)
    if sv.size and sv[0] > 0:
        rank = int(np.sum(sv > rank_tol * sv[0]))
    else:
        rank = 0
    rows = [vt[:rank]] if rank else []
    basis = vt[:rank] if rank else np.zeros((0, n))
    if extra_dim > 0 and rank < n:
        resid = cloud.points - (cloud.points @ basis.T) @ basis
        _u2, sv2, vt2 = np.linalg.svd(resid, full_matrices=False)
        keep = int(np.sum(sv2 > max(rank_tol * (sv[0] if sv.size else 1.0), 1e-14)))
        rows.append(vt2[:min(extra_dim, keep)])
        basis = np.vstack([b for b in rows if b.size]) if rows else basis
        # re-orthonormalize to wash out roundoff between the two blocks
        q, _r = np.linalg.qr(basis.T)
        basis = q.T[:basis.shape[0]]
    if basis.shape[0] == 0:
        basis = np.eye(1, n)
    reduced = cloud.points @ basis.T
    perp = np.sum(cloud.points * cloud.points, axis=1) - np.sum(reduced * reduced, axis=1)
    np.maximum(perp, 0.0, out=perp)
    reduced_cloud = PointCloud(points=reduced, weights=cloud.weights)
    return ReducedCloud(cloud=reduced_cloud, basis=basis, perp_sq=perp,
                        span_rank=rank)


# ---- packet candidates ----

def _packet_seed(seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"packet:{seed}:{index}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def _small_rotation(rng: np.random.Generator, n: int, opnorm: float) -> np.ndarray:
    """Proper rotation near the identity via the Cayley transform."""
    a = rng.normal(size=(n, n))
    s = a - a.T
    norm = float(np.linalg.norm(s, 2))
    if norm < 1e-300 or opnorm <= 0:
        return np.eye(n)
    s *= opnorm / norm
    eye = np.eye(n)
    return np.linalg.solve(eye - 0.5 * s, eye + 0.5 * s)


def _perturb_packet(packet: CylinderPacket, rng: np.random.Generator) -> CylinderPacket:
    """An admissible perturbation: jittered centers, near-identity twists."""
    tb = packet.tau_bar
    center_scale = min(0.1 * packet.C_align * tb * tb / packet.tau, 0.25 * tb)
    rot_scale = 0.3 * packet.c12 * tb
    cyls = []
    for cyl in packet.cylinders:
        shift = rng.normal(size=packet.n)
        nrm = float(np.linalg.norm(shift))
        if nrm > 0:
            shift = shift / nrm * center_scale * rng.uniform(0.0, 1.0)
        twist = _small_rotation(rng, packet.n, rot_scale)
        cyls.append(Cylinder(rotation=twist @ cyl.rotation,
                             center=cyl.center + shift,
                             scale=cyl.scale, tangent_dim=cyl.tangent_dim))
    return CylinderPacket(cyls, tau=packet.tau, c12=packet.c12,
                          C_align=packet.C_align)


def _net_tangents(cloud: PointCloud, net: np.ndarray, d: int,
                  tau_bar: float) -> dict[int, AffineSubspace]:
    """Tangent estimates at net points, widening the radius as needed."""
    tangents: dict[int, AffineSubspace] = {}
    n = cloud.ambient_dim
    for idx in net:
        sub = None
        for factor in TANGENT_RADIUS_LADDER:
            try:
                sub = estimate_tangent(cloud, int(idx), factor * tau_bar, d)
                break
            except ManifoldTestError:
                continue
        if sub is None:
            basis = np.eye(d, n)
            sub = AffineSubspace(base=cloud.points[idx].copy(), basis=basis)
        tangents[int(idx)] = sub
    return tangents


@dataclass(frozen=True, eq=False)
class PacketCandidate:
    """One packet tried by the search, with its outcome."""

    index: int
    kind: str                 # "ideal" or "perturbed"
    loss: float               # +inf when the packet failed
    reason: str | None
    validation: PacketValidation | None
    mesh_size: int
    empty_sections: int
    out_of_tube: int


@dataclass(frozen=True, eq=False)
class TestVerdict:
    """Outcome of the manifold test.

    case is "one" when some packet produced a patched manifold with loss at
    most C * eps, otherwise "two". The winning model (if any) is attached
    for verification; the certificate is JSON-serializable.
    """

    case: str
    best_loss: float
    threshold: float
    samples_used: int
    candidates: tuple[PacketCandidate, ...]
    certificate: dict
    model: SectionModel | None
    reduction: ReducedCloud | None
    config: TestConfig


def _packet_loss(model: SectionModel, reduced: ReducedCloud,
                 config: TestConfig) -> tuple[float, int]:
    """Weighted squared-distance loss of the data to the patched manifold."""
    cloud = reduced.cloud
    mesh_pts = model.mesh.base_points
    out_count = 0
    total = 0.0
    for i in range(cloud.size):
        z = cloud.points[i]
        try:
            dist = mfin_distance(model, z)
        except OutOfTubeError:
            out_count += 1
            gap = float(np.min(np.linalg.norm(mesh_pts - z, axis=1)))
            dist = config.out_of_tube_factor * gap
        total += cloud.weights[i] * (dist * dist + reduced.perp_sq[i])
    return total, out_count


def run_test(cloud: PointCloud, config: TestConfig) -> TestVerdict:
    """Decide between the two cases for the given sample.

    Case one: some admissible packet yields a patched manifold whose
    empirical loss is at most C * eps. Case two: every packet in the budget
    fails or exceeds the threshold.
    """
    if cloud.size == 0:
        raise EmptyInputError("cannot test an empty sample")
    tb = config.tau_bar
    net = greedy_net(cloud, tb / 2.0)
    reduced = reduce_dimension(cloud, net, config.extra_dim)
    rcloud = reduced.cloud
    rnet = greedy_net(rcloud, tb / 2.0)
    rnet = rnet[:config.cylinder_cap]
    tangents = _net_tangents(rcloud, rnet, config.d, tb)

    candidates: list[PacketCandidate] = []
    best: tuple[float, int] | None = None
    best_model: SectionModel | None = None
    base_packet: CylinderPacket | None = None
    for index in range(config.packet_budget):
        kind = "ideal" if index == 0 else "perturbed"
        try:
            if index == 0:
                packet = ideal_packet(rcloud, tangents, config.tau, config.cbar12,
                                      max_cylinders=config.cylinder_cap)
                base_packet = packet
            else:
                if base_packet is None:
                    raise NoValidPacketError("no base packet to perturb")
                rng = np.random.default_rng(_packet_seed(config.seed, index))
                packet = _perturb_packet(base_packet, rng)
            validation = validate_packet(packet)
            seeds = np.vstack([packet.centers, rcloud.points])
            mesh = extract_putative_manifold(packet, seeds, config.newton_tol)
            model = fit_sections(packet, mesh, config.eps_bar,
                                 solver=config.solver, budget=config.solver_budget,
                                 newton_tol=config.newton_tol)
            loss, out_count = _packet_loss(model, reduced, config)
            candidates.append(PacketCandidate(
                index=index, kind=kind, loss=loss, reason=None,
                validation=validation, mesh_size=len(mesh.charts),
                empty_sections=sum(1 for s in model.sections if s.is_empty),
                out_of_tube=out_count))
            if best is None or (loss, index) < best:
                best = (loss, index)
                best_model = model
        except ManifoldTestError as exc:
            candidates.append(PacketCandidate(
                index=index, kind=kind, loss=math.inf,
                reason=f"{type(exc).__name__}: {exc}", validation=None,
                mesh_size=0, empty_sections=0, out_of_tube=0))
    best_loss = best[0] if best is not None else math.inf
    case = "one" if best_loss <= config.threshold else "two"
    estimate = budget_estimate(config, cloud.ambient_dim)
    certificate = {
        "case": case,
        "best_loss": best_loss if math.isfinite(best_loss) else None,
        "threshold": config.threshold,
        "best_candidate": best[1] if best is not None else None,
        "candidates": [
            {
                "index": c.index,
                "kind": c.kind,
                "loss": c.loss if math.isfinite(c.loss) else None,
                "reason": c.reason,
                "packet_conditions_ok": c.validation.all_ok if c.validation else None,
                "mesh_size": c.mesh_size,
                "empty_sections": c.empty_sections,
                "out_of_tube": c.out_of_tube,
            }
            for c in candidates
        ],
        "reduced_dim": reduced.reduced_dim,
        "span_rank": reduced.span_rank,
        "net_size": len(rnet),
        "tau_bar": tb,
        "search": estimate.describe(config.packet_budget),
    }
    if best_model is not None and case == "one":
        certificate["cylinders"] = best_model.packet.size
        certificate["mesh_points"] = len(best_model.mesh.charts)
    return TestVerdict(case=case, best_loss=best_loss, threshold=config.threshold,
                       samples_used=cloud.size, candidates=tuple(candidates),
                       certificate=certificate, model=best_model,
                       reduction=reduced, config=config)


def best_section_model(verdict: TestVerdict) -> SectionModel:
    """The winning model of a verdict; raises when every packet failed."""
    if verdict.model is None:
        failures = tuple((c.index, c.reason or "loss above threshold")
                         for c in verdict.candidates)
        raise NoValidPacketError("no packet produced a model", failures=failures)
    return verdict.model


# ---- verification ----

@dataclass(frozen=True, eq=False)
class VerificationReport:
    """Independent checks of a case-one verdict."""

    reach_ok: bool
    reach_value: float
    loss_ok: bool
    recomputed_loss: float
    reported_loss: float
    coefficients_ok: bool
    dense_points: int
    flags: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return self.reach_ok and self.loss_ok and self.coefficients_ok


def _dense_manifold_sample(model: SectionModel, per_axis: int = 5,
                           extent: float = 0.8, merge_fraction: float = 0.25
                           ) -> tuple[np.ndarray, list[AffineSubspace]]:
    """Graph points and analytic tangents sampled from every fitted section.

    Overlapping cylinders trace the same stretch of manifold with slightly
    different graphs; points closer than merge_fraction * tau_bar are
    dropped so near-duplicates cannot dominate a reach estimate.
    """
    packet = model.packet
    d = packet.d
    tb = packet.tau_bar
    axis = np.linspace(-extent, extent, per_axis)
    if d == 1:
        grid = axis[:, None]
    else:
        mesh = np.meshgrid(*([axis] * d), indexing="ij")
        grid = np.stack([g.ravel() for g in mesh], axis=1)
        grid = grid[np.linalg.norm(grid, axis=1) <= extent + 1e-12]
    points = []
    tangents = []
    h = 1e-6
    for j, section in enumerate(model.sections):
        if section.is_empty:
            continue
        cyl = packet.cylinders[j]
        for u in grid:
            vals = section.evaluate(u)
            p = cyl.to_ambient(np.concatenate([tb * u, tb * vals]))
            cols = []
            for k in range(d):
                up = u.copy()
                up[k] += h
                vp = section.evaluate(up)
                cols.append(np.concatenate([(up - u) * tb, tb * (vp - vals)]) / (h * tb))
            frame = np.stack([cyl.rotation @ c for c in cols])
            q, _ = np.linalg.qr(frame.T)
            points.append(p)
            tangents.append(AffineSubspace(base=p, basis=q.T[:d]))
    pts = np.stack(points)
    order = np.lexsort(pts.T[::-1])
    merge = merge_fraction * tb
    kept_pts: list[np.ndarray] = []
    kept_tan: list[AffineSubspace] = []
    for pos in order:
        p = pts[pos]
        if kept_pts:
            dmin = float(np.min(np.linalg.norm(np.stack(kept_pts) - p, axis=1)))
            if dmin < merge:
                continue
        kept_pts.append(p)
        kept_tan.append(tangents[pos])
    return np.stack(kept_pts), kept_tan


def verify_output(verdict: TestVerdict, cloud: PointCloud,
                  config: TestConfig | None = None) -> VerificationReport:
    """Re-derive the case-one evidence from the verdict's model.

    Checks: the dense sample of the patched manifold has Federer reach at
    least c_rec * tau; the loss recomputes to within 10 percent (or eps) of
    the reported value; every jet block respects its coefficient bound.
    """
    if verdict.model is None:
        raise InvalidParameterError("the verdict carries no manifold model")
    config = config or verdict.config
    model = verdict.model
    flags: list[str] = []

    # Reach is certified at the resolution the construction controls: samples
    # closer than ~2 tau_bar probe sub-mesh blending wiggle, not the manifold.
    dense, tangents = _dense_manifold_sample(model, merge_fraction=2.0)
    dense_cloud = PointCloud.from_points(dense, require_unit_ball=False)
    reach = federer_reach(dense_cloud, dict(enumerate(tangents)))
    reach_floor = config.c_rec * config.tau
    reach_ok = reach.value >= reach_floor
    if not reach_ok:
        flags.append(f"reach {reach.value:.4g} below {reach_floor:.4g}")

    reduced = verdict.reduction
    loss, _ = _packet_loss(model, reduced, config)
    reported = verdict.best_loss
    loss_ok = abs(loss - reported) <= 0.1 * max(reported, config.eps)
    if not loss_ok:
        flags.append(f"loss recheck {loss:.4g} vs reported {reported:.4g}")

    coeff_ok = True
    bound = 2.0 * model.packet.tau_bar / model.packet.tau
    for section in model.sections:
        if section.is_empty:
            continue
        for fld in section.fields:
            for jet in fld.jets:
                if float(np.linalg.norm(jet.coefficients())) > bound + 1e-9:
                    coeff_ok = False
    if not coeff_ok:
        flags.append("a jet block exceeds its coefficient bound")

    return VerificationReport(reach_ok=reach_ok, reach_value=reach.value,
                              loss_ok=loss_ok, recomputed_loss=loss,
                              reported_loss=reported, coefficients_ok=coeff_ok,
                              dense_points=dense.shape[0], flags=tuple(flags))


# ---- search budget ----

@dataclass(frozen=True)
class BudgetEstimate:
    """Size of the admissible packet search space, as a power of two."""

    log2_count: float

    def describe(self, searched: int) -> str:
        return f"searched {searched} of ~2^{self.log2_count:.1f} admissible packets"


def budget_estimate(config: TestConfig, n: int, c_budget: float = 1.0) -> BudgetEstimate:
    """Exponential packet-count estimate exp(C (V / tau^d) n ln(1/tau))."""
    if n < 1:
        raise InvalidParameterError("ambient dimension must be at least 1")
    exponent = c_budget * (config.V / config.tau ** config.d) * n * math.log(1.0 / config.tau)
    return BudgetEstimate(log2_count=exponent / math.log(2.0))
