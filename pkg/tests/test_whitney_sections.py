"""Jets, sketching, the convex section solver, and partition-of-unity patching."""
import math

import numpy as np
import pytest

from manifold_test.asdf_bundle import (
    Cylinder,
    CylinderPacket,
    extract_putative_manifold,
    ideal_packet,
)
from manifold_test.core_geometry import AffineSubspace, PointCloud
from manifold_test.errors import (
    BudgetExceededError,
    DuplicateSiteError,
    EmptyInputError,
    InvalidParameterError,
    OutOfTubeError,
    SiteMismatchError,
    UncoveredPointError,
)
from manifold_test.whitney_sections import (
    Jet2,
    SectionModel,
    WhitneyField,
    build_constraints,
    fit_local_section,
    fit_sections,
    global_section,
    jet_from_coefficients,
    jet_size,
    mfin_distance,
    minimize_section,
    partition_weights,
    section_objective,
    section_objective_gradient,
    separation_oracle,
    sketch,
)

QUAD = (0.05, 0.1, 0.075)


def planted_values(x):
    a, b, c = QUAD
    return a + b * x + c * x * x


def line_fixture(sigma: float = 0.0, m: int = 25, seed: int = 0):
    sites = np.linspace(-1.0, 1.0, m).reshape(-1, 1)
    targets = planted_values(sites[:, 0])
    if sigma > 0:
        targets = targets + sigma * np.random.default_rng(seed).standard_normal(m)
    data = sketch(sites, targets, 0.0)
    constraints = build_constraints(data.sites, M=0.5, c_w=3.0)
    return data, constraints


# ---- jets ----

def test_jet_size_values():
    assert jet_size(1) == 3
    assert jet_size(2) == 6
    assert jet_size(3) == 10


def test_jet_taylor_values():
    jet = Jet2(value=2.0, gradient=np.array([1.0, -1.0]),
               hessian=np.array([[2.0, 1.0], [1.0, 0.0]]))
    h = np.array([0.5, 1.0])
    assert jet.taylor_value(h) == pytest.approx(2.25)
    np.testing.assert_allclose(jet.taylor_gradient(h), [3.0, -0.5])


def test_jet_requires_symmetric_hessian():
    with pytest.raises(InvalidParameterError):
        Jet2(value=0.0, gradient=np.zeros(2),
             hessian=np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_jet_coefficient_round_trip():
    coeffs = np.array([0.3, 1.0, -2.0, 0.5, 0.25, -0.75])
    jet = jet_from_coefficients(coeffs, d=2)
    assert jet.value == 0.3
    np.testing.assert_allclose(jet.gradient, [1.0, -2.0])
    np.testing.assert_allclose(jet.hessian, [[0.5, 0.25], [0.25, -0.75]])
    np.testing.assert_allclose(jet.coefficients(), coeffs)


def test_whitney_field_vector_round_trip():
    rng = np.random.default_rng(2)
    sites = rng.uniform(-1.0, 1.0, (4, 2))
    y = rng.standard_normal(4 * jet_size(2))
    fld = WhitneyField.from_coefficient_vector(sites, y)
    np.testing.assert_allclose(fld.coefficient_vector(), y)


# ---- sketching ----

def test_sketch_merges_by_scan_order():
    sites = np.array([[0.0], [0.01], [1.0]])
    values = np.array([1.0, 3.0, 5.0])
    sk = sketch(sites, values, 0.05)
    np.testing.assert_array_equal(sk.sites, [[0.0], [1.0]])
    np.testing.assert_allclose(sk.targets, [2.0, 5.0])
    np.testing.assert_array_equal(sk.multiplicities, [2, 1])
    assert sk.members == ((0, 1), (2,))
    np.testing.assert_allclose(sk.weights, [2.0 / 3.0, 1.0 / 3.0])
    assert sk.weights.sum() == pytest.approx(1.0, abs=1e-15)


def test_sketch_zero_radius_keeps_everything():
    sites = np.linspace(0.0, 1.0, 7).reshape(-1, 1)
    sk = sketch(sites, np.arange(7.0), 0.0)
    assert sk.size == 7
    np.testing.assert_array_equal(sk.multiplicities, 1)


def test_sketch_vector_targets_and_component():
    sites = np.array([[0.0], [0.001], [0.5]])
    values = np.array([[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]])
    sk = sketch(sites, values, 0.01)
    assert sk.targets.shape == (2, 2)
    comp = sk.component(1)
    np.testing.assert_allclose(comp.targets, [20.0, 50.0])
    np.testing.assert_array_equal(comp.multiplicities, sk.multiplicities)


def test_sketch_validation():
    with pytest.raises(EmptyInputError):
        sketch(np.zeros((0, 1)), np.zeros(0), 0.1)
    with pytest.raises(InvalidParameterError):
        sketch(np.zeros((2, 1)), np.zeros(3), 0.1)
    with pytest.raises(InvalidParameterError):
        sketch(np.zeros((2, 1)), np.zeros(2), -1.0)


def test_sketch_contracts_on_random_sites():
    rng = np.random.default_rng(5)
    sites = np.sort(rng.uniform(-1.0, 1.0, 120)).reshape(-1, 1)
    eps_bar = 0.05
    sk = sketch(sites, np.zeros(120), eps_bar)
    d = np.abs(sites - sk.sites.T).min(axis=1)
    assert float(d.max()) <= eps_bar
    sep = np.abs(sk.sites - sk.sites.T)
    np.fill_diagonal(sep, np.inf)
    assert float(sep.min()) >= eps_bar
    assert int(sk.multiplicities.sum()) == 120


# ---- constraints ----

def test_constraint_rows_match_hand_taylor():
    cons = build_constraints(np.array([[0.0], [0.5]]), M=1.0, c_w=3.0)
    assert cons.m == 2 and cons.q == 3 and cons.dim == 6
    assert cons.pair_rows.shape == (4, 6)
    np.testing.assert_allclose(cons.pair_rows[0], [1.0, 0.5, 0.125, -1.0, 0.0, 0.0])
    np.testing.assert_allclose(cons.pair_rows[1], [0.0, 1.0, 0.5, 0.0, -1.0, 0.0])
    np.testing.assert_allclose(cons.pair_rows[2], [-1.0, 0.0, 0.0, 1.0, -0.5, 0.125])
    np.testing.assert_allclose(cons.pair_rows[3], [0.0, -1.0, 0.0, 0.0, 1.0, -0.5])
    np.testing.assert_allclose(cons.pair_betas,
                               [0.5625, 2.25, 0.5625, 2.25])
    assert cons.pair_labels[0] == "value 0->1"
    assert cons.total_constraints == 6


def test_planted_quadratic_jets_lie_deep_inside():
    data, cons = line_fixture()
    a, b, c = QUAD
    jets = [np.array([planted_values(x), b + 2 * c * x, 2 * c])
            for x in data.sites[:, 0]]
    y = np.concatenate(jets)
    viol = cons.violations(y)
    # exact quadratic jets satisfy every pair functional exactly
    assert float(viol[cons.m:].max()) < 0
    assert cons.is_feasible(y)
    assert separation_oracle(cons, y) is None


def test_duplicate_sites_raise():
    with pytest.raises(DuplicateSiteError):
        build_constraints(np.array([[0.2], [0.2]]), M=1.0)


def test_pair_groups_partition_all_rows():
    sites = np.linspace(-1.0, 1.0, 9).reshape(-1, 1)
    cons = build_constraints(sites, M=1.0)
    seen = np.concatenate([g for g in cons.pair_groups])
    assert sorted(seen.tolist()) == list(range(cons.pair_rows.shape[0]))
    q = cons.q
    for g in cons.pair_groups:
        touched: set[int] = set()
        for row_idx in g:
            sites_hit = set(np.nonzero(cons.pair_rows[row_idx])[0] // q)
            assert not (sites_hit & touched)
            touched |= sites_hit


def test_violations_hand_value():
    cons = build_constraints(np.array([[0.0], [0.5]]), M=1.0, c_w=3.0)
    y = np.zeros(6)
    y[0] = 2.0  # value at the first site only
    v = cons.violations(y)
    assert v[0] == pytest.approx(3.0)    # |block|^2 - M^2 = 4 - 1
    assert v[1] == pytest.approx(-1.0)
    # value rows see P_0(x_1) - value_1 = 2 and P_1(x_0) - value_0 = -2
    assert v[2] == pytest.approx(4.0 - 0.5625)
    assert v[4] == pytest.approx(4.0 - 0.5625)


def test_separation_oracle_cut_properties():
    data, cons = line_fixture()
    rng = np.random.default_rng(9)
    feasible_reference = np.zeros(cons.dim)
    assert separation_oracle(cons, feasible_reference) is None
    for _ in range(10):
        y = rng.standard_normal(cons.dim) * 2.0
        cut = separation_oracle(cons, y)
        if cut is None:
            assert cons.is_feasible(y)
            continue
        assert float(np.linalg.norm(cut.normal)) == pytest.approx(1.0)
        # the cut separates y from the feasible reference point
        assert float(cut.normal @ y) > cut.offset
        assert float(cut.normal @ feasible_reference) <= cut.offset + 1e-12
        assert cut.violation > 0


# ---- objective ----

def test_objective_weighted_value_and_gradient():
    sites = np.array([[0.0], [0.01], [1.0]])
    values = np.array([1.0, 3.0, 5.0])
    sk = sketch(sites, values, 0.05)
    cons = build_constraints(sk.sites, M=10.0)
    y = np.zeros(cons.dim)
    y[0] = 1.0
    y[3] = 2.0
    # weights (2/3, 1/3); residuals (2 - 1, 5 - 2)
    expect = (2.0 / 3.0) * 1.0 + (1.0 / 3.0) * 9.0
    assert section_objective(sk, cons, y) == pytest.approx(expect)
    grad = section_objective_gradient(sk, cons, y)
    h = 1e-7
    for i in range(cons.dim):
        e = np.zeros(cons.dim)
        e[i] = h
        fd = (section_objective(sk, cons, y + e)
              - section_objective(sk, cons, y - e)) / (2 * h)
        assert grad[i] == pytest.approx(fd, abs=1e-6)


def test_objective_site_mismatch():
    sites = np.array([[0.0], [1.0]])
    sk = sketch(sites, np.zeros(2), 0.0)
    other = build_constraints(np.array([[0.0], [0.5], [1.0]]), M=1.0)
    with pytest.raises(SiteMismatchError):
        section_objective(sk, other, np.zeros(other.dim))


# ---- the solver ----

def test_minimize_rejects_vector_targets():
    sites = np.array([[0.0], [1.0]])
    sk = sketch(sites, np.zeros((2, 2)), 0.0)
    cons = build_constraints(sk.sites, M=1.0)
    with pytest.raises(InvalidParameterError):
        minimize_section(sk, cons, eps_bar=0.1)


def test_clean_data_certifies_through_the_warm_start():
    data, cons = line_fixture()
    res = minimize_section(data, cons, eps_bar=1e-3)
    assert res.solver == "warm-start"
    assert res.certified
    assert res.value <= 1e-12
    assert cons.is_feasible(res.y)


def test_small_noise_certifies_through_projection():
    data, cons = line_fixture(sigma=0.005)
    res = minimize_section(data, cons, eps_bar=0.01)
    assert res.solver == "warm-start-projected"
    assert res.certified
    assert res.value <= 0.01
    assert cons.is_feasible(res.y)


def test_cutting_plane_reaches_a_noisy_target():
    data, cons = line_fixture(sigma=0.2)
    res = minimize_section(data, cons, eps_bar=0.02, solver="cutting-plane")
    assert res.solver == "cutting-plane"
    assert res.certified
    assert 0.01 <= res.value <= 0.02
    assert cons.is_feasible(res.y)
    assert res.iterations > 0


def test_projected_gradient_returns_feasible_best_on_stall():
    data, cons = line_fixture(sigma=0.2)
    with pytest.raises(BudgetExceededError) as excinfo:
        minimize_section(data, cons, eps_bar=0.02, solver="projected-gradient")
    best = excinfo.value.best
    assert best is not None
    assert cons.is_feasible(best.y)
    assert best.value <= 0.03


def test_budget_exceeded_carries_best_for_both_solvers():
    data, cons = line_fixture(sigma=0.2)
    for solver in ("cutting-plane", "projected-gradient"):
        with pytest.raises(BudgetExceededError) as excinfo:
            minimize_section(data, cons, eps_bar=1e-9, solver=solver, budget=25)
        best = excinfo.value.best
        assert best is not None
        assert cons.is_feasible(best.y)
        assert best.value < 0.08


def test_unknown_solver_rejected():
    data, cons = line_fixture(sigma=0.2)
    with pytest.raises(InvalidParameterError):
        minimize_section(data, cons, eps_bar=0.1, solver="simplex")


# ---- local sections and patching ----

@pytest.fixture(scope="module")
def circle_model():
    size = 200
    ang = 2.0 * np.pi * np.arange(size) / size
    pts = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    tangents = {
        i: AffineSubspace(base=pts[i],
                          basis=np.array([[-math.sin(a), math.cos(a)]]))
        for i, a in enumerate(ang)
    }
    cloud = PointCloud.from_points(pts)
    packet = ideal_packet(cloud, tangents, tau=0.5, cbar12=0.1)
    mesh = extract_putative_manifold(packet, pts)
    model = fit_sections(packet, mesh)
    return packet, mesh, model


def single_cylinder_model():
    tb = 0.05
    cyl = Cylinder(rotation=np.eye(2), center=np.zeros(2), scale=tb,
                   tangent_dim=1)
    packet = CylinderPacket([cyl], tau=0.5, c12=1.0, C_align=10.0)
    xs = np.linspace(-0.8 * tb, 0.8 * tb, 15)
    pts = np.stack([xs, 0.05 * xs ** 2 / tb], axis=1)
    mesh = extract_putative_manifold(packet, pts)
    model = fit_sections(packet, mesh)
    return packet, model


def test_fit_local_section_empty_when_unpopulated():
    tb = 0.05
    a = Cylinder(rotation=np.eye(2), center=np.zeros(2), scale=tb, tangent_dim=1)
    b = Cylinder(rotation=np.eye(2), center=np.array([0.9, 0.0]), scale=tb,
                 tangent_dim=1)
    packet = CylinderPacket([a, b], tau=0.5, c12=1.0, C_align=10.0)
    xs = np.linspace(-0.03, 0.03, 9)
    mesh = extract_putative_manifold(packet, np.stack([xs, np.zeros(9)], axis=1))
    section = fit_local_section(packet, mesh, 1)
    assert section.is_empty
    with pytest.raises(UncoveredPointError):
        section.evaluate(np.zeros(1))
    populated = fit_local_section(packet, mesh, 0)
    assert not populated.is_empty
    assert populated.codim == 1


def test_partition_weights_sum_to_one(circle_model):
    packet, mesh, model = circle_model
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(50):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        radial = 1.0 + rng.uniform(-0.3, 0.3) * packet.tau_bar
        x = radial * np.array([math.cos(ang), math.sin(ang)])
        try:
            idx, wts = partition_weights(packet, x, model.sections)
        except UncoveredPointError:
            continue
        checked += 1
        assert abs(float(wts.sum()) - 1.0) <= 1e-12
        assert np.all(wts >= 0)
        assert idx.size == wts.size
    assert checked >= 40


def test_partition_weights_uncovered_point(circle_model):
    packet, _, _ = circle_model
    with pytest.raises(UncoveredPointError):
        partition_weights(packet, np.array([0.0, 0.0]))


def test_single_cylinder_patching_is_identity():
    packet, model = single_cylinder_model()
    x = np.array([0.01, 0.002])
    idx, wts = partition_weights(packet, x)
    np.testing.assert_array_equal(idx, [0])
    np.testing.assert_array_equal(wts, [1.0])
    gv = global_section(model, x)
    assert mfin_distance(model, gv.point) == 0.0


def test_global_section_lands_on_the_circle(circle_model):
    packet, mesh, model = circle_model
    rng = np.random.default_rng(17)
    for _ in range(10):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        x = (1.0 + 0.2 * packet.tau_bar) * np.array([math.cos(ang), math.sin(ang)])
        gv = global_section(model, x)
        assert abs(float(np.linalg.norm(gv.point)) - 1.0) < 2e-3
        assert float(gv.weights.sum()) == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(gv.offset, gv.point - gv.base)


def test_mfin_distance_matches_direct_geometry(circle_model):
    packet, mesh, model = circle_model
    z = np.array([1.03, 0.0])
    dist = mfin_distance(model, z)
    assert dist == pytest.approx(0.03, abs=2e-3)


def test_mfin_distance_out_of_tube(circle_model):
    packet, mesh, model = circle_model
    with pytest.raises(OutOfTubeError):
        mfin_distance(model, np.array([0.2, 0.2]))


def test_section_model_reports(circle_model):
    packet, mesh, model = circle_model
    assert isinstance(model, SectionModel)
    assert len(model.sections) == packet.size
    empties = sum(1 for s in model.sections if s.is_empty)
    assert empties == 0
