import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bulkiface.diagnostics import RelEntropyTruncation, default_anchors
from bulkiface.errors import DomainError, GeometryError
from bulkiface.fixtures import corrupted_trajectory
from bulkiface.geometry import MINUS, PLUS, reflection_map
from bulkiface.renormalisation import (
    Constant,
    Coordinate,
    HighLevelShape,
    ProjectionShape,
    ProjectionTruncation,
    ReducedProjectionShape,
    ScaffoldShape,
    SpaceTimeBump,
    decay_scaling,
    default_interface_psis,
    default_outer_psis,
    plain_weak_residual,
    renormalised_residual_interface,
    renormalised_residual_outer,
    verify_projection_properties,
    xi_E,
)
from bulkiface.solver import load_scenario, run
from bulkiface.suites import plain_equivalence, residual_battery


@pytest.fixture(scope="module")
def traj():
    sc = load_scenario("flat_linear", ["resolution=8", "solver.dt_init=4e-3", "solver.t_end=0.25"])
    return run(sc, every_step=True)


@pytest.fixture(scope="module")
def rmap(traj):
    geo = traj.scenario.geometry
    anchors, radii = default_anchors(geo)
    k = len(anchors) // 2
    return reflection_map(geo, anchors[k], radii[k])


# ---------------------------------------------------------------- xi_E


@given(arrays(float, 4, elements=st.floats(0, 1)), st.floats(1, 100))
def test_xi_E_identity_below_level(v, E):
    u = v / max(v.sum(), 1e-300) * E * min(v.sum(), 1.0)
    tr = ProjectionTruncation(E, 2)
    for j in range(1, 5):
        val, grad, hess = xi_E(tr, j, u)
        assert val == u[j - 1]
        # at sum u == E the cutoff argument can round one ulp above zero
        np.testing.assert_allclose(grad, np.eye(4)[j - 1], rtol=0, atol=1e-12)
        assert np.abs(hess).max() <= 1e-12


def test_xi_E_plateau_far_above():
    tr = ProjectionTruncation(4.0, 2)
    u = np.array([[8.0, 0.0, 0.0, 0.0], [5.0, 5.0, 5.0, 5.0]])
    for j in range(1, 5):
        val, grad, _ = xi_E(tr, j, u)
        np.testing.assert_array_equal(val, 12.0)
        assert not grad.any()


def test_xi_E_derivatives_match_finite_differences(rng):
    tr = ProjectionTruncation(2.0, 2)
    u = rng.dirichlet(np.ones(4), 50) * rng.uniform(2.1, 3.9, (50, 1))
    h = 1e-6
    for j in range(1, 5):
        _, g, H = xi_E(tr, j, u)
        for k in range(4):
            e = np.zeros(4)
            e[k] = h
            vp, gp, _ = xi_E(tr, j, u + e)
            vm, gm, _ = xi_E(tr, j, u - e)
            np.testing.assert_allclose(g[:, k], (vp - vm) / (2 * h), atol=1e-7)
            np.testing.assert_allclose(H[:, :, k], (gp - gm) / (2 * h), atol=1e-6)


def test_xi_E_argument_checks():
    tr = ProjectionTruncation(2.0, 2)
    with pytest.raises(DomainError):
        xi_E(tr, 1, np.array([-1.0, 0, 0, 0]))
    with pytest.raises(IndexError):
        xi_E(tr, 5, np.zeros(4))
    with pytest.raises(ValueError):
        xi_E(tr, 1, np.zeros(3))
    with pytest.raises(ValueError):
        ProjectionTruncation(0.5, 2)


def test_projection_properties_and_decay():
    rep = verify_projection_properties()
    assert rep["ok"], rep
    assert rep["exact_ok"]
    dec = decay_scaling(2)
    assert dec["ok"], dec
    with pytest.raises(ValueError):
        verify_projection_properties((4.0, 2.0, 8.0))


# --------------------------------------------------------------- shapes


@pytest.mark.parametrize("shape", [
    ScaffoldShape(RelEntropyTruncation(2.0, 2.0), 1),
    ProjectionShape(ProjectionTruncation(1.0, 2), 2),
    HighLevelShape(RelEntropyTruncation(2.0, 3.0)),
    2.0 * Coordinate(0) + Constant(3.0),
])
def test_shape_gradients(shape, rng):
    x = rng.uniform(0, 3, (40, 4))
    h = 1e-6
    g = shape.grad(x)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        np.testing.assert_allclose(g[:, k], (shape.value(x + e) - shape.value(x - e)) / (2 * h), atol=1e-6)


# ------------------------------------------------------------ residuals


def test_constant_shape_has_zero_residual(traj, rmap):
    # d/dt psi integrates exactly against a time-constant state function
    for psi in default_interface_psis(rmap):
        assert abs(renormalised_residual_interface(traj, Constant(1.0), rmap, psi)) < 1e-13
    side, psi = default_outer_psis(traj.scenario.geometry)[0]
    assert abs(renormalised_residual_outer(traj, Constant(2.0), psi, side)) < 1e-13


def test_high_level_shape_vanishes(traj, rmap):
    shape = HighLevelShape(RelEntropyTruncation(1e3, 2.0))
    for psi in default_interface_psis(rmap):
        assert renormalised_residual_interface(traj, shape, rmap, psi, MINUS) == 0.0


def test_residual_is_linear_in_shape(traj, rmap):
    a = ScaffoldShape(RelEntropyTruncation(2.0, 2.0), 0)
    b = ProjectionShape(ProjectionTruncation(1.0, 2), 3)
    psi = default_interface_psis(rmap)[2]
    ra = renormalised_residual_interface(traj, a, rmap, psi)
    rb = renormalised_residual_interface(traj, b, rmap, psi)
    rab = renormalised_residual_interface(traj, 3.0 * a + b, rmap, psi)
    assert rab == pytest.approx(3 * ra + rb, rel=1e-12, abs=1e-15)


def test_coordinate_matches_plain_outer(traj):
    for side, psi in default_outer_psis(traj.scenario.geometry):
        for k in range(2):
            r = renormalised_residual_outer(traj, Coordinate(k), psi, side)
            assert r == pytest.approx(plain_weak_residual(traj, k, psi, side), rel=1e-12, abs=1e-15)


def test_plain_equivalence_below_plateau(traj):
    eq = plain_equivalence(traj)
    assert eq["max_gap"] <= 1e-12
    with pytest.raises(ValueError):
        plain_equivalence(traj, E=1.0)


def test_reduced_projection_identity(traj):
    side, psi = default_outer_psis(traj.scenario.geometry)[1]
    a = renormalised_residual_outer(traj, ReducedProjectionShape(100.0, 1), psi, side)
    assert a == pytest.approx(plain_weak_residual(traj, 1, psi, side), rel=1e-12, abs=1e-15)


def test_outer_support_checks(traj):
    geo = traj.scenario.geometry
    on_gamma = np.asarray(geo.interface_line.interpolate(0.5, normalized=True).coords[0])
    with pytest.raises(DomainError):
        renormalised_residual_outer(traj, Coordinate(0), SpaceTimeBump(on_gamma, 0.1), PLUS)
    side, psi = default_outer_psis(geo)[0]
    with pytest.raises(DomainError):
        renormalised_residual_outer(traj, Coordinate(0), psi, -side)


def test_interface_support_must_fit(traj, rmap):
    big = SpaceTimeBump(rmap.anchor, 10.0)
    with pytest.raises(GeometryError):
        renormalised_residual_interface(traj, Coordinate(0), rmap, big)


def test_battery_records(traj):
    recs = residual_battery(traj)
    kinds = {r["kind"] for r in recs}
    assert kinds == {"interface", "outer"}
    assert len({r["test_id"] for r in recs}) == len(recs)
    assert all(np.isfinite(r["residual"]) for r in recs)


def test_corrupted_final_snapshot_is_detected():
    sc = load_scenario("flat_linear", ["resolution=16", "solver.dt_init=1e-3", "solver.t_end=0.25"])
    tr = run(sc, every_step=True)
    good = max(abs(r["residual"]) for r in residual_battery(tr))
    bad = max(abs(r["residual"]) for r in residual_battery(corrupted_trajectory(tr)))
    assert bad > 10 * good
