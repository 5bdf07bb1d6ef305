import csv

import numpy as np
import pytest
import scipy.sparse as sp

from bulkiface.diagnostics import entropy_inequality_check
from bulkiface.errors import ConfigError, DomainError, SolverError
from bulkiface.geometry import MINUS, PLUS
from bulkiface.solver import (
    BUILTIN_SCENARIOS,
    apply_overrides,
    assemble_diffusion,
    explicit_sources,
    interface_trace,
    load_scenario,
    run,
    scenario_from_dict,
    step,
    stiffness,
    transmissibilities,
)

TWO_CELL = {
    "name": "two_cell",
    "geometry": {
        "compartment_plus": [[0, 0], [0.5, 0], [0.5, 0.5], [0, 0.5]],
        "compartment_minus": [[-0.5, 0], [0, 0], [0, 0.5], [-0.5, 0.5]],
        "interface": [[0, 0], [0, 0.5]],
        "separating_curve": [[0, -1], [0, 2]],
    },
    "resolution": 2,
    "model": {"n_species": 1, "transmission_variant": "linear", "k_i": [1.5]},
    "initial": {"plus": {"kind": "constant", "base": [2.0]}, "minus": {"kind": "constant", "base": [0.5]}},
    "solver": {"epsilon": 0.05, "dt_init": 0.01, "t_end": 0.5, "output_every": None},
}


def test_two_cell_matches_recurrence():
    sc = scenario_from_dict(TWO_CELL)
    assert sc.mesh.n_cells == 2
    traj = run(sc)
    # independent oracle: explicit Euler for the damped exchange law, diffusion is void
    k, eps, w = 1.5, 0.05, 0.5 / 0.25
    up, um = 2.0, 0.5
    ip = int(sc.mesh.cells(PLUS)[0])
    im = int(sc.mesh.cells(MINUS)[0])
    for t, dt in zip(traj.ledger["t"][1:], traj.ledger["dt"][1:]):
        r = k * (up - um)
        r /= 1 + eps * abs(r)
        up, um = up - dt * w * r, um + dt * w * r
    np.testing.assert_allclose([traj.final[ip, 0], traj.final[im, 0]], [up, um], rtol=1e-13)


def test_two_cell_converges_to_ode():
    # eps small: d(u+ - u-)/dt = -2 w k (u+ - u-)
    d = dict(TWO_CELL, solver=dict(TWO_CELL["solver"], epsilon=1e-6, dt_init=1e-3, t_end=0.2))
    sc = scenario_from_dict(d)
    traj = run(sc)
    ip, im = int(sc.mesh.cells(PLUS)[0]), int(sc.mesh.cells(MINUS)[0])
    gap = traj.final[ip, 0] - traj.final[im, 0]
    exact = 1.5 * np.exp(-2 * 2.0 * 1.5 * 0.2)
    assert abs(gap - exact) < 5e-3 * exact


def test_five_point_stencil():
    sc = load_scenario("flat_linear", ["resolution=4"])
    mesh = sc.mesh
    a = np.full((mesh.n_cells, 2), 0.7)
    L = assemble_diffusion(mesh, a).toarray()
    h = mesh.h
    c = mesh.index[1 + 4, 1]  # an interior cell of the plus block (x index offset by the minus block)
    nb = [mesh.index[i, j] for i, j in ((1 + 4 + 1, 1), (1 + 4 - 1, 1), (1 + 4, 2), (1 + 4, 0))]
    assert L[c, c] == pytest.approx(-4 * 0.7 / h**2)
    for n in nb:
        assert L[c, n] == pytest.approx(0.7 / h**2)
    assert np.count_nonzero(L[c]) == 5


def test_harmonic_mean_transmissibility():
    sc = load_scenario("flat_linear", ["resolution=4"])
    mesh = sc.mesh
    a = np.ones((mesh.n_cells, 2))
    a[mesh.cells(PLUS), 0] = 3.0
    T = transmissibilities(mesh, a)
    ax_x = mesh.interior_axis == 0
    plus_face = mesh.compartment[mesh.interior_cells[:, 0]] == PLUS
    np.testing.assert_allclose(T[ax_x & plus_face], 3.0)
    np.testing.assert_allclose(T[~ax_x], 1.0)
    a[mesh.interior_cells[0, 0], mesh.interior_axis[0]] = 2.0
    a[mesh.interior_cells[0, 1], mesh.interior_axis[0]] = 6.0
    assert transmissibilities(mesh, a)[0] == pytest.approx(2 * 2 * 6 / 8)


def test_no_diffusion_across_interface():
    sc = load_scenario("flat_linear", ["resolution=4"])
    mesh = sc.mesh
    K = stiffness(mesh, transmissibilities(mesh, np.ones((mesh.n_cells, 2)))).toarray()
    assert np.all(K[mesh.iface_plus, mesh.iface_minus] == 0)
    np.testing.assert_allclose(K.sum(axis=1), 0, atol=1e-12)
    assert sp.issparse(assemble_diffusion(mesh, np.ones(2)))


def test_rejects_nondiagonal_tensor():
    sc = load_scenario("flat_linear", ["resolution=2"])
    with pytest.raises(DomainError):
        transmissibilities(sc.mesh, np.array([[1.0, 0.2], [0.2, 1.0]]))


def test_traces_of_continuous_field():
    sc = load_scenario("flat_linear", ["resolution=8"])
    u = np.sin(3 * sc.mesh.centers[:, 1])[:, None]
    np.testing.assert_array_equal(interface_trace(u, sc.mesh, PLUS), interface_trace(u, sc.mesh, MINUS))


def test_interface_source_direction():
    sc = load_scenario("flat_linear", ["resolution=4"])
    u = np.ones((sc.mesh.n_cells, 2))
    u[sc.mesh.cells(PLUS)] = 2.0
    src, bulk, r = explicit_sources(u, sc)
    assert np.all(bulk == 0)
    assert np.all(src[sc.mesh.iface_plus] < 0) and np.all(src[sc.mesh.iface_minus] > 0)
    np.testing.assert_allclose(sc.mesh.volumes @ src, 0, atol=1e-14)


def test_step_validation(small_linear):
    with pytest.raises(DomainError):
        step(small_linear.initial, small_linear, 0.0)
    with pytest.raises(DomainError):
        step(-small_linear.initial, small_linear, 1e-3)


@pytest.mark.parametrize("name", BUILTIN_SCENARIOS)
def test_builtin_runs_conserve_and_dissipate(name):
    sc = load_scenario(name, ["resolution=8", "solver.t_end=0.2"])
    traj = run(sc)
    m = traj.species_mass()
    if name in ("flat_linear", "triple_junction_linear"):
        np.testing.assert_allclose(m[-1], m[0], rtol=1e-12)
    # conserved combinations survive reactions as well
    w = sc.model.network.conserved_directions()
    np.testing.assert_allclose(m @ w.T, np.broadcast_to(m[0] @ w.T, (len(m), len(w))), rtol=1e-11)
    assert traj.cumulative_floored <= 1e-8 * m[0].sum()
    assert np.all(np.diff(traj.ledger["H"]) <= 1e-12)
    assert entropy_inequality_check(traj)["max_positive_defect"] < 5e-3


def test_output_cadence(small_linear):
    traj = run(small_linear)
    np.testing.assert_allclose(traj.times, np.arange(0, 0.2 + 1e-12, 0.05), atol=1e-12)
    assert traj.times[-1] == 0.2


def test_every_step_storage(small_linear):
    traj = run(small_linear, every_step=True, t_end=0.02)
    assert len(traj.times) == len(traj.ledger["t"])


def test_direct_and_cg_agree():
    a = run(load_scenario("flat_polynomial", ["resolution=8", "solver.t_end=0.1"]))
    b = run(load_scenario("flat_polynomial", ["resolution=8", "solver.t_end=0.1", "solver.linear_solver=\"direct\""]))
    np.testing.assert_allclose(a.final, b.final, rtol=1e-8, atol=1e-10)


def test_deterministic(small_polynomial):
    a, b = run(small_polynomial), run(small_polynomial)
    np.testing.assert_array_equal(a.snapshots, b.snapshots)


def test_dt_min_underflow():
    sc = load_scenario("flat_linear", ["resolution=4", "solver.dt_init=1.0", "solver.dt_min=0.9"])
    with pytest.raises(SolverError) as exc:
        run(sc)
    assert exc.value.diagnostic["dt_min"] == 0.9


def test_controller_halves_on_stiff_rates():
    sc = load_scenario("flat_polynomial", ["resolution=4", "solver.t_end=0.05", "solver.epsilon=0.001",
                                           "model.k_plus=[400.0]", "model.k_minus=[200.0]"])
    traj = run(sc, every_step=True)
    dt = traj.ledger["dt"][1:-1]
    assert dt.max() <= sc.settings.dt_init * (1 + 1e-12)
    assert dt.min() <= sc.settings.dt_init / 2
    # the 20% cap holds on every accepted step for the losses
    for k in range(len(traj.times) - 1):
        src, _, _ = explicit_sources(traj.snapshots[k], sc)
        loss = -traj.ledger["dt"][k + 1] * src
        assert np.all(loss <= 0.2 * traj.snapshots[k] + 1e-14)


def test_initial_clipping():
    sc = load_scenario("flat_linear", ["resolution=4", "solver.epsilon=0.5", "solver.t_end=0.002"])
    traj = run(sc, u0=np.full((sc.mesh.n_cells, 2), 5.0))
    assert traj.snapshots[0].max() == 2.0


def test_overrides():
    d = apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c=[1, 2]", "x.y=text"])
    assert d == {"a": {"b": 2, "c": [1, 2]}, "x": {"y": "text"}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"a": 1}, ["a.b=1"])


@pytest.mark.parametrize("source,overrides", [
    ("no/such/file.json", []),
    ("builtin:unknown", []),
    ("flat_linear", ["solver.bogus=1"]),
    ("flat_linear", ["solver.epsilon=2"]),
    ("flat_linear", ["resolution=1"]),
    ("flat_linear", ["initial.plus.kind=\"spiral\""]),
])
def test_config_errors(source, overrides):
    with pytest.raises(ConfigError):
        load_scenario(source, overrides)


def test_csv_writers(tmp_path, small_linear):
    traj = run(small_linear, t_end=0.05)
    traj.write_ledger(tmp_path / "ledger.csv")
    paths = traj.write_snapshots(tmp_path / "snaps")
    with open(tmp_path / "ledger.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["t", "dt", "mass_1_plus", "mass_2_plus", "mass_1_minus", "mass_2_minus",
                      "H", "D_bulk", "D_int", "floored_mass"]
    with open(paths[-1]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["cell_id", "u_1", "u_2"]
    np.testing.assert_array_equal(np.array(rows[1:], float)[:, 1:], traj.final)
