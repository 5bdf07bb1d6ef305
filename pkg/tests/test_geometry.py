import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bulkiface.errors import CoverageError, DomainError, GeometryError
from bulkiface.geometry import (
    MINUS,
    PLUS,
    TEMPLATES,
    build_geometry,
    build_mesh,
    extend_field,
    load_geometry,
    partition_of_unity,
    reflected_partners,
    reflection_map,
    verify_reflection,
)


@pytest.fixture(scope="module")
def flat():
    return build_geometry("flat_symmetric")


@pytest.fixture(scope="module")
def triple():
    return build_geometry("triple_junction")


def test_flat_mesh_counts(flat):
    mesh = build_mesh(flat, 4)
    assert len(mesh.cells(PLUS)) == 16 and len(mesh.cells(MINUS)) == 16
    assert len(mesh.iface_plus) == 4
    assert mesh.iface_length.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_mesh_volumes_match_polygon_areas(name):
    geo = build_geometry(name)
    if name == "triple_junction_skew":
        with pytest.raises(GeometryError):
            build_mesh(geo, 4)
        return
    mesh = build_mesh(geo, 8)
    for side in (PLUS, MINUS):
        assert mesh.volumes[mesh.cells(side)].sum() == pytest.approx(geo.polygon(side).area, rel=1e-14)
    assert mesh.iface_length.sum() == pytest.approx(geo.interface_length)


def test_triple_junction_interface_is_half(triple):
    mesh = build_mesh(triple, 4)
    assert len(mesh.iface_plus) == 2
    # the upper half of x = 0 is an outer wall on both sides
    assert np.all(mesh.iface_midpoint[:, 1] < 0.5)


@pytest.mark.parametrize("res", [0, 1, 2.5])
def test_bad_resolution(flat, res):
    with pytest.raises(GeometryError):
        build_mesh(flat, res)


def test_unknown_template():
    with pytest.raises(GeometryError):
        build_geometry("moebius")


def test_overlapping_compartments_rejected():
    d = dict(TEMPLATES["flat_symmetric"])
    d["compartment_minus"] = [[-1.0, 0.0], [0.5, 0.0], [0.5, 1.0], [-1.0, 1.0]]
    with pytest.raises(GeometryError):
        build_geometry(d)


def test_load_geometry_roundtrip(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps(TEMPLATES["flat_symmetric"]))
    g = load_geometry(p)
    assert g.interface_length == pytest.approx(1.0)


def test_mesh_csv(tmp_path, flat):
    mesh = build_mesh(flat, 2)
    mesh.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "cell_id,compartment,center_x,center_y,volume"
    assert len(lines) == 1 + mesh.n_cells


def test_flat_reflection_point(flat):
    m = reflection_map(flat, (0.0, 0.5), 0.4)
    np.testing.assert_array_equal(m.apply([[0.3, 0.5]]), [[-0.3, 0.5]])


def test_apply_outside_neighbourhood(flat):
    m = reflection_map(flat, (0.0, 0.5), 0.4)
    with pytest.raises(DomainError):
        m.apply([[0.9, 0.9]])


def test_radius_too_large(triple):
    with pytest.raises(GeometryError, match="smaller radius"):
        reflection_map(triple, (0.0, 0.5), 0.5)


@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_reflection_defects(name):
    geo = build_geometry(name)
    m = reflection_map(geo, (0.0, 0.5) if name != "flat_symmetric" else (0.0, 0.5), 0.4)
    rep = verify_reflection(m, 2000, rng=np.random.default_rng(1))
    assert rep["involution_defect"] <= 1e-10
    assert rep["gamma_fixed_defect"] <= 1e-10
    assert rep["det_defect"] <= 1e-6
    assert rep["boundary_defect"] <= 1e-8


def test_mismatched_eta_flagged(triple):
    m = reflection_map(triple, (0.0, 0.5), 0.4)
    bad = dataclasses.replace(m, eta1=m.eta1.shifted(0.01))
    assert verify_reflection(bad, 1000)["gamma_fixed_defect"] > 1e-3


@given(st.floats(-0.35, 0.35), st.floats(0.01, 0.35), st.sampled_from([PLUS, MINUS]))
def test_hypograph_involution_property(y, depth, side):
    geo = build_geometry("triple_junction_skew")
    m = reflection_map(geo, (0.0, 0.5), 0.4)
    eta = m.eta2 if side == PLUS else m.eta1
    x = m._from_frame(np.array([[y, float(eta(y)) - depth]]))
    if side == MINUS:
        x = geo.reflect(x)
    fwd = m.plus_to_minus if side == PLUS else m.minus_to_plus
    back = m.minus_to_plus if side == PLUS else m.plus_to_minus
    img = fwd(x)
    assert m.side_of(img)[0] == -side
    np.testing.assert_allclose(back(img), x, atol=1e-12)


def test_partners_and_extension(flat):
    mesh = build_mesh(flat, 8)
    m = reflection_map(flat, (0.0, 0.5), 0.4)
    partner = reflected_partners(m, mesh)
    inside = partner >= 0
    # mirror cells of the symmetric template are exact reflections
    np.testing.assert_allclose(mesh.centers[partner[inside]], mesh.centers[inside] * [-1, 1], atol=1e-14)
    ext = extend_field(mesh.centers[:, 0], m, mesh, partner)
    np.testing.assert_allclose(ext.values[inside], -mesh.centers[inside, 0])
    assert np.isnan(ext.values[~inside]).all()


@pytest.mark.parametrize("name", ["flat_symmetric", "triple_junction"])
def test_partition_of_unity(name, rng):
    geo = build_geometry(name)
    anchors = [[0.0, 0.0], [0.0, 0.25], [0.0, 0.5]] if name != "flat_symmetric" else \
        [[0.0, 1 / 6], [0.0, 0.5], [0.0, 5 / 6]]
    pou = partition_of_unity(geo, anchors, 0.2 if name != "flat_symmetric" else 0.4)
    x = rng.uniform([-1, 0], [1, 1], size=(10_000, 2))
    phi_out, phi = pou.evaluate(x)
    assert np.abs(phi_out + phi.sum(axis=1) - 1).max() <= 1e-12
    assert (phi >= 0).all() and (phi <= 1).all() and (phi_out >= 0).all()
    zs = np.stack([np.zeros(200), np.linspace(0, geo.interface_endpoints[1, 1], 200)], axis=1)
    assert np.abs(pou.evaluate(zs)[0]).max() == 0


def test_coverage_error(triple):
    with pytest.raises(CoverageError) as exc:
        partition_of_unity(triple, [[0.0, 0.5]], 0.3)
    assert len(exc.value.uncovered) > 0
