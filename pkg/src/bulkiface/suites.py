"""Verification suites shared by the command-line front end and the tests.

Every suite returns a JSON-serialisable dict with an ``ok`` flag and the
measured constants.
"""

from __future__ import annotations

import numpy as np

from . import fixtures
from .diagnostics import default_anchors, entropy_inequality_check
from .geometry import (
    MINUS,
    PLUS,
    build_geometry,
    partition_of_unity,
    reflected_partners,
    reflection_map,
    verify_reflection,
)
from .kinetics import (
    gradient_structure_for,
    interface_rate_from_gradient_structure,
    mass_action_rate,
    rate_from_gradient_structure,
    transmission_rate,
    model_from_dict,
    validate_hypotheses,
)
from .renormalisation import (
    ProjectionShape,
    ProjectionTruncation,
    ReducedProjectionShape,
    decay_scaling,
    default_interface_psis,
    default_outer_psis,
    default_xi_shapes,
    default_zeta_shapes,
    plain_weak_residual,
    renormalised_residual_interface,
    renormalised_residual_outer,
    verify_projection_properties,
)
from .solver import BUILTIN_SCENARIOS, builtin_scenario_dict, load_scenario, run

GEOMETRY_TOL = {"involution_defect": 1e-10, "gamma_fixed_defect": 1e-10, "det_defect": 1e-6,
                "boundary_defect": 1e-8, "pou_defect": 1e-12}
REFINEMENT_LEVELS = ((8, 4e-3), (16, 1e-3), (32, 2.5e-4))
MIN_RATIO = 1.5


def _rng(seed):
    return np.random.default_rng(seed)


# --------------------------------------------------------------------- geometry


def _sample_domain(geo, n, rng):
    pts = []
    lo = np.array([-1.0, 0.0])
    hi = np.array([1.0, 1.0])
    for side in (PLUS, MINUS):
        poly = geo.polygon(side)
        minx, miny, maxx, maxy = poly.bounds
        lo, hi = np.minimum(lo, [minx, miny]), np.maximum(hi, [maxx, maxy])
    while sum(len(p) for p in pts) < n:
        x = rng.uniform(lo, hi, size=(n, 2))
        pts.append(x[np.abs(geo.signed_distance(x)) > 0])
    return np.concatenate(pts)[:n]


def geometry_suite(templates=("flat_symmetric", "triple_junction"), n_samples: int = 2000,
                   n_pou: int = 10_000, seed: int = 0, negative_control: bool = False) -> dict:
    """Reflection-map defects at the default anchors and the partition-of-unity identity."""
    rng = _rng(seed)
    out = {"templates": {}, "tolerances": GEOMETRY_TOL}
    ok = True
    for name in templates:
        geo = build_geometry(name)
        anchors, radii = default_anchors(geo)
        worst = {k: 0.0 for k in ("involution_defect", "det_defect", "gamma_fixed_defect", "boundary_defect")}
        for a, r in zip(anchors, radii):
            rep = verify_reflection(reflection_map(geo, a, r), n_samples, rng=rng)
            for k in worst:
                worst[k] = max(worst[k], float(rep[k]))
        pou = partition_of_unity(geo, anchors, radii)
        x = _sample_domain(geo, n_pou, rng)
        phi_out, phi = pou.evaluate(x)
        worst["pou_defect"] = float(np.abs(phi_out + phi.sum(axis=1) - 1.0).max())
        worst["n_anchors"] = len(anchors)
        worst["ok"] = all(worst[k] <= GEOMETRY_TOL[k] for k in GEOMETRY_TOL)
        ok &= worst["ok"]
        out["templates"][name] = worst
    if negative_control:
        geo = build_geometry("triple_junction")
        m = fixtures.mismatched_reflection(reflection_map(geo, (0.0, 0.5), 0.4))
        rep = verify_reflection(m, n_samples, rng=rng)
        flags = {k for k in ("involution_defect", "gamma_fixed_defect", "det_defect")
                 if rep[k] > max(GEOMETRY_TOL[k], 1e-3)}
        out["negative_control"] = {"flags": sorted(flags), "gamma_fixed_defect": rep["gamma_fixed_defect"],
                                   "as_expected": flags == fixtures.EXPECTED_FLAGS["mismatched_reflection"]}
    out["ok"] = bool(ok)
    return out


# --------------------------------------------------------------------- kinetics


def gradient_consistency(model, n_samples: int = 10_000, seed: int = 0) -> dict:
    """Relative error between rates rebuilt from the cosh structure and the direct rates."""
    rng = _rng(seed)
    ent = model.entropy
    gs = gradient_structure_for(model)
    n = ent.n_species
    bulk = 0.0
    for side in (PLUS, MINUS):
        u = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), size=(n_samples, n))) * ent.ref(side)
        a = rate_from_gradient_structure(gs, ent, u, side)
        b = mass_action_rate(model.network, u, side)
        scale = np.maximum(np.abs(b), 1e-300)
        mask = np.abs(b) > 0
        if mask.any():
            bulk = max(bulk, float(np.max(np.abs(a - b)[mask] / scale[mask])))
        bulk = max(bulk, float(np.max(np.abs(a[~mask]))) if (~mask).any() else 0.0)
    up = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), size=(n_samples, n))) * ent.u_ref_plus
    um = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), size=(n_samples, n))) * ent.u_ref_minus
    a = interface_rate_from_gradient_structure(gs, ent, up, um)
    b = transmission_rate(model.transmission, up, um)[0]
    mask = np.abs(b) > 0
    iface = float(np.max(np.abs(a - b)[mask] / np.abs(b)[mask])) if mask.any() else float(np.abs(a).max())
    return {"bulk_relative_error": bulk, "interface_relative_error": iface,
            "interface_checked": bool(gs.interface_terms)}


def builtin_models() -> dict:
    return {name: model_from_dict(builtin_scenario_dict(name)["model"]) for name in BUILTIN_SCENARIOS}


def kinetics_suite(models: dict | None = None, n_samples: int = 10_000, seed: int = 0,
                   negative_control: bool = False, consistency_tol: float = 1e-10) -> dict:
    """Structural hypotheses and cosh-structure consistency for each model."""
    models = builtin_models() if models is None else models
    out = {"scenarios": {}}
    ok = True
    for name, m in models.items():
        rep = validate_hypotheses(m.network, m.transmission, m.entropy, n_samples, rng=_rng(seed))
        gc = gradient_consistency(m, n_samples, seed)
        rep.update(gc)
        rep["ok"] = bool(rep["ok"] and gc["bulk_relative_error"] <= consistency_tol
                         and gc["interface_relative_error"] <= consistency_tol)
        ok &= rep["ok"]
        out["scenarios"][name] = rep
    if negative_control:
        net, ent = fixtures.quasi_positivity_fixture()
        rep = validate_hypotheses(net, None, ent, n_samples, rng=_rng(seed))
        flags = set(rep["flags"])
        out["negative_control"] = {"flags": sorted(flags),
                                   "as_expected": flags == fixtures.EXPECTED_FLAGS["kinetics_quasi_positivity"]}
    out["ok"] = bool(ok)
    return out


# ------------------------------------------------------------------ truncations


def truncation_suite(E_sequence=(4.0, 16.0, 64.0), N_sequence=(2, 4, 8), n: int = 2, seed: int = 0) -> dict:
    v = verify_projection_properties(E_sequence, n, rng=_rng(seed))
    d = decay_scaling(n, N_sequence=N_sequence)
    v_ok = bool(v["exact_ok"] and v["gradient_limit_monotone"] and v["hessian_limit_monotone"]
                and v["weighted_hessian_growth"] < 1.5 and v["gradient_growth"] < 1.5)
    return {"projection": v, "decay": d, "ok": bool(v_ok and d["ok"])}


# ---------------------------------------------------------------- entropy defect


def entropy_refinement(name: str, levels=REFINEMENT_LEVELS, t_end: float | None = None,
                       overrides=()) -> dict:
    """Max positive entropy defect along a ``(h, dt) -> (h/2, dt/4)`` refinement.

    Passes when every level ratio is at least ``MIN_RATIO`` or the defect is
    nonpositive at every level (exact discrete dissipation).
    """
    series = []
    for res, dt in levels:
        ov = [f"resolution={res}", f"solver.dt_init={dt}", *overrides]
        if t_end is not None:
            ov.append(f"solver.t_end={t_end}")
        sc = load_scenario(name, ov)
        chk = entropy_inequality_check(run(sc))
        series.append({"resolution": res, "dt": dt, "max_positive_defect": chk["max_positive_defect"],
                       "min_dissipation": chk["min_dissipation"]})
    d = [s["max_positive_defect"] for s in series]
    ratios = [a / b if b > 0 else (np.inf if a > 0 else None) for a, b in zip(d, d[1:])]
    exact = all(x <= 0 for x in d)
    ok = exact or all(r is not None and r >= MIN_RATIO for r in ratios)
    return {"scenario": _label(name), "series": series, "ratios": ratios, "exact": exact, "ok": bool(ok)}


def entropy_negative_control(name: str = "flat_linear", resolution: int = 8, t_end: float = 0.2) -> dict:
    sc = load_scenario(name, [f"resolution={resolution}", f"solver.t_end={t_end}"])
    chk = entropy_inequality_check(run(fixtures.entropy_violating_scenario(sc)))
    flags = {"entropy_defect"} if chk["flagged"] else set()
    return {"flags": sorted(flags), "max_positive_defect": chk["max_positive_defect"],
            "as_expected": flags == fixtures.EXPECTED_FLAGS["entropy_violating_rate"]}


# -------------------------------------------------------------- eps consistency


def epsilon_consistency(name: str = "flat_polynomial", epsilons=(1.0, 0.5, 0.25, 0.125), overrides=()) -> dict:
    """Sup-distance between the ``eps`` and ``eps/2`` trajectories."""
    cache = {}

    def traj(e):
        if e not in cache:
            cache[e] = run(load_scenario(name, [f"solver.epsilon={e}", *overrides]))
        return cache[e]

    dist = []
    for e in epsilons:
        a, b = traj(e), traj(e / 2)
        if a.snapshots.shape != b.snapshots.shape:
            raise ValueError("snapshot grids differ between epsilon runs")
        dist.append(float(np.abs(a.snapshots - b.snapshots).max()))
    ok = all(x > y for x, y in zip(dist, dist[1:]))
    return {"scenario": _label(name), "epsilon": list(epsilons), "distance": dist, "ok": bool(ok)}


# ------------------------------------------------------------------- residuals


def _shape_E(shape):
    if hasattr(shape, "E"):
        return float(shape.E)
    return float(shape.trunc.E)


def _battery_maps(sc, anchor, radius):
    geo = sc.geometry
    if anchor is None:
        anchors, radii = default_anchors(geo)
    else:
        anchors, radii = [anchor], [radius]
    out = []
    for a, r in zip(anchors, radii):
        rm = reflection_map(geo, a, r)
        out.append((rm, reflected_partners(rm, sc.mesh)))
    return out


def residual_battery(traj, anchor=None, radius=None) -> list:
    """Evaluate the default battery on one trajectory.

    Interface shapes are tested at every default anchor unless ``anchor`` is
    given. Returns records ``{test_id, kind, anchor, E, residual}``.
    """
    sc = traj.scenario
    geo, n = sc.geometry, sc.n_species
    out = []
    for a, (rm, partners) in enumerate(_battery_maps(sc, anchor, radius)):
        for i, xi in enumerate(default_xi_shapes(n)):
            for j, psi in enumerate(default_interface_psis(rm)):
                for side in (PLUS, MINUS):
                    res = renormalised_residual_interface(traj, xi, rm, psi, side, partners)
                    out.append({"test_id": f"interface/a{a}/{'+' if side > 0 else '-'}/xi{i}/psi{j}",
                                "kind": "interface", "anchor": [float(c) for c in rm.anchor],
                                "E": _shape_E(xi), "residual": res})
    outer = default_outer_psis(geo)
    for i, zeta in enumerate(default_zeta_shapes(n)):
        for j, (side, psi) in enumerate(outer):
            res = renormalised_residual_outer(traj, zeta, psi, side)
            out.append({"test_id": f"outer/{'+' if side > 0 else '-'}/zeta{i}/psi{j}", "kind": "outer",
                        "anchor": [float(a) for a in psi.center], "E": _shape_E(zeta), "residual": res})
    return out


def plain_equivalence(traj, E: float = 64.0, anchor=None, radius=None) -> dict:
    """Largest gap between renormalised and plain weak residuals below the plateau.

    Needs ``sum u < E`` on the whole trajectory so the projection truncation is
    the identity on the visited states.
    """
    sc = traj.scenario
    geo, n = sc.geometry, sc.n_species
    peak = float(traj.snapshots.sum(axis=-1).max())
    # interface shapes see (u, u~): both halves below E/2 keep the sum below E
    if 2 * peak >= E:
        raise ValueError(f"densities reach the truncation level (peak {peak:.3g}, E {E})")
    gap = 0.0
    for rm, partners in _battery_maps(sc, anchor, radius):
        for psi in default_interface_psis(rm):
            for side in (PLUS, MINUS):
                for k in range(2 * n):
                    a = renormalised_residual_interface(traj, ProjectionShape(ProjectionTruncation(E, n), k),
                                                        rm, psi, side, partners)
                    if k < n:
                        b = plain_weak_residual(traj, k, psi, side)
                    else:
                        b = plain_weak_residual(traj, k - n, psi, side, composed=partners)
                    gap = max(gap, abs(a - b))
    for side, psi in default_outer_psis(geo):
        for k in range(n):
            a = renormalised_residual_outer(traj, ReducedProjectionShape(E, k), psi, side)
            gap = max(gap, abs(a - plain_weak_residual(traj, k, psi, side)))
    return {"E": E, "peak_density": peak, "max_gap": gap}


def _label(source):
    return source.get("name", "custom") if isinstance(source, dict) else str(source)


def _fitted_order(h, r):
    h, r = np.asarray(h, float), np.abs(np.asarray(r, float))
    if np.any(r <= 0) or np.ptp(np.log(h)) == 0:
        return None
    return float(np.polyfit(np.log(h), np.log(r), 1)[0])


def residual_refinement(name: str = "flat_linear", levels=REFINEMENT_LEVELS, t_end: float = 0.25,
                        overrides=(), negative_control: bool = False, equivalence: bool = True) -> dict:
    """Default residual battery along a refinement series.

    The refinement verdict uses the largest absolute residual over each
    operator's battery.
    """
    records = {}
    summary = []
    eq = None
    for li, (res, dt) in enumerate(levels):
        sc = load_scenario(name, [f"resolution={res}", f"solver.dt_init={dt}", f"solver.t_end={t_end}", *overrides])
        tr = run(sc, every_step=True)
        batt = residual_battery(tr)
        h = sc.mesh.h
        for rec in batt:
            r = records.setdefault(rec["test_id"], {k: rec[k] for k in ("test_id", "kind", "anchor", "E")}
                                   | {"refinement_series": []})
            r["refinement_series"].append({"h": h, "dt": dt, "residual": rec["residual"]})
        lvl = {"resolution": res, "h": h, "dt": dt}
        for kind in ("interface", "outer"):
            lvl[f"max_{kind}"] = max(abs(b["residual"]) for b in batt if b["kind"] == kind)
        summary.append(lvl)
        if li == 0 and equivalence:
            eq = plain_equivalence(tr)
        if li == len(levels) - 1 and negative_control:
            # baseline on the finest level, where the quadrature error is smallest
            bad = residual_battery(fixtures.corrupted_trajectory(tr))
            worst = {k: max(abs(b["residual"]) for b in bad if b["kind"] == k) for k in ("interface", "outer")}
            jump = min(worst[k] / max(lvl[f"max_{k}"], 1e-300) for k in worst)
            flags = {"residual_jump"} if jump > 10 else set()
            neg = {"flags": sorted(flags), "jump": jump,
                   "as_expected": flags == fixtures.EXPECTED_FLAGS["corrupted_snapshot"]}
    tests = []
    for r in records.values():
        ser = r["refinement_series"]
        r["residual"] = ser[-1]["residual"]
        r["fitted_order"] = _fitted_order([s["h"] for s in ser], [s["residual"] for s in ser])
        tests.append(r)
    ratios = {k: [a[f"max_{k}"] / b[f"max_{k}"] for a, b in zip(summary, summary[1:])]
              for k in ("interface", "outer")}
    ok = all(x >= MIN_RATIO for v in ratios.values() for x in v)
    out = {"scenario": _label(name), "levels": summary, "ratios": ratios, "tests": tests, "ok": bool(ok)}
    if eq is not None:
        eq["ok"] = eq["max_gap"] <= 1e-12
        out["plain_equivalence"] = eq
        out["ok"] = bool(ok and eq["ok"])
    if negative_control:
        out["negative_control"] = neg
    return out


# ------------------------------------------------------------------ coercivity


def _perturbation_battery(U, vol, n_perturbations, rng):
    """Relative, log-normal, spike and scaling perturbations of ``U`` in turn."""
    m, n = U.shape
    for k in range(n_perturbations):
        kind = k % 4
        if kind == 0:
            a = 10 ** rng.uniform(-3, -0.05)
            u = U * (1 + a * rng.uniform(-1, 1, size=U.shape))
        elif kind == 1:
            u = U * np.exp(rng.uniform(0.01, 2.0) * rng.standard_normal(U.shape))
        elif kind == 2:
            u = U.copy()
            cells = rng.choice(m, size=max(1, m // 20), replace=False)
            u[cells] *= 10 ** rng.uniform(1, 3, size=(len(cells), 1))
        else:
            u = U * 10 ** rng.uniform(-2, 1)
        yield ("relative", "lognormal", "spike", "scaling")[kind], u


def sb_fixture(ctx, U, E: float, spike: float | None = None):
    """Reflected-spike state: ``u = U`` except a huge value on the partners
    of cells near the first anchor, so those cells have small ``|u|_1`` but
    a truncation below one."""
    mesh = ctx.scenario.mesh
    spike = E**2 if spike is None else spike
    active = np.flatnonzero((ctx.phi[:, 0] > 0.5) & (mesh.compartment == PLUS))
    u = U.copy()
    u[ctx.partners[0, active]] = spike
    return u, active


def coercivity_suite(name: str = "flat_linear", n_perturbations: int = 200, seed: int = 0) -> dict:
    """Sign and Hellinger coercivity of the truncated relative entropy."""
    from .diagnostics import RelEntropyContext, coercivity_check, default_truncation, relative_entropy

    sc = load_scenario(name)
    U = sc.initial
    n = sc.n_species
    vol = sc.mesh.volumes
    trunc = default_truncation(U, n)
    ctx = RelEntropyContext.build(sc)
    degenerate = relative_entropy(U, U, ctx, trunc).H_rel
    rows = []
    for kind, u in _perturbation_battery(U, vol, n_perturbations, _rng(seed)):
        st = relative_entropy(u, U, ctx, trunc)
        chk = coercivity_check(st, u, U, vol)
        rows.append({"kind": kind, "H_rel": st.H_rel, "hellinger": chk["hellinger"],
                     "ratio": chk["ratio_hellinger"], "frac_Sb": st.fractions(vol)["frac_Sb"]})
    ratios = np.array([r["ratio"] for r in rows])
    u_b, cells = sb_fixture(ctx, U, trunc.E)
    st = relative_entropy(u_b, U, ctx, trunc)
    chk = coercivity_check(st, u_b, U, vol)
    sb = {"n_cells": len(cells), "classified_b": bool(np.all(st.classification[cells] == "b")),
          "min_h_rel_on_Sb": float(st.h_rel[cells].min()), "H_rel": st.H_rel, "ratio_Sb": chk["ratio_Sb"]}
    sb["ok"] = bool(sb["classified_b"] and st.H_rel >= 0 and (chk["ratio_Sb"] or 0) > 0)
    c_min = float(ratios.min())
    ok = (degenerate <= 1e-12 and min(r["H_rel"] for r in rows) >= 0 and c_min > 0 and sb["ok"])
    return {"scenario": _label(name), "E": trunc.E, "N": trunc.N, "degenerate_H_rel": degenerate,
            "min_H_rel": float(min(r["H_rel"] for r in rows)), "min_ratio_hellinger": c_min,
            "perturbations": rows, "sb_fixture": sb, "ok": bool(ok)}
