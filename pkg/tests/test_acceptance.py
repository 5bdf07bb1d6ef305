"""Acceptance criteria at their stated tolerances and runtime budgets.

Each test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
pytest terminal summary. The module can also be run directly:
``python tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from bulkiface.diagnostics import (
    RelEntropyContext,
    RelEntropyTruncation,
    relative_entropy,
    smooth_perturbation,
    stability_experiment,
)
from bulkiface.kinetics import validate_hypotheses
from bulkiface.solver import BUILTIN_SCENARIOS, load_scenario, run
from bulkiface.suites import (
    builtin_models,
    coercivity_suite,
    entropy_refinement,
    epsilon_consistency,
    geometry_suite,
    gradient_consistency,
    residual_refinement,
    truncation_suite,
)

RESULTS = []


def _report(num, title, ok, elapsed, budget, detail=""):
    in_time = elapsed < budget
    line = (f"[{num:2d}] {'PASS' if ok and in_time else 'FAIL'}  {title}  "
            f"({elapsed:.1f}s / {budget:.0f}s){'  ' + detail if detail else ''}")
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def test_01_hypothesis_validators():
    t0 = time.perf_counter()
    worst = {"f_dissipation_violation": 0.0, "r_dissipation_violation": 0.0, "mass_preservation_defect": 0.0}
    for m in builtin_models().values():
        rep = validate_hypotheses(m.network, m.transmission, m.entropy, 10_000, rng=np.random.default_rng(0))
        for k in worst:
            worst[k] = max(worst[k], rep[k])
    ok = (worst["f_dissipation_violation"] <= 1e-12 and worst["r_dissipation_violation"] <= 1e-12
          and worst["mass_preservation_defect"] == 0.0)
    _report(1, "hypothesis validators", ok, time.perf_counter() - t0, 5,
            " ".join(f"{k}={v:.2g}" for k, v in worst.items()))


def test_02_gradient_structure_consistency():
    t0 = time.perf_counter()
    worst = 0.0
    for m in builtin_models().values():
        gc = gradient_consistency(m, 10_000)
        worst = max(worst, gc["bulk_relative_error"], gc["interface_relative_error"])
    _report(2, "gradient-structure consistency", worst <= 1e-10, time.perf_counter() - t0, 5,
            f"max rel err={worst:.2g}")


def test_03_reflection_suite():
    t0 = time.perf_counter()
    rep = geometry_suite(("flat_symmetric", "triple_junction"), n_samples=2000, n_pou=10_000)
    worst = {k: max(t[k] for t in rep["templates"].values())
             for k in ("involution_defect", "gamma_fixed_defect", "det_defect", "pou_defect")}
    ok = (worst["involution_defect"] <= 1e-10 and worst["gamma_fixed_defect"] <= 1e-10
          and worst["det_defect"] <= 1e-6 and worst["pou_defect"] <= 1e-12)
    _report(3, "reflection suite", ok, time.perf_counter() - t0, 10,
            " ".join(f"{k}={v:.2g}" for k, v in worst.items()))


def test_04_conservation_positivity():
    t0 = time.perf_counter()
    sc = load_scenario("flat_linear", ["resolution=32", "solver.t_end=1.0"])
    traj = run(sc)
    mass = traj.species_mass()
    drift = float((np.abs(mass - mass[0]) / np.abs(mass[0])).max())
    initial = float(mass[0].sum())
    floored = traj.cumulative_floored / initial
    ok = drift <= 1e-10 and floored <= 1e-8
    _report(4, "conservation and positivity", ok, time.perf_counter() - t0, 60,
            f"mass drift={drift:.2g} floored/initial={floored:.2g}")


def test_05_entropy_dissipation_inequality():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in BUILTIN_SCENARIOS:
        rep = entropy_refinement(name)
        ok &= rep["ok"]
        d = [s["max_positive_defect"] for s in rep["series"]]
        parts.append(f"{name}: " + ("exact" if rep["exact"] else "ratios " + ",".join(f"{r:.2f}" for r in rep["ratios"]))
                     + f" (defect {d[-1]:.2g})")
    _report(5, "discrete entropy dissipation", ok, time.perf_counter() - t0, 600, "; ".join(parts))


def test_06_epsilon_consistency():
    t0 = time.perf_counter()
    rep = epsilon_consistency("flat_polynomial")
    _report(6, "epsilon-regularisation consistency", rep["ok"], time.perf_counter() - t0, 300,
            "distances " + ",".join(f"{d:.3g}" for d in rep["distance"]))


def test_07_truncation_suite():
    t0 = time.perf_counter()
    rep = truncation_suite((4.0, 16.0, 64.0), (2, 4, 8))
    v, d = rep["projection"], rep["decay"]
    _report(7, "truncation property suite", rep["ok"], time.perf_counter() - t0, 30,
            f"hessian growth={v['weighted_hessian_growth']:.3f} gradient growth={v['gradient_growth']:.3f} "
            "decay ratios="
            + ",".join(f"{r:.2f}" for r in d["ratios"]))


def test_08_relative_entropy_coercivity():
    t0 = time.perf_counter()
    rep = coercivity_suite("flat_linear", n_perturbations=200)
    _report(8, "relative-entropy coercivity", rep["ok"], time.perf_counter() - t0, 120,
            f"min H_rel={rep['min_H_rel']:.3g} c={rep['min_ratio_hellinger']:.3g} "
            f"degenerate={rep['degenerate_H_rel']:.2g}")


def test_09_weak_strong_stability():
    t0 = time.perf_counter()
    sc = load_scenario("flat_linear", ["solver.t_end=1.0"])
    ref = run(sc)
    # identical data in an independent run
    twin = run(sc, u0=sc.initial.copy())
    ctx = RelEntropyContext.build(sc)
    zero = stability_experiment(sc, reference=ref, ctx=ctx)
    trunc = RelEntropyTruncation(zero["E"], zero["N"])
    h_twin = max(relative_entropy(u, U, ctx, trunc).H_rel for u, U in zip(twin.snapshots, ref.snapshots))
    h_zero = max(float(np.abs(zero["H_rel"]).max()), abs(h_twin))
    pert = smooth_perturbation(sc, 1e-2, np.random.default_rng(0))
    a = stability_experiment(sc, pert, reference=ref, ctx=ctx)
    b = stability_experiment(sc, pert / 2, reference=ref, ctx=ctx)
    envelope = all(np.all(r["H_rel"] <= np.exp(r["fitted_C"] * r["times"]) * r["H_rel_0"] * (1 + 1e-12))
                   for r in (a, b))
    c_gap = abs(a["fitted_C"] - b["fitted_C"]) / abs(a["fitted_C"])
    ok = h_zero <= 1e-10 and envelope and c_gap <= 0.2
    _report(9, "weak-strong stability", ok, time.perf_counter() - t0, 300,
            f"zero-perturbation H_rel={h_zero:.2g} C={a['fitted_C']:.3g}/{b['fitted_C']:.3g} gap={c_gap:.2e}")


def test_10_renormalised_residuals():
    t0 = time.perf_counter()
    rep = residual_refinement("flat_linear", equivalence=True)
    r = rep["ratios"]
    _report(10, "renormalised-formulation residuals", rep["ok"], time.perf_counter() - t0, 600,
            "interface ratios " + ",".join(f"{x:.2f}" for x in r["interface"]) + " outer ratios "
            + ",".join(f"{x:.2f}" for x in r["outer"]) + f" plain gap={rep['plain_equivalence']['max_gap']:.2g}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
