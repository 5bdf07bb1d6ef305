"""Command-line front end.

    bulkiface <command> --scenario <path|builtin:name> --out <dir> [--set key=value]... [--seed <u64>]

Command options live in the ``run`` block of the scenario and are usually set
with ``--set run.<key>=<value>``. Exit codes: 0 success, 1 configuration
error, 2 runtime abort, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import BACKEND, __version__, suites
from .diagnostics import (
    RelEntropyContext,
    RelEntropyTruncation,
    entropy_inequality_check,
    relative_entropy,
    smooth_perturbation,
    stability_experiment,
    write_entropy_csv,
    write_stability,
)
from .errors import ConfigError, DomainError, GeometryError, SolverError
from .renormalisation import decay_scaling
from .solver import BUILTIN_SCENARIOS, apply_overrides, builtin_scenario_dict, run, scenario_from_dict

log = logging.getLogger("bulkiface")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
COMMANDS = ("simulate", "verify-geometry", "verify-kinetics", "verify-truncations", "entropy-report",
            "stability", "renorm-residual", "sweep", "verify-all")
SWEEP_AXES = ("epsilon", "resolution", "E", "N", "dt")
VERIFY_SUITES = ("geometry", "kinetics", "truncations", "residuals")


# ----------------------------------------------------------------------- output


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


class Run:
    """Resolved configuration plus the output bookkeeping of one invocation."""

    def __init__(self, command, source, raw, out, seed, overrides):
        self.command = command
        self.source = source
        self.raw = raw
        self.out = Path(out)
        self.seed = seed
        self.overrides = list(overrides)
        self.options = dict(raw.get("run", {}))
        self.started = datetime.now(timezone.utc).isoformat()

    def opt(self, key, default):
        return self.options.get(key, default)

    def scenario(self, extra=()):
        return scenario_from_dict(apply_overrides(self.raw, extra))

    def write_json(self, name, obj):
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        with open(p, "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2)
        return p

    def write_csv(self, name, header, rows):
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        return p

    def sidecars(self):
        """ISO-8601 run metadata next to every CSV below the output directory."""
        meta = {"created": datetime.now(timezone.utc).isoformat(), "started": self.started,
                "command": self.command, "scenario": self.source, "overrides": self.overrides,
                "seed": self.seed, "version": __version__, "backend": BACKEND}
        for p in sorted(self.out.rglob("*.csv")):
            with open(p.with_suffix(".meta.json"), "w") as fh:
                json.dump({"file": p.name, **meta}, fh, indent=2)


# ---------------------------------------------------------------------- commands


def cmd_simulate(r: Run) -> int:
    sc = r.scenario()
    r.out.mkdir(parents=True, exist_ok=True)
    sc.mesh.to_csv(r.out / "mesh.csv")
    traj = run(sc)
    traj.write_snapshots(r.out / "snapshots")
    traj.write_ledger(r.out / "ledger.csv")
    write_entropy_csv(traj, r.out / "entropy.csv")
    chk = entropy_inequality_check(traj)
    mass = traj.species_mass()
    drift = np.abs(mass[-1] - mass[0]) / np.maximum(np.abs(mass[0]), 1e-300)
    r.write_json("summary.json", {
        "scenario": sc.name, "steps": len(traj.ledger["t"]) - 1, "snapshots": len(traj.times),
        "relative_mass_drift": drift, "cumulative_floored_mass": traj.cumulative_floored,
        "max_positive_entropy_defect": chk["max_positive_defect"], "H_0": traj.ledger["H"][0],
        "H_T": traj.ledger["H"][-1]})
    print(f"simulate: {sc.name}, {len(traj.ledger['t']) - 1} steps, mass drift {drift.max():.3g}")
    return EXIT_OK


def cmd_verify_geometry(r: Run) -> int:
    sc = r.scenario()
    templates = r.opt("templates", [sc.geometry.name])
    rep = suites.geometry_suite(templates, n_samples=int(r.opt("n_samples", 2000)),
                                n_pou=int(r.opt("n_pou", 10_000)), seed=r.seed,
                                negative_control=bool(r.opt("negative_controls", False)))
    r.write_json("geometry_report.json", rep)
    return _verdict("verify-geometry", rep)


def cmd_verify_kinetics(r: Run) -> int:
    sc = r.scenario()
    rep = suites.kinetics_suite({sc.name: sc.model}, n_samples=int(r.opt("n_samples", 10_000)), seed=r.seed,
                                negative_control=bool(r.opt("negative_controls", False)))
    r.write_json("kinetics_report.json", rep)
    return _verdict("verify-kinetics", rep)


def cmd_verify_truncations(r: Run) -> int:
    r.scenario()
    rep = suites.truncation_suite(tuple(r.opt("E_sequence", (4.0, 16.0, 64.0))),
                                  tuple(r.opt("N_sequence", (2, 4, 8))), int(r.opt("n", 2)), seed=r.seed)
    r.write_json("truncation_report.json", rep)
    return _verdict("verify-truncations", rep)


def _levels(r: Run):
    lv = r.opt("levels", None)
    if lv is None:
        return suites.REFINEMENT_LEVELS
    try:
        return tuple((int(a), float(b)) for a, b in lv)
    except (TypeError, ValueError) as exc:
        raise ConfigError("run.levels must be a list of [resolution, dt] pairs") from exc


def cmd_entropy_report(r: Run) -> int:
    sc = r.scenario()
    traj = run(sc)
    r.out.mkdir(parents=True, exist_ok=True)
    write_entropy_csv(traj, r.out / "entropy.csv")
    chk = entropy_inequality_check(traj)
    rep = {"scenario": sc.name, "max_positive_defect": chk["max_positive_defect"],
           "min_dissipation": chk["min_dissipation"], "ok": True}
    if r.opt("refine", False):
        ref = suites.entropy_refinement(r.raw, _levels(r), t_end=r.opt("t_end", None))
        rep["refinement"] = ref
        rep["ok"] = ref["ok"]
        r.write_csv("entropy_refinement.csv", ["resolution", "dt", "max_positive_defect"],
                    [(s["resolution"], s["dt"], s["max_positive_defect"]) for s in ref["series"]])
    r.write_json("entropy_report.json", rep)
    return _verdict("entropy-report", rep)


def cmd_stability(r: Run) -> int:
    sc = r.scenario()
    rng = np.random.default_rng(r.seed)
    size = float(r.opt("perturbation", 1e-3))
    pert = smooth_perturbation(sc, size, rng) if size > 0 else None
    trunc = None
    if "E" in r.options or "N" in r.options:
        trunc = RelEntropyTruncation(float(r.opt("E", 32.0)), float(r.opt("N", 4.0)))
    res = stability_experiment(sc, pert, trunc=trunc, t_end=r.opt("t_end", None))
    r.out.mkdir(parents=True, exist_ok=True)
    write_stability(res, r.out)
    ok = bool(np.all(res["H_rel"] >= 0))
    print(f"stability: H_rel(0)={res['H_rel_0']:.4g} H_rel(T)={res['H_rel_T']:.4g} C={res['fitted_C']:.4g}")
    if not ok:
        print("stability: negative relative entropy (truncation level too small?)", file=sys.stderr)
    return EXIT_OK if ok else EXIT_VERIFY


def _write_residuals(r: Run, rep, prefix="residual"):
    r.write_json(f"{prefix}s.json", rep["tests"])
    r.write_csv(f"{prefix}_summary.csv", ["resolution", "h", "dt", "max_interface", "max_outer"],
                [(s["resolution"], s["h"], s["dt"], s["max_interface"], s["max_outer"]) for s in rep["levels"]])
    summary = {k: v for k, v in rep.items() if k != "tests"}
    r.write_json(f"{prefix}_report.json", summary)


def cmd_renorm_residual(r: Run) -> int:
    r.scenario()
    rep = suites.residual_refinement(r.raw, _levels(r), t_end=float(r.opt("t_end", 0.25)),
                                     negative_control=bool(r.opt("negative_controls", False)))
    _write_residuals(r, rep)
    return _verdict("renorm-residual", rep)


# ------------------------------------------------------------------------- sweep


def _sweep_epsilon(r: Run, values):
    keys = sorted({float(v) for v in values} | {float(v) / 2 for v in values}, reverse=True)

    def job(e):
        return e, run(r.scenario([f"solver.epsilon={e}"]))

    with ThreadPoolExecutor() as ex:
        trajs = dict(ex.map(job, keys))
    rows = []
    for v in values:
        a, b = trajs[float(v)], trajs[float(v) / 2]
        rows.append((float(v), float(np.abs(a.snapshots - b.snapshots).max())))
    return ["epsilon", "trajectory_distance"], rows


def _sweep_resolution(r: Run, values):
    base_res = int(r.raw.get("resolution", 16))
    base_dt = float(r.raw.get("solver", {}).get("dt_init", 2e-3))
    t_end = float(r.opt("t_end", 0.25))

    def job(res):
        dt = base_dt * (base_res / res) ** 2
        sc = r.scenario([f"resolution={res}", f"solver.dt_init={dt}", f"solver.t_end={t_end}"])
        batt = suites.residual_battery(run(sc, every_step=True))
        return (int(res), dt, max(abs(b["residual"]) for b in batt if b["kind"] == "interface"),
                max(abs(b["residual"]) for b in batt if b["kind"] == "outer"))

    with ThreadPoolExecutor() as ex:
        rows = list(ex.map(job, [int(v) for v in values]))
    return ["resolution", "dt", "max_interface_residual", "max_outer_residual"], rows


def _sweep_E(r: Run, values):
    sc = r.scenario()
    rng = np.random.default_rng(r.seed)
    pert = smooth_perturbation(sc, float(r.opt("perturbation", 1e-3)), rng)
    ref = run(sc)
    other = run(sc, u0=sc.initial + pert)
    ctx = RelEntropyContext.build(sc)
    N = float(r.opt("N", 4.0))
    vol = sc.mesh.volumes

    def job(E):
        trunc = RelEntropyTruncation(float(E), N)
        H = np.array([relative_entropy(u, U, ctx, trunc).H_rel for u, U in zip(other.snapshots, ref.snapshots)])
        hell = np.array([vol @ ((np.sqrt(u) - np.sqrt(U)) ** 2).sum(axis=1)
                         for u, U in zip(other.snapshots, ref.snapshots)])
        return float(E), float(H[0]), float(H[-1]), float(H.min()), float((H / hell).min())

    with ThreadPoolExecutor() as ex:
        rows = list(ex.map(job, values))
    return ["E", "H_rel_0", "H_rel_T", "min_H_rel", "min_ratio_hellinger"], rows


def _sweep_N(r: Run, values):
    n = int(r.opt("n", r.scenario().n_species))
    E = float(r.opt("E", 16.0))

    def job(N):
        return int(N), decay_scaling(n, E=E, N_sequence=(int(N),))["sup"][0]

    with ThreadPoolExecutor() as ex:
        rows = list(ex.map(job, values))
    return ["N", "sup_decay"], rows


def _sweep_dt(r: Run, values):
    def job(dt):
        traj = run(r.scenario([f"solver.dt_init={dt}"]))
        return float(dt), entropy_inequality_check(traj)["max_positive_defect"]

    with ThreadPoolExecutor() as ex:
        rows = list(ex.map(job, values))
    return ["dt", "max_positive_entropy_defect"], rows


_SWEEPS = {"epsilon": _sweep_epsilon, "resolution": _sweep_resolution, "E": _sweep_E, "N": _sweep_N,
           "dt": _sweep_dt}
_SWEEP_DEFAULTS = {"epsilon": [1.0, 0.5, 0.25, 0.125], "resolution": [8, 16, 32], "E": [16.0, 32.0, 64.0],
                   "N": [2, 4, 8], "dt": [4e-3, 2e-3, 1e-3]}


def cmd_sweep(r: Run) -> int:
    r.scenario()
    axis = r.opt("axis", None)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {list(SWEEP_AXES)} (run.axis)")
    values = r.opt("values", _SWEEP_DEFAULTS[axis])
    if not isinstance(values, list) or not values:
        raise ConfigError("run.values must be a nonempty list")
    header, rows = _SWEEPS[axis](r, values)
    # single collector: workers only return rows, the file is written here
    r.write_csv(f"sweep_{axis}.csv", header, rows)
    print(f"sweep {axis}: {len(rows)} values")
    return EXIT_OK


# -------------------------------------------------------------------- verify-all


def cmd_verify_all(r: Run) -> int:
    sc = r.scenario()
    chosen = r.opt("suites", list(VERIFY_SUITES))
    if not chosen:
        raise ConfigError("nothing to verify")
    unknown = set(chosen) - set(VERIFY_SUITES)
    if unknown:
        raise ConfigError(f"unknown suites {sorted(unknown)}; choose from {list(VERIFY_SUITES)}")
    neg = bool(r.opt("negative_controls", False))
    report = {"suites": {}, "negative_controls": {}}
    if "geometry" in chosen:
        report["suites"]["geometry"] = suites.geometry_suite(seed=r.seed, negative_control=neg)
    if "kinetics" in chosen:
        models = suites.builtin_models()
        models.setdefault(sc.name, sc.model)
        report["suites"]["kinetics"] = suites.kinetics_suite(models, seed=r.seed, negative_control=neg)
    if "truncations" in chosen:
        report["suites"]["truncations"] = suites.truncation_suite(seed=r.seed)
    if "residuals" in chosen:
        rep = suites.residual_refinement(r.raw, _levels(r), t_end=float(r.opt("t_end", 0.25)), negative_control=neg)
        _write_residuals(r, rep)
        report["suites"]["residuals"] = {k: v for k, v in rep.items() if k != "tests"}
    if neg:
        for name, s in report["suites"].items():
            if "negative_control" in s:
                report["negative_controls"][name] = s["negative_control"]
        report["negative_controls"]["entropy"] = suites.entropy_negative_control()
    report["passed"] = {k: bool(v["ok"]) for k, v in report["suites"].items()}
    report["negative_controls_as_expected"] = all(v["as_expected"] for v in report["negative_controls"].values())
    report["ok"] = all(report["passed"].values()) and report["negative_controls_as_expected"]
    r.write_json("verify_all.json", report)
    for k, v in report["passed"].items():
        print(f"{k:12s} {'PASS' if v else 'FAIL'}")
    for k, v in report["negative_controls"].items():
        print(f"control {k:12s} flags={v['flags']} {'as expected' if v['as_expected'] else 'UNEXPECTED'}")
    return EXIT_OK if report["ok"] else EXIT_VERIFY


def _verdict(name, rep) -> int:
    ok = bool(rep["ok"]) and rep.get("negative_control", {"as_expected": True})["as_expected"]
    print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


HANDLERS = {"simulate": cmd_simulate, "verify-geometry": cmd_verify_geometry,
            "verify-kinetics": cmd_verify_kinetics, "verify-truncations": cmd_verify_truncations,
            "entropy-report": cmd_entropy_report, "stability": cmd_stability,
            "renorm-residual": cmd_renorm_residual, "sweep": cmd_sweep, "verify-all": cmd_verify_all}


# -------------------------------------------------------------------------- main


def _parser():
    p = argparse.ArgumentParser(prog="bulkiface", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", default="builtin:flat_linear",
                   help="scenario JSON path or builtin:<name> (%s)" % ", ".join(BUILTIN_SCENARIOS))
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, value parsed as JSON when possible (repeatable)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed for all sampling (u64)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_raw(source: str) -> dict:
    if source.startswith("builtin:") or source in BUILTIN_SCENARIOS:
        return builtin_scenario_dict(source.split(":", 1)[-1])
    try:
        with open(source) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {source}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"scenario {source} is not a JSON object")
    return d


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    r = None
    try:
        raw = apply_overrides(_load_raw(args.scenario), args.overrides)
        r = Run(args.command, args.scenario, raw, args.out, args.seed, args.overrides)
        r.scenario()  # validate before any run
        code = HANDLERS[args.command](r)
    except (ConfigError, GeometryError, DomainError, ValueError) as exc:
        # ValueError: out-of-range run options rejected by the library
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"abort: {exc}", file=sys.stderr)
        if r is not None:
            r.write_json("abort.json", {"message": str(exc), "diagnostic": exc.diagnostic})
        code = EXIT_RUNTIME
    if r is not None and r.out.exists():
        r.sidecars()
    return code


if __name__ == "__main__":
    sys.exit(main())
