"""Semi-implicit finite-volume integrator for the regularised bulk-interface system.

Diffusion is backward Euler with a two-point flux; bulk reactions and interface
transmission are explicit and regularised. Interface faces carry no diffusive
coupling: the compartments talk to each other only through the transmission
rates.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import diagnostics as _diag
from .errors import ConfigError, DomainError, GeometryError, SolverError
from .geometry import MINUS, PLUS, Geometry, Mesh, build_geometry, build_mesh
from .kinetics import (
    KineticModel,
    RegularizedModel,
    check_ellipticity,
    clip_initial_data,
    model_from_dict,
    regularize,
)

log = logging.getLogger(__name__)

BUILTIN_SCENARIOS = ("flat_linear", "flat_polynomial", "triple_junction_linear", "cosh_gradient_consistency")


@dataclass(frozen=True)
class SolverSettings:
    epsilon: float = 0.01
    dt_init: float = 2e-3
    dt_min: float = 1e-12
    t_end: float = 1.0
    output_every: float | None = 0.05  # None: every step
    cg_tol: float = 1e-10
    linear_solver: str = "cg"
    max_change: float = 0.2
    grow_after: int = 10
    grow_factor: float = 1.2

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ConfigError("solver.epsilon must lie in (0, 1]")
        if not (self.dt_init > 0 and self.dt_min > 0 and self.t_end > 0):
            raise ConfigError("dt_init, dt_min and t_end must be positive")
        if self.output_every is not None and not self.output_every > 0:
            raise ConfigError("output_every must be positive or null")
        if self.linear_solver not in ("cg", "direct"):
            raise ConfigError("linear_solver must be 'cg' or 'direct'")


@dataclass(frozen=True)
class Scenario:
    """Everything needed to run one simulation."""

    name: str
    geometry: Geometry
    mesh: Mesh
    model: KineticModel
    diffusion: np.ndarray  # (n_cells, n, 2) diagonal tensors
    initial: np.ndarray  # (n_cells, n), before clipping
    settings: SolverSettings
    ellipticity: float
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_species(self) -> int:
        return self.model.n_species

    @property
    def regularized(self) -> RegularizedModel:
        return regularize(self.model, self.settings.epsilon)

    def with_overrides(self, overrides) -> "Scenario":
        return scenario_from_dict(apply_overrides(self.raw, overrides))


# ---------------------------------------------------------------- configuration


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings (values parsed as JSON when possible)."""
    out = copy.deepcopy(d)
    for item in overrides or ():
        if isinstance(item, tuple):
            key, value = item
        else:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, text = item.split("=", 1)
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return out


def _profile(spec: dict, x: np.ndarray, n: int) -> np.ndarray:
    kind = spec.get("kind", "constant")
    base = np.broadcast_to(np.asarray(spec.get("base", spec.get("value", 1.0)), float), (n,))
    amp = np.broadcast_to(np.asarray(spec.get("amplitude", 0.0), float), (n,))
    if kind == "constant":
        shape = np.zeros(len(x))
    elif kind == "cosine":
        shape = np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])
    elif kind == "gaussian":
        c = np.asarray(spec.get("center", [0.0, 0.0]), float)
        w = float(spec.get("width", 0.2))
        shape = np.exp(-((x - c) ** 2).sum(axis=1) / (2 * w * w))
    elif kind == "linear_x":
        shape = x[:, 0]
    else:
        raise ConfigError(f"unknown initial-data kind {kind!r}")
    return base[None, :] + amp[None, :] * shape[:, None]


def _diffusion_field(spec: dict, mesh: Mesh, n: int) -> np.ndarray:
    out = np.empty((mesh.n_cells, n, 2))
    mod = float(spec.get("modulation", 0.0))
    if not 0.0 <= mod < 1.0:
        raise ConfigError("diffusion.modulation must lie in [0, 1)")
    x = mesh.centers
    factor = 1.0 + mod * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])
    for side, key in ((PLUS, "plus"), (MINUS, "minus")):
        a = np.asarray(spec.get(key, np.ones((n, 2))), dtype=float)
        if a.ndim == 1:
            a = np.broadcast_to(a[:, None], (n, 2)) if len(a) == n else np.broadcast_to(a, (n, 2))
        elif a.ndim == 3:
            if np.abs(a[:, 0, 1]).max() > 0 or np.abs(a[:, 1, 0]).max() > 0:
                raise ConfigError("only diagonal diffusion tensors are supported")
            a = np.stack([a[:, 0, 0], a[:, 1, 1]], axis=1)
        if a.shape != (n, 2):
            raise ConfigError(f"diffusion.{key} must have shape (n_species, 2)")
        cells = mesh.cells(side)
        out[cells] = a[None, :, :] * factor[cells, None, None]
    return out


def scenario_from_dict(d: dict) -> Scenario:
    try:
        geometry = build_geometry(d["geometry"])
        mesh = build_mesh(geometry, d.get("resolution", 16))
        model = model_from_dict(d["model"])
    except KeyError as exc:
        raise ConfigError(f"scenario is missing field {exc}") from exc
    except GeometryError as exc:
        raise ConfigError(str(exc)) from exc
    n = model.n_species
    diffusion = _diffusion_field(d.get("diffusion", {}), mesh, n)
    ell = check_ellipticity(diffusion)
    init = d.get("initial", {})
    u0 = np.empty((mesh.n_cells, n))
    for side, key in ((PLUS, "plus"), (MINUS, "minus")):
        cells = mesh.cells(side)
        u0[cells] = _profile(init.get(key, {"kind": "constant", "base": 1.0}), mesh.centers[cells], n)
    if np.any(u0 < 0) or not np.all(np.isfinite(u0)):
        raise ConfigError("initial data must be finite and nonnegative")
    s = dict(d.get("solver", {}))
    try:
        settings = SolverSettings(**s)
    except TypeError as exc:
        raise ConfigError(f"bad solver block: {exc}") from exc
    return Scenario(d.get("name", "custom"), geometry, mesh, model, diffusion, u0, settings, ell, copy.deepcopy(d))


def builtin_scenario_dict(name: str) -> dict:
    if name not in BUILTIN_SCENARIOS:
        raise ConfigError(f"unknown built-in scenario {name!r}; choose from {list(BUILTIN_SCENARIOS)}")
    text = resources.files("bulkiface").joinpath("scenarios", f"{name}.json").read_text()
    return json.loads(text)


def load_scenario(source, overrides=()) -> Scenario:
    """Load ``builtin:<name>``, a bare built-in name, a JSON path or a dict."""
    if isinstance(source, dict):
        d = source
    else:
        src = str(source)
        if src.startswith("builtin:") or src in BUILTIN_SCENARIOS:
            d = builtin_scenario_dict(src.split(":", 1)[-1])
        else:
            try:
                with open(src) as fh:
                    d = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read scenario {src}: {exc}") from exc
    return scenario_from_dict(apply_overrides(d, overrides))


# ------------------------------------------------------------------- operators


def _as_diag(A, n_cells: int) -> np.ndarray:
    a = np.asarray(A, dtype=float)
    # per-cell diagonals take precedence (a 2-cell mesh makes (2, 2) ambiguous)
    if a.shape == (n_cells, 2):
        pass
    elif a.shape == (2,):
        a = np.broadcast_to(a, (n_cells, 2))
    elif a.shape == (2, 2):
        a = np.broadcast_to(a, (n_cells, 2, 2))
    if a.ndim == 3:
        if not np.allclose(a, np.swapaxes(a, 1, 2)):
            raise DomainError("diffusion tensor is not symmetric")
        if np.abs(a[:, 0, 1]).max() > 0:
            raise DomainError("two-point flux needs diagonal tensors")
        a = np.stack([a[:, 0, 0], a[:, 1, 1]], axis=1)
    if a.shape != (n_cells, 2):
        raise DomainError(f"diffusion tensor shape {a.shape} does not match the mesh")
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise DomainError("diffusion tensor is not positive definite")
    return a


def transmissibilities(mesh: Mesh, A) -> np.ndarray:
    """Face transmissibilities ``|f| / d_f * harmonic mean of normal diffusivity``."""
    a = _as_diag(A, mesh.n_cells)
    i, j = mesh.interior_cells[:, 0], mesh.interior_cells[:, 1]
    ax = mesh.interior_axis
    da, db = a[i, ax], a[j, ax]
    return mesh.interior_area / mesh.interior_dist * (2.0 * da * db / (da + db))


def stiffness(mesh: Mesh, trans: np.ndarray) -> sp.csr_matrix:
    """Symmetric graph Laplacian ``K`` with ``(K u)_c = sum_f T_f (u_c - u_nb)``."""
    i, j = mesh.interior_cells[:, 0], mesh.interior_cells[:, 1]
    n = mesh.n_cells
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([trans, trans, -trans, -trans])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def assemble_diffusion(mesh: Mesh, A) -> sp.csr_matrix:
    """Finite-volume operator ``L`` with ``(L u)_c = (1/|c|) sum_f T_f (u_nb - u_c)``."""
    K = stiffness(mesh, transmissibilities(mesh, A))
    return (-sp.diags(1.0 / mesh.volumes) @ K).tocsr()


def interface_trace(u, mesh: Mesh, side: int) -> np.ndarray:
    """Adjacent-cell values on ``side`` for every interface face."""
    u = np.asarray(u)
    return u[mesh.iface_plus] if side == PLUS else u[mesh.iface_minus]


def explicit_sources(u, scenario: Scenario, reg: RegularizedModel | None = None):
    """Regularised bulk and interface source terms per cell, and the face rates."""
    reg = scenario.regularized if reg is None else reg
    mesh = scenario.mesh
    src = np.zeros_like(u)
    for side in (PLUS, MINUS):
        cells = mesh.cells(side)
        src[cells] = reg.f(u[cells], side)
    bulk = src.copy()
    r = reg.r(u[mesh.iface_plus], u[mesh.iface_minus]) if len(mesh.iface_plus) else np.zeros((0, u.shape[1]))
    w = (mesh.iface_length / mesh.volumes[mesh.iface_plus])[:, None]
    np.add.at(src, mesh.iface_plus, -w * r)
    w = (mesh.iface_length / mesh.volumes[mesh.iface_minus])[:, None]
    np.add.at(src, mesh.iface_minus, w * r)
    return src, bulk, r


class _Implicit:
    """Cached solves of ``(V + dt K_i) x = V b`` per species."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        mesh = scenario.mesh
        self.V = mesh.volumes
        self.K = [stiffness(mesh, transmissibilities(mesh, scenario.diffusion[:, i, :]))
                  for i in range(scenario.n_species)]
        self._dt = None
        self._ops = None
        self.groups = [mesh.cells(PLUS), mesh.cells(MINUS)]

    def _prepare(self, dt):
        if self._dt == dt:
            return
        Vd = sp.diags(self.V)
        mats = [(Vd + dt * K).tocsr() for K in self.K]
        if self.sc.settings.linear_solver == "direct":
            self._ops = [spla.factorized(m.tocsc()) for m in mats]
        else:
            self._ops = [(m, 1.0 / m.diagonal()) for m in mats]
        self._dt = dt

    def solve(self, rhs, x0, dt):
        self._prepare(dt)
        out = np.empty_like(rhs)
        tol = self.sc.settings.cg_tol
        for i, op in enumerate(self._ops):
            b = self.V * rhs[:, i]
            if self.sc.settings.linear_solver == "direct":
                x = op(b)
            else:
                m, dinv = op
                pre = spla.LinearOperator(m.shape, matvec=lambda v, d=dinv: d * v)
                x, info = spla.cg(m, b, x0=x0[:, i], rtol=tol, atol=0.0, M=pre, maxiter=10 * len(b))
                if info != 0:
                    res = float(np.linalg.norm(m @ x - b) / max(np.linalg.norm(b), 1e-300))
                    raise SolverError(f"CG did not converge (relative residual {res:.3g})",
                                      {"species": i, "residual": res, "dt": dt})
            # restore exact per-compartment mass balance lost to the iteration tolerance
            for g in self.groups:
                vol = self.V[g]
                x[g] += (b[g].sum() - (vol * x[g]).sum()) / vol.sum()
            out[:, i] = x
        return out


def step(u, scenario: Scenario, dt: float, implicit: _Implicit | None = None):
    """One semi-implicit step. Returns ``(u_new, floored_mass)``."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise DomainError("state must be nonnegative")
    implicit = _Implicit(scenario) if implicit is None else implicit
    src, _, _ = explicit_sources(u, scenario)
    return _advance(u, src, dt, implicit, scenario.mesh.volumes)


def _advance(u, src, dt, implicit, volumes):
    new = implicit.solve(u + dt * src, u, dt)
    neg = new < 0
    floored = float((volumes[:, None] * np.where(neg, -new, 0.0)).sum())
    new[neg] = 0.0
    return new, floored


# ------------------------------------------------------------------- trajectory


@dataclass(frozen=True)
class Trajectory:
    """Snapshots and the per-step ledger.

    Ledger row ``k`` belongs to the step ending at ``t_k``; row 0 is the initial
    state. Diffusive dissipation is evaluated at the new state, reaction and
    interface dissipation at the state the explicit rates were taken from.
    """

    scenario: Scenario
    times: np.ndarray
    snapshots: np.ndarray  # (K, n_cells, n)
    ledger: dict
    every_step: bool

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    @property
    def cumulative_floored(self) -> float:
        return float(self.ledger["floored_mass"].sum())

    def species_mass(self) -> np.ndarray:
        """Total mass per species over both compartments, per ledger row."""
        n = self.scenario.n_species
        return np.stack([self.ledger[f"mass_{i + 1}_plus"] + self.ledger[f"mass_{i + 1}_minus"]
                         for i in range(n)], axis=1)

    def ledger_rows(self):
        keys = list(self.ledger)
        return keys, np.column_stack([self.ledger[k] for k in keys])

    def write_snapshots(self, out_dir) -> list:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        n = self.scenario.n_species
        for k, (t, u) in enumerate(zip(self.times, self.snapshots)):
            p = out_dir / f"snapshot_{k:05d}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["cell_id"] + [f"u_{i + 1}" for i in range(n)])
                for c in range(u.shape[0]):
                    w.writerow([c] + [repr(float(v)) for v in u[c]])
            paths.append(p)
        return paths

    def write_ledger(self, path) -> None:
        n = self.scenario.n_species
        cols = (["t", "dt"] + [f"mass_{i + 1}_plus" for i in range(n)] + [f"mass_{i + 1}_minus" for i in range(n)]
                + ["H", "D_bulk", "D_int", "floored_mass"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(len(self.ledger["t"])):
                w.writerow([repr(float(self.ledger[c][k])) for c in cols])


def _masses(u, mesh):
    out = {}
    for side, tag in ((PLUS, "plus"), (MINUS, "minus")):
        cells = mesh.cells(side)
        m = (mesh.volumes[cells, None] * u[cells]).sum(axis=0)
        for i, v in enumerate(m):
            out[f"mass_{i + 1}_{tag}"] = float(v)
    return out


def run(scenario: Scenario, u0=None, every_step: bool | None = None, t_end: float | None = None) -> Trajectory:
    """Integrate to ``t_end`` with the adaptive explicit-change controller.

    ``u0`` replaces the scenario's initial data (it is clipped at ``1/eps``).
    ``every_step`` stores a snapshot after every step regardless of the output
    cadence (needed for residual evaluation).
    """
    st = scenario.settings
    mesh = scenario.mesh
    t_end = st.t_end if t_end is None else float(t_end)
    every_step = st.output_every is None if every_step is None else every_step
    reg = scenario.regularized
    u = clip_initial_data(scenario.initial if u0 is None else u0, st.epsilon)
    if u.shape != (mesh.n_cells, scenario.n_species):
        raise ConfigError("initial data does not match the mesh")
    implicit = _Implicit(scenario)
    vol = mesh.volumes[:, None]

    rows = []

    def record(t, dt, u_new, u_rates, floored):
        H = _diag.total_entropy(u_new, scenario)
        diff_p, diff_m = _diag.diffusive_dissipation(u_new, scenario)
        if u_rates is None:
            rp = rm = di = 0.0
        else:
            rp, rm, di = _diag.rate_dissipation(u_rates, scenario, reg)
        row = {"t": t, "dt": dt, **_masses(u_new, mesh), "H": H,
               "D_bulk_plus": diff_p + rp, "D_bulk_minus": diff_m + rm, "D_int": di,
               "floored_mass": floored}
        row["D_bulk"] = row["D_bulk_plus"] + row["D_bulk_minus"]
        rows.append(row)

    times, snaps = [0.0], [u.copy()]
    record(0.0, 0.0, u, None, 0.0)
    t, dt = 0.0, st.dt_init
    clean = 0
    next_out = st.output_every if st.output_every else np.inf
    mean_density = np.maximum((vol * u).sum(axis=0) / vol.sum(), 1e-300)
    while t < t_end * (1 - 1e-14):
        src, _, _ = explicit_sources(u, scenario, reg)
        if not np.all(np.isfinite(src)):
            raise SolverError("non-finite rates", {"t": t})
        loss_cap = st.max_change * u
        gain_cap = st.max_change * np.maximum(u, 0.05 * mean_density[None, :])
        violated = False
        while True:
            h = min(dt, t_end - t, next_out - t if np.isfinite(next_out) else np.inf)
            change = h * src
            if np.all(-change <= loss_cap) and np.all(change <= gain_cap):
                break
            violated = True
            dt *= 0.5
            if dt < st.dt_min:
                raise SolverError(
                    f"time step underflow at t={t:.6g}: dt={dt:.3g} < dt_min={st.dt_min:.3g}",
                    {"t": t, "dt": dt, "dt_min": st.dt_min, "max_rate": float(np.abs(src).max())},
                )
        u_prev = u
        u, floored = _advance(u, src, h, implicit, mesh.volumes)
        t = t + h
        if abs(t - t_end) < 1e-12 * max(1.0, t_end):
            t = t_end
        record(t, h, u, u_prev, floored)
        clean = 0 if violated else clean + 1
        if clean >= st.grow_after and dt < st.dt_init:
            dt = min(dt * st.grow_factor, st.dt_init)
            clean = 0
        hit_out = abs(t - next_out) < 1e-12 * max(1.0, t_end)
        if hit_out:
            next_out += st.output_every
        if every_step or hit_out or t >= t_end:
            times.append(t)
            snaps.append(u.copy())
    ledger = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    log.debug("run %s finished: %d steps", scenario.name, len(rows) - 1)
    return Trajectory(scenario, np.array(times), np.array(snaps), ledger, every_step)
