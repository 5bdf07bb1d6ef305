"""Entropy, dissipation, truncated relative entropy and the stability experiment."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _core
from .errors import DomainError, GeometryError, SolverError
from .geometry import MINUS, PLUS, partition_of_unity, reflected_partners, reflection_map
from .kinetics import LOG_FLOOR
from .profiles import cutoff

IOTA_FLOOR = 1e-8


# ----------------------------------------------------------- entropy/dissipation


def total_entropy(u, scenario) -> float:
    """``sum_cells |c| h(u_c)`` over both compartments."""
    u = np.asarray(u, dtype=float)
    mesh, ent = scenario.mesh, scenario.model.entropy
    total = 0.0
    for side in (PLUS, MINUS):
        cells = mesh.cells(side)
        total += float(mesh.volumes[cells] @ ent.density(u[cells], side))
    return total


def _face_trans(scenario):
    # cached on the scenario object: transmissibilities per species
    cache = scenario.__dict__.get("_trans_cache")
    if cache is None:
        from .solver import transmissibilities

        cache = np.stack([transmissibilities(scenario.mesh, scenario.diffusion[:, i, :])
                          for i in range(scenario.n_species)], axis=1)
        object.__setattr__(scenario, "_trans_cache", cache)
    return cache


def diffusive_dissipation(u, scenario):
    """Discrete ``4 sum_i |sqrt(A_i) grad sqrt(u_i)|^2`` per compartment."""
    mesh = scenario.mesh
    T = _face_trans(scenario)
    i, j = mesh.interior_cells[:, 0], mesh.interior_cells[:, 1]
    s = np.sqrt(np.maximum(u, 0.0))
    dens = 4.0 * (T * (s[i] - s[j]) ** 2).sum(axis=1)
    plus = mesh.compartment[i] == PLUS
    return float(dens[plus].sum()), float(dens[~plus].sum())


def rate_dissipation(u, scenario, rates=None, floor: float = LOG_FLOOR):
    """``(-f . Dh)`` integrated per compartment and ``sum_sigma r^sigma . Dh`` on Gamma.

    ``rates`` is any object with ``f(u, side)`` and ``r(up, um)``; by default
    the unregularised model. Logs use ``max(u, floor)``.
    """
    rates = scenario.model if rates is None else rates
    mesh, ent = scenario.mesh, scenario.model.entropy
    out = []
    for side in (PLUS, MINUS):
        cells = mesh.cells(side)
        f = rates.f(u[cells], side)
        dh = ent.floored_gradient(u[cells], side, floor)
        out.append(float(-(mesh.volumes[cells] * (f * dh).sum(axis=1)).sum()))
    up, um = u[mesh.iface_plus], u[mesh.iface_minus]
    if len(up):
        r = rates.r(up, um)
        jump = ent.floored_gradient(up, PLUS, floor) - ent.floored_gradient(um, MINUS, floor)
        d_int = float((mesh.iface_length * (r * jump).sum(axis=1)).sum())
    else:
        d_int = 0.0
    return out[0], out[1], d_int


def dissipation(u, scenario, rates=None):
    """``(D_bulk_plus, D_bulk_minus, D_int)`` at one state."""
    dp, dm = diffusive_dissipation(u, scenario)
    rp, rm, di = rate_dissipation(u, scenario, rates)
    return dp + rp, dm + rm, di


def entropy_inequality_check(traj, tol: float = 0.0) -> dict:
    """Defect ``H(t_k) + sum_{j<=k} dt_j D_j - H(0)`` along the ledger.

    Dissipation enters with its positive part, so rate laws that produce
    entropy are not booked as negative dissipation and show up as a positive
    defect.
    """
    L = traj.ledger
    D = np.maximum(L["D_bulk_plus"], 0) + np.maximum(L["D_bulk_minus"], 0) + np.maximum(L["D_int"], 0)
    cum = np.cumsum(L["dt"] * D)
    defect = L["H"] + cum - L["H"][0]
    min_d = float(min(L["D_bulk_plus"].min(), L["D_bulk_minus"].min(), L["D_int"].min()))
    max_pos = float(max(defect.max(), 0.0))
    return {
        "t": L["t"],
        "defect": defect,
        "max_positive_defect": max_pos,
        "min_dissipation": min_d,
        "flagged": bool(max_pos > tol),
    }


def write_entropy_csv(traj, path) -> None:
    chk = entropy_inequality_check(traj)
    L = traj.ledger
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "H", "D_bulk_plus", "D_bulk_minus", "D_int", "defect"])
        for k in range(len(L["t"])):
            w.writerow([repr(float(v)) for v in (L["t"][k], L["H"][k], L["D_bulk_plus"][k],
                                                  L["D_bulk_minus"][k], L["D_int"][k], chk["defect"][k])])


# ------------------------------------------------------- relative-entropy truncation


@dataclass(frozen=True)
class RelEntropyTruncation:
    """``xi_hat(r) = eta((log r - log E) / ((N - 1) log E))`` with the quintic cutoff."""

    E: float
    N: float = 4.0

    def __post_init__(self):
        if not self.E >= 2:
            raise ValueError("E must be >= 2")
        if not self.N >= 2:
            raise ValueError("N must be >= 2")

    @property
    def width(self) -> float:
        return (self.N - 1.0) * np.log(self.E)

    def xi_hat(self, r):
        """Value and derivative of ``xi_hat`` at ``r >= 0``."""
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            s = (np.log(np.maximum(r, 1e-300)) - np.log(self.E)) / self.width
        val, d1, _ = cutoff(s)
        der = np.where(r > 0, d1 / (np.maximum(r, 1e-300) * self.width), 0.0)
        return val, der

    def sup_log_derivative(self, n: int) -> float:
        """``sup |u~|_1 |D xi*|`` in closed form (the cutoff slope peaks at 15/8)."""
        return float(np.sqrt(2 * n) * 1.875 / self.width)


def truncation_xi_star(trunc: RelEntropyTruncation, u, u_tilde):
    """``xi*(u, u~) = xi_hat(|u|_1 + |u~|_1)`` and its gradient in all ``2n`` variables."""
    u = np.asarray(u, dtype=float)
    ut = np.asarray(u_tilde, dtype=float)
    if np.any(u < 0) or np.any(ut < 0):
        raise DomainError("truncations are evaluated on nonnegative densities")
    r = u.sum(axis=-1) + ut.sum(axis=-1)
    val, der = trunc.xi_hat(r)
    grad = np.repeat(np.asarray(der)[..., None], u.shape[-1] + ut.shape[-1], axis=-1)
    return val, grad


def truncation_zeta_star(trunc: RelEntropyTruncation, u):
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise DomainError("truncations are evaluated on nonnegative densities")
    val, der = trunc.xi_hat(u.sum(axis=-1))
    return val, np.repeat(np.asarray(der)[..., None], u.shape[-1], axis=-1)


def default_truncation(U, n: int, N: float = 4.0) -> RelEntropyTruncation:
    return RelEntropyTruncation(max(16.0, 8.0 * n * float(np.max(U))), N)


def coercivity_threshold(U, u_ref_plus, u_ref_minus, n: int) -> float:
    """``max(2, 4 n max U, exp(C0 + 1))`` with ``C0 = max |log(U / u_ref)|``."""
    U = np.asarray(U, dtype=float)
    refs = np.concatenate([np.atleast_1d(u_ref_plus), np.atleast_1d(u_ref_minus)])
    c0 = float(np.max(np.abs(np.log(U.reshape(-1, n) / refs[:n])))) if U.size else 0.0
    c0 = max(c0, float(np.max(np.abs(np.log(U.reshape(-1, n) / refs[n:])))))
    return float(max(2.0, 4.0 * n * U.max(), np.exp(c0 + 1.0)))


# ------------------------------------------------------------- relative entropy


def default_anchors(geometry):
    """Anchors and radii covering Gamma for the built-in templates."""
    z0, z1 = geometry.interface_endpoints
    length = geometry.interface_length
    P = 3
    radius = 0.8 * length
    while True:
        t = (np.arange(P) + 0.5) / P if geometry.name == "flat_symmetric" else np.linspace(0, 1, P)
        anchors = z0 + t[:, None] * (z1 - z0)
        spacing = length / P if geometry.name == "flat_symmetric" else length / (P - 1)
        radius = min(0.4, 1.2 * spacing)
        if 0.5 * radius > 0.55 * spacing:
            return anchors, np.full(P, radius)
        P += 1


@dataclass
class RelEntropyContext:
    """Partition of unity, reflection maps and reflected cell partners on one mesh."""

    scenario: object
    pou: object
    maps: list
    partners: np.ndarray  # (P, n_cells)
    phi_out: np.ndarray  # (n_cells,)
    phi: np.ndarray  # (n_cells, P)

    @classmethod
    def build(cls, scenario, anchors=None, radii=None) -> "RelEntropyContext":
        geo, mesh = scenario.geometry, scenario.mesh
        if anchors is None:
            anchors, radii = default_anchors(geo)
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(anchors),))
        pou = partition_of_unity(geo, anchors, radii)
        maps = [reflection_map(geo, a, r) for a, r in zip(anchors, radii)]
        partners = np.stack([reflected_partners(m, mesh) for m in maps])
        phi_out, phi = pou.evaluate(mesh.centers)
        missing = (phi > 0) & (partners.T < 0)
        if missing.any():
            c = np.argwhere(missing)[0]
            raise GeometryError(f"cell {c[0]} has phi_beta > 0 but no reflected partner (anchor {c[1]})")
        return cls(scenario, pou, maps, partners, phi_out, phi)


@dataclass(frozen=True)
class RelEntropyState:
    chi: np.ndarray
    classification: np.ndarray  # 'g', 'p', 'b'
    h_rel: np.ndarray
    H_rel: float
    E: float

    def fractions(self, volumes) -> dict:
        tot = volumes.sum()
        return {f"frac_S{k}": float(volumes[self.classification == k].sum() / tot) for k in "gpb"}


def relative_entropy(u, U, ctx: RelEntropyContext, trunc: RelEntropyTruncation) -> RelEntropyState:
    """Truncated relative entropy ``h(u) - h(U) - Dh(U).(chi u - U)`` cellwise.

    Written as ``Bregman(u | U) + (1 - chi) Dh(U) . u`` so that it is exact for
    ``u = U`` and independent of the entropy shift.
    """
    sc = ctx.scenario
    mesh, ent = sc.mesh, sc.model.entropy
    u = np.asarray(u, dtype=float)
    U = np.asarray(U, dtype=float)
    if np.any(U <= 0):
        raise DomainError("reference must be strictly positive")
    zeta, _ = truncation_zeta_star(trunc, u)
    chi = ctx.phi_out * zeta
    all_one = (ctx.phi_out <= 0) | (zeta == 1.0)
    for b in range(ctx.phi.shape[1]):
        active = ctx.phi[:, b] > 0
        ut = np.zeros_like(u)
        ut[active] = u[ctx.partners[b, active]]
        xi, _ = truncation_xi_star(trunc, u, ut)
        chi = chi + ctx.phi[:, b] * xi
        all_one &= ~active | (xi == 1.0)
    chi = np.clip(chi, 0.0, 1.0)
    chi[all_one] = 1.0
    h = np.empty(mesh.n_cells)
    for side in (PLUS, MINUS):
        cells = mesh.cells(side)
        ref = ent.ref(side)
        breg = _core.bregman_density(np.ascontiguousarray(u[cells]), np.ascontiguousarray(U[cells]), ref)
        h[cells] = breg + (1.0 - chi[cells]) * (np.log(U[cells] / ref) * u[cells]).sum(axis=1)
    l1 = u.sum(axis=1)
    cls_ = np.where(all_one, "g", np.where(l1 >= 0.5 * trunc.E, "p", "b"))
    return RelEntropyState(chi, cls_, h, float(mesh.volumes @ h), trunc.E)


def coercivity_check(rel: RelEntropyState, u, U, volumes) -> dict:
    """Ratios of ``H_rel`` to the Hellinger distance and to ``E log E |S_b|``."""
    hell = float(volumes @ ((np.sqrt(u) - np.sqrt(U)) ** 2).sum(axis=1))
    sb = float(volumes[rel.classification == "b"].sum())
    out = {"H_rel": rel.H_rel, "hellinger": hell, "measure_Sb": sb,
           "ratio_hellinger": None, "ratio_Sb": None}
    if hell > 0:
        out["ratio_hellinger"] = rel.H_rel / hell
    if sb > 0:
        out["ratio_Sb"] = rel.H_rel / (rel.E * np.log(rel.E) * sb)
    return out


# ------------------------------------------------------------ strong solution


@dataclass(frozen=True)
class StrongSolutionProfile:
    times: np.ndarray
    U: np.ndarray
    iota: float
    lipschitz_bound: float

    @classmethod
    def from_trajectory(cls, traj) -> "StrongSolutionProfile":
        mesh = traj.scenario.mesh
        U = traj.snapshots
        i, j = mesh.interior_cells[:, 0], mesh.interior_cells[:, 1]
        lip = float(np.abs(U[:, i] - U[:, j]).max() / mesh.h) if len(i) else 0.0
        return cls(traj.times, U, float(U.min()), lip)


def smooth_perturbation(scenario, l2_size: float, rng: np.random.Generator) -> np.ndarray:
    """Relative perturbation pattern ``u0 * (1 + a g)`` scaled to the given L2 norm."""
    x = scenario.mesh.centers
    n = scenario.n_species
    ph = rng.uniform(0, 2 * np.pi, size=(n, 2))
    g = np.sin(2 * np.pi * x[:, None, 0] + ph[None, :, 0]) * np.sin(2 * np.pi * x[:, None, 1] + ph[None, :, 1])
    base = scenario.initial * g
    norm = np.sqrt(scenario.mesh.volumes @ (base**2).sum(axis=1))
    return base * (l2_size / norm)


def stability_experiment(scenario, perturbation=None, trunc: RelEntropyTruncation | None = None,
                         ctx: RelEntropyContext | None = None, t_end: float | None = None,
                         reference=None) -> dict:
    """Run reference and perturbed trajectories and fit a Gronwall constant.

    ``perturbation`` is an additive initial-data field (``None`` or zeros give
    the degenerate identical-data run). The reference runs on the same mesh
    and time step; ``reference`` may pass a precomputed trajectory.
    """
    from .solver import run

    ref = run(scenario, t_end=t_end) if reference is None else reference
    prof = StrongSolutionProfile.from_trajectory(ref)
    if prof.iota < IOTA_FLOOR:
        raise SolverError(f"reference loses positivity (min U = {prof.iota:.3g})", {"iota": prof.iota})
    u0 = scenario.initial if perturbation is None else scenario.initial + perturbation
    if np.any(u0 < 0):
        raise DomainError("perturbed initial data must stay nonnegative")
    pert = ref if perturbation is None or not np.any(perturbation) else run(scenario, u0=u0, t_end=t_end)
    if len(pert.times) != len(ref.times) or np.abs(pert.times - ref.times).max() > 1e-12:
        raise SolverError("reference and perturbed snapshot times differ", {})
    n = scenario.n_species
    trunc = default_truncation(prof.U, n) if trunc is None else trunc
    ctx = RelEntropyContext.build(scenario) if ctx is None else ctx
    vol = scenario.mesh.volumes
    H, fr = [], []
    for u, U in zip(pert.snapshots, ref.snapshots):
        st = relative_entropy(u, U, ctx, trunc)
        H.append(st.H_rel)
        fr.append(st.fractions(vol))
    H = np.array(H)
    t = ref.times
    if H[0] > 0:
        with np.errstate(divide="ignore"):
            rates = (np.log(np.maximum(H[1:], 1e-300)) - np.log(H[0])) / t[1:]
        C = float(rates.max())
    else:
        C = float("nan")
    return {
        "times": t,
        "H_rel": H,
        "fractions": fr,
        "fitted_C": C,
        "H_rel_0": float(H[0]),
        "H_rel_T": float(H[-1]),
        "E": trunc.E,
        "N": trunc.N,
        "threshold_E": coercivity_threshold(prof.U, scenario.model.entropy.u_ref_plus,
                                            scenario.model.entropy.u_ref_minus, n),
        "iota": prof.iota,
        "lipschitz_bound": prof.lipschitz_bound,
        "reference": ref,
    }


def write_stability(result: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "stability.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "H_rel", "frac_Sg", "frac_Sp", "frac_Sb", "fitted_C"])
        for t, h, f in zip(result["times"], result["H_rel"], result["fractions"]):
            w.writerow([repr(float(t)), repr(float(h)), f["frac_Sg"], f["frac_Sp"], f["frac_Sb"],
                        repr(result["fitted_C"])])
    summary = {k: result[k] for k in ("H_rel_0", "H_rel_T", "fitted_C", "E", "N")}
    with open(out_dir / "stability.json", "w") as fh:
        json.dump(summary, fh, indent=2)
