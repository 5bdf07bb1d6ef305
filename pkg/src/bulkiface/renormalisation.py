"""Projection truncations and discrete residuals of the renormalised formulation.

The residual operators test a stored trajectory against the renormalised
equations with space-time test functions ``psi(t, x) = theta(t) b(x)``. Time
integrals use the snapshot intervals: ``d/dt psi`` is integrated exactly and
paired with the truncation at the interval mid-state, all other terms use the
midpoint rule. Spatial terms reuse the solver's face transmissibilities, so
the only discretisation error left is the time quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import RelEntropyTruncation, _face_trans
from .errors import DomainError, GeometryError
from .geometry import MINUS, PLUS, reflected_partners
from .profiles import cutoff, radial_bump


# ------------------------------------------------------------ projection family


@dataclass(frozen=True)
class ProjectionTruncation:
    """``xi_j^E(u) = (u_j - 3E) omega(sum u / E - 1) + 3E`` on ``[0, inf)^{2n}``."""

    E: float
    n: int

    def __post_init__(self):
        if not self.E >= 1:
            raise ValueError("E must be >= 1")

    def _w(self, u):
        s = u.sum(axis=-1) / self.E - 1.0
        return cutoff(s)


def xi_E(trunc: ProjectionTruncation, j: int, u):
    """Value, gradient and Hessian of ``xi_j^E`` (``j`` is 1-based).

    ``u`` has shape ``(..., 2n)``. Written as ``u_j w + 3E (1 - w)`` so that
    the value is exactly ``u_j`` wherever ``w = 1``.
    """
    m = 2 * trunc.n
    if not 1 <= j <= m:
        raise IndexError(f"index j={j} out of range 1..{m}")
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != m:
        raise ValueError(f"expected {m} components, got {u.shape[-1]}")
    if np.any(u < 0):
        raise DomainError("xi_E is defined on nonnegative vectors")
    E = trunc.E
    w, w1, w2 = trunc._w(u)
    uj = u[..., j - 1]
    val = uj * w + 3.0 * E * (1.0 - w)
    ej = np.zeros(m)
    ej[j - 1] = 1.0
    a = (uj - 3.0 * E)
    grad = w[..., None] * ej + (a * w1 / E)[..., None] * np.ones(m)
    ones = np.ones((m, m))
    hess = ((w1 / E)[..., None, None] * (ej[:, None] * np.ones(m)[None, :] + np.ones(m)[:, None] * ej[None, :])
            + (a * w2 / E**2)[..., None, None] * ones)
    return val, grad, hess


def verify_projection_properties(E_sequence=(4.0, 16.0, 64.0), n: int = 2, sample_budget: int = 2000,
                        K: float = 8.0, rng: np.random.Generator | None = None) -> dict:
    """Property battery for the projection family along ``E_sequence``."""
    E_sequence = [float(e) for e in E_sequence]
    if len(E_sequence) < 3 or any(b <= a for a, b in zip(E_sequence, E_sequence[1:])):
        raise ValueError("E_sequence must be increasing with at least 3 entries")
    rng = np.random.default_rng(0) if rng is None else rng
    m = 2 * n
    # fixed battery for limits: |u|_1 <= K
    dirs = rng.dirichlet(np.ones(m), size=sample_budget)
    fixed = dirs * rng.uniform(0, K, size=(sample_budget, 1))
    # scale-free battery for uniform bounds: u = E v with |v|_1 spread over [0, 3]
    v = rng.dirichlet(np.ones(m), size=sample_budget) * rng.uniform(0, 3, size=(sample_budget, 1))
    v = np.vstack([v, rng.dirichlet(np.ones(m), size=sample_budget) * rng.uniform(1, 2, size=(sample_budget, 1))])

    rep = {"E_sequence": E_sequence, "identity_defect": [], "truncated_identity_defect": [], "gradient_limit_defect": [],
           "hessian_limit_size": [], "weighted_hessian_sup": [], "gradient_sup": []}
    for E in E_sequence:
        tr = ProjectionTruncation(E, n)
        # identity below the level: sum u <= E, including sum u = E and E/2
        low = rng.dirichlet(np.ones(m), size=sample_budget) * rng.uniform(0, E, size=(sample_budget, 1))
        low[0] = E / 2.0 / m
        low[1] = np.full(m, E / m)
        v6 = 0.0
        for j in range(1, m + 1):
            val, _, _ = xi_E(tr, j, low)
            v6 = max(v6, float(np.abs(val - low[:, j - 1]).max()))
        rep["identity_defect"].append(v6)
        # identity wherever the truncated values sum to <= E
        wide = rng.dirichlet(np.ones(m), size=sample_budget) * rng.uniform(0, 3 * E, size=(sample_budget, 1))
        vals = np.stack([xi_E(tr, j, wide)[0] for j in range(1, m + 1)], axis=1)
        keep = vals.sum(axis=1) <= E
        rep["truncated_identity_defect"].append(float(np.abs(vals[keep] - wide[keep]).max()) if keep.any() else 0.0)
        # gradient -> e_j and Hessian -> 0 on the fixed battery
        d1, d2 = 0.0, 0.0
        for j in range(1, m + 1):
            _, g, h = xi_E(tr, j, fixed)
            ej = np.zeros(m)
            ej[j - 1] = 1.0
            d1 = max(d1, float(np.abs(g - ej).max()))
            d2 = max(d2, float(np.abs(h).max()))
        rep["gradient_limit_defect"].append(d1)
        rep["hessian_limit_size"].append(d2)
        # uniform bounds on E-scaled samples
        us = E * v
        b2, b5 = 0.0, 0.0
        sq = np.sqrt(us)
        for j in range(1, m + 1):
            _, g, h = xi_E(tr, j, us)
            b5 = max(b5, float(np.abs(g).max()))
            b2 = max(b2, float((sq[:, :, None] * sq[:, None, :] * np.abs(h)).max()))
        rep["weighted_hessian_sup"].append(b2)
        rep["gradient_sup"].append(b5)

    def nonincreasing(x):
        return all(b <= a for a, b in zip(x, x[1:]))

    rep["exact_ok"] = max(rep["identity_defect"] + rep["truncated_identity_defect"]) == 0.0
    rep["gradient_limit_monotone"] = nonincreasing(rep["gradient_limit_defect"])
    rep["hessian_limit_monotone"] = nonincreasing(rep["hessian_limit_size"])
    rep["weighted_hessian_growth"] = max(rep["weighted_hessian_sup"]) / min(rep["weighted_hessian_sup"])
    rep["gradient_growth"] = max(rep["gradient_sup"]) / min(rep["gradient_sup"])
    rep["ok"] = bool(rep["exact_ok"] and rep["gradient_limit_monotone"] and rep["hessian_limit_monotone"]
                     and rep["weighted_hessian_growth"] < 1.5 and rep["gradient_growth"] < 1.5)
    return rep


def decay_scaling(n: int, E: float = 16.0, N_sequence=(2, 4, 8), n_samples: int = 20000,
                  rng: np.random.Generator | None = None) -> dict:
    """Measured ``sup |u~|_1 |D xi*|`` over the transition band for each ``N``."""
    from .diagnostics import truncation_xi_star

    rng = np.random.default_rng(0) if rng is None else rng
    sups = []
    for N in N_sequence:
        tr = RelEntropyTruncation(E, N)
        r = np.exp(rng.uniform(np.log(E), N * np.log(E), n_samples))
        w = rng.dirichlet(np.ones(2 * n), n_samples) * r[:, None]
        _, g = truncation_xi_star(tr, w[:, :n], w[:, n:])
        sups.append(float((r * np.linalg.norm(g, axis=1)).max()))
    ratios = [a / b for a, b in zip(sups, sups[1:])]
    return {"N": list(N_sequence), "sup": sups, "ratios": ratios,
            "ok": all(1.0 <= q <= 4.0 for q in ratios)}


# --------------------------------------------------------------- test functions


class TestFunction:
    """Scalar function of nonnegative vectors with value and gradient."""

    __test__ = False  # not a pytest class

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def __add__(self, other):
        return Combination(((1.0, self), (1.0, other)))

    def __rmul__(self, a):
        return Combination(((float(a), self),))


@dataclass(frozen=True)
class Combination(TestFunction):
    terms: tuple

    def value(self, x):
        return sum(a * f.value(x) for a, f in self.terms)

    def grad(self, x):
        return sum(a * f.grad(x) for a, f in self.terms)


@dataclass(frozen=True)
class ScaffoldShape(TestFunction):
    """``xi_hat(|x|_1) x_k``: equals ``x_k`` below ``E`` and is constant 0 beyond ``E^N``."""

    trunc: RelEntropyTruncation
    k: int  # 0-based component

    def value(self, x):
        v, _ = self.trunc.xi_hat(x.sum(axis=-1))
        return v * x[..., self.k]

    def grad(self, x):
        v, d = self.trunc.xi_hat(x.sum(axis=-1))
        g = (d * x[..., self.k])[..., None] * np.ones(x.shape[-1])
        g[..., self.k] += v
        return g


@dataclass(frozen=True)
class ProjectionShape(TestFunction):
    trunc: ProjectionTruncation
    k: int  # 0-based component

    def value(self, x):
        return xi_E(self.trunc, self.k + 1, x)[0]

    def grad(self, x):
        return xi_E(self.trunc, self.k + 1, x)[1]


@dataclass(frozen=True)
class ReducedProjectionShape(TestFunction):
    """Projection truncation on ``n`` variables (for the outer equations)."""

    E: float
    k: int

    def value(self, x):
        w = cutoff(x.sum(axis=-1) / self.E - 1.0)[0]
        return x[..., self.k] * w + 3 * self.E * (1 - w)

    def grad(self, x):
        w, w1, _ = cutoff(x.sum(axis=-1) / self.E - 1.0)
        g = ((x[..., self.k] - 3 * self.E) * w1 / self.E)[..., None] * np.ones(x.shape[-1])
        g[..., self.k] += w
        return g


@dataclass(frozen=True)
class Coordinate(TestFunction):
    k: int

    def value(self, x):
        return x[..., self.k].copy()

    def grad(self, x):
        g = np.zeros(x.shape)
        g[..., self.k] = 1.0
        return g


@dataclass(frozen=True)
class Constant(TestFunction):
    c: float = 1.0

    def value(self, x):
        return np.full(x.shape[:-1], self.c)

    def grad(self, x):
        return np.zeros(x.shape)


@dataclass(frozen=True)
class HighLevelShape(TestFunction):
    """``1 - xi_hat(|x|_1)`` with a large level: zero with zero gradient below ``E``."""

    trunc: RelEntropyTruncation

    def value(self, x):
        return 1.0 - self.trunc.xi_hat(x.sum(axis=-1))[0]

    def grad(self, x):
        return -self.trunc.xi_hat(x.sum(axis=-1))[1][..., None] * np.ones(x.shape[-1])


@dataclass(frozen=True)
class SpaceTimeBump:
    """``psi(t, x) = b(|x - center| / radius) / (1 + t)``."""

    center: np.ndarray
    radius: float

    def theta(self, t):
        return 1.0 / (1.0 + np.asarray(t, dtype=float))

    def spatial(self, x):
        return radial_bump(np.linalg.norm(np.atleast_2d(x) - self.center, axis=1) / self.radius)


# --------------------------------------------------------------- residual core


def _midpoint_cache(traj):
    """Midpoint states and regularised rates per step, cached on the trajectory."""
    cache = getattr(traj, "_midpoint_cache", None)
    if cache is not None:
        return cache
    sc = traj.scenario
    mesh = sc.mesh
    reg = sc.regularized
    S = traj.snapshots
    um = 0.5 * (S[:-1] + S[1:])
    n = um.shape[-1]
    fr = np.empty_like(um)
    for side in (PLUS, MINUS):
        c = mesh.cells(side)
        fr[:, c] = reg.f(um[:, c].reshape(-1, n), side).reshape(len(um), len(c), n)
    ip, im = mesh.iface_plus, mesh.iface_minus
    r = reg.r(um[:, ip].reshape(-1, n), um[:, im].reshape(-1, n)).reshape(len(um), len(ip), n)
    cache = (um, fr, r)
    object.__setattr__(traj, "_midpoint_cache", cache)
    return cache


def _weak_residual(traj, support, Z_fn, W_fn, psi: SpaceTimeBump) -> float:
    """Signed residual ``LHS - RHS`` of the discrete weak form.

    Test weights vanish outside the cell indices ``support``. ``Z_fn(u)`` maps
    states restricted to ``support``, shape ``(K, S, n)``, to the renormalised
    density with the spatial bump included, shape ``(K, S)``; ``W_fn(u)`` gives
    the per-species test weights, shape ``(K, S, n)``.
    """
    sc = traj.scenario
    if not traj.every_step:
        raise ValueError("residuals need a trajectory stored at every step (every_step=True)")
    mesh = sc.mesh
    support = np.asarray(support, dtype=int)
    if len(support) == 0:
        return 0.0
    um, fr, r = _midpoint_cache(traj)
    T = _face_trans(sc)
    V = mesh.volumes[support]
    t = traj.times
    S = traj.snapshots[:, support]
    th = psi.theta(t)
    thm = psi.theta(0.5 * (t[:-1] + t[1:]))
    dt = np.diff(t)

    # local index, -1 -> padded zero slot
    loc = np.full(mesh.n_cells, len(support))
    loc[support] = np.arange(len(support))
    fi, fj = mesh.interior_cells[:, 0], mesh.interior_cells[:, 1]
    fsel = (loc[fi] < len(support)) | (loc[fj] < len(support))
    fi, fj, Tf = fi[fsel], fj[fsel], T[fsel]
    ip, im = mesh.iface_plus, mesh.iface_minus
    isel = (loc[ip] < len(support)) | (loc[im] < len(support))
    ip, im, ln = ip[isel], im[isel], mesh.iface_length[isel]

    Zs = Z_fn(S)
    lhs = th[-1] * (V @ Zs[-1]) - th[0] * (V @ Zs[0]) - float(np.diff(th) @ (Z_fn(um[:, support]) @ V))
    W = W_fn(um[:, support])
    Wp = np.concatenate([W, np.zeros((W.shape[0], 1, W.shape[2]))], axis=1)
    diff = -np.einsum("fs,kfs,kfs->k", Tf, Wp[:, loc[fi]] - Wp[:, loc[fj]], um[:, fi] - um[:, fj])
    react = np.einsum("c,kcs,kcs->k", V, W, fr[:, support])
    iface = -np.einsum("f,kfs,kfs->k", ln, Wp[:, loc[ip]] - Wp[:, loc[im]], r[:, isel])
    rhs = float((dt * thm) @ (diff + react + iface))
    return float(lhs - rhs)


def _check_outer_support(sc, psi: SpaceTimeBump, side: int):
    geo = sc.geometry
    from shapely.geometry import Point

    dist = geo.interface_line.distance(Point(psi.center))
    if dist <= psi.radius:
        raise DomainError("test function support touches the interface")
    side_c = geo.signed_distance(psi.center)[0]
    if side * side_c <= 0:
        raise DomainError("test function centre is not in the requested compartment")


def renormalised_residual_outer(traj, zeta: TestFunction, psi: SpaceTimeBump, side: int = PLUS) -> float:
    """Signed residual of the renormalised bulk equations in compartment ``side``."""
    sc = traj.scenario
    _check_outer_support(sc, psi, side)
    mesh = sc.mesh
    b = psi.spatial(mesh.centers) * (mesh.compartment == side)
    supp = np.flatnonzero(b > 0)
    b = b[supp]

    def Z(u):
        return b[None, :] * zeta.value(u)

    def W(u):
        return b[None, :, None] * zeta.grad(u)

    return _weak_residual(traj, supp, Z, W, psi)


def plain_weak_residual(traj, k: int, psi: SpaceTimeBump, side: int, composed=None) -> float:
    """Standard weak-form residual for species ``k`` tested with ``psi`` on ``side``.

    With ``composed`` (reflected cell partners) the test function is
    ``psi o Phi`` supported on the compartment opposite to ``side``.
    """
    mesh = traj.scenario.mesh
    b = psi.spatial(mesh.centers) * (mesh.compartment == side)
    if composed is not None:
        bb = np.zeros(mesh.n_cells)
        src = composed >= 0
        bb[src] = b[composed[src]]
        b = bb
    supp = np.flatnonzero(b > 0)
    b = b[supp]

    def Z(u):
        return b[None, :] * u[..., k]

    def W(u):
        w = np.zeros(u.shape)
        w[..., k] = b[None, :]
        return w

    return _weak_residual(traj, supp, Z, W, psi)


def renormalised_residual_interface(traj, xi: TestFunction, rmap, psi: SpaceTimeBump, side: int = PLUS,
                                    partners: np.ndarray | None = None) -> float:
    """Signed residual of the renormalised interface equations near ``rmap.anchor``.

    ``xi`` acts on ``(u, u~)`` with ``u~`` the reflected field; the terms with
    derivatives in the reflected variables are evaluated on the opposite
    compartment through the reflected cell partners.
    """
    sc = traj.scenario
    mesh = sc.mesh
    partners = reflected_partners(rmap, mesh) if partners is None else partners
    b_all = psi.spatial(mesh.centers)
    own = (mesh.compartment == side) & (b_all > 0)
    if np.any(own & (partners < 0)):
        raise GeometryError("test function support leaves the reflection neighbourhood")
    supp_pts = mesh.centers[b_all > 0]
    if len(supp_pts) and not rmap.contains(supp_pts).all():
        raise GeometryError("test function support leaves the reflection neighbourhood")
    cells = np.flatnonzero(own)
    mirror = partners[cells]
    supp = np.concatenate([cells, np.unique(mirror)])
    nc = len(cells)
    mloc = nc + np.searchsorted(supp[nc:], mirror)
    b = b_all[cells]
    # weights moved onto a partner cell carry the volume ratio
    bm = b * mesh.volumes[cells] / mesh.volumes[mirror]
    n = sc.n_species

    def stack(u):
        return np.concatenate([u[:, :nc], u[:, mloc]], axis=-1)

    def Z(u):
        z = np.zeros(u.shape[:2])
        z[:, :nc] = b[None, :] * xi.value(stack(u))
        return z

    def W(u):
        g = xi.grad(stack(u))
        w = np.zeros(u.shape)
        w[:, :nc] = b[None, :, None] * g[..., :n]
        np.add.at(w, (slice(None), mloc), bm[None, :, None] * g[..., n:])
        return w

    return _weak_residual(traj, supp, Z, W, psi)


# ------------------------------------------------------------------ battery


def default_xi_shapes(n: int) -> list:
    """Twelve shapes on ``2n`` variables (for ``n = 2``): scaffold and two
    projection levels for every component."""
    shapes = []
    for k in range(2 * n):
        shapes.append(ScaffoldShape(RelEntropyTruncation(2.0, 2.0), k))
        shapes.append(ProjectionShape(ProjectionTruncation(1.0, n), k))
        shapes.append(ProjectionShape(ProjectionTruncation(2.0, n), k))
    return shapes


def default_zeta_shapes(n: int) -> list:
    shapes = []
    for k in range(n):
        shapes.append(ReducedProjectionShape(1.0, k))
        shapes.append(ReducedProjectionShape(2.0, k))
    return shapes


def default_interface_psis(rmap, n_bumps: int = 4) -> list:
    """Bumps centred at the anchor with radii up to 95% of the neighbourhood."""
    r = rmap.radius if np.isfinite(rmap.radius) else 0.5
    return [SpaceTimeBump(rmap.anchor, 0.95 * r * (k + 1) / n_bumps) for k in range(n_bumps)]


def default_outer_psis(geometry) -> list:
    """Two bumps per compartment, kept away from Gamma."""
    from shapely.geometry import Point

    out = []
    for side in (PLUS, MINUS):
        poly = geometry.polygon(side)
        c = np.asarray(poly.centroid.coords[0])
        for frac in (0.5, 0.9):
            d = geometry.interface_line.distance(Point(c))
            out.append((side, SpaceTimeBump(c, frac * d)))
    return out
