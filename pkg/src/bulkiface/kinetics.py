"""Entropy, reaction and transmission rates, their regularisation, and
structural checks.

Densities are arrays of shape ``(m, n)`` (``m`` sample points or cells, ``n``
species). Normalised densities are ``u / u_ref`` per species and side. The
transmission sign convention is ``r_plus = r`` and ``r_minus = -r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _core
from .errors import ConfigError, DomainError

PLUS, MINUS = 1, -1
LOG_FLOOR = 1e-30


def boltzmann(r, shift: bool = False):
    """``r log r - r`` (``+1`` if shifted) with ``0 log 0 = 0``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise DomainError("boltzmann function is defined for r >= 0 only")
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0) - r
    return val + 1.0 if shift else val


def cosh_potential(r):
    """``C(r) = 4 (cosh(r/2) - 1)`` and ``C'(r) = 2 sinh(r/2)``."""
    r = np.asarray(r, dtype=float)
    return 4.0 * (np.cosh(0.5 * r) - 1.0), 2.0 * np.sinh(0.5 * r)


def _vec(x, n, what):
    a = np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()
    if np.any(~np.isfinite(a)):
        raise ConfigError(f"{what} must be finite")
    return a


@dataclass(frozen=True)
class EntropyModel:
    """Boltzmann entropy ``h(u) = sum_i u_ref_i B(u_i / u_ref_i)`` on each side."""

    n_species: int
    u_ref_plus: np.ndarray
    u_ref_minus: np.ndarray
    shift: bool = True

    def __post_init__(self):
        for name in ("u_ref_plus", "u_ref_minus"):
            v = _vec(getattr(self, name), self.n_species, name)
            if np.any(v <= 0):
                raise ConfigError(f"{name} must be positive")
            object.__setattr__(self, name, v)

    def ref(self, side: int) -> np.ndarray:
        return self.u_ref_plus if side == PLUS else self.u_ref_minus

    def density(self, u, side: int = PLUS) -> np.ndarray:
        """Pointwise entropy density, shape ``(m,)``."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if np.any(u < 0):
            raise DomainError("entropy density needs u >= 0")
        return _core.boltzmann_density(np.ascontiguousarray(u), self.ref(side), bool(self.shift))

    def gradient(self, u, side: int = PLUS) -> np.ndarray:
        return entropy_gradient(self, u, side)

    def floored_gradient(self, u, side: int = PLUS, floor: float = LOG_FLOOR) -> np.ndarray:
        """``log(max(u, floor) / u_ref)``; only used inside diagnostics."""
        return np.log(np.maximum(np.asarray(u, dtype=float), floor) / self.ref(side))


def entropy_gradient(model: EntropyModel, u, side: int = PLUS) -> np.ndarray:
    """``D_i h(u) = log(u_i / u_ref_i)``; the shift does not enter."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(np.isnan(u)):
        raise DomainError("entropy gradient needs strictly positive densities (floor first)")
    return np.log(u / model.ref(side))


# --------------------------------------------------------------------- reactions


@dataclass(frozen=True)
class ReactionNetwork:
    """Reversible mass-action reactions ``alpha <-> beta``.

    ``alpha`` and ``beta`` have shape ``(R, n)``; ``k_plus`` and ``k_minus`` are
    the rate constants in the plus and minus compartment, one per reaction.
    """

    alpha: np.ndarray
    beta: np.ndarray
    k_plus: np.ndarray
    k_minus: np.ndarray
    u_ref_plus: np.ndarray
    u_ref_minus: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if alpha.shape != beta.shape:
            raise ConfigError("alpha and beta must have the same shape")
        if np.any(alpha < 0) or np.any(beta < 0) or np.any(alpha != np.round(alpha)) or np.any(beta != np.round(beta)):
            raise ConfigError("stoichiometric coefficients must be nonnegative integers")
        n_r, n = alpha.shape
        kp = _vec(self.k_plus, n_r, "k_plus")
        km = _vec(self.k_minus, n_r, "k_minus")
        if np.any(kp < 0) or np.any(km < 0):
            raise ConfigError("rate constants must be nonnegative")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "k_plus", kp)
        object.__setattr__(self, "k_minus", km)
        object.__setattr__(self, "u_ref_plus", _vec(self.u_ref_plus, n, "u_ref_plus"))
        object.__setattr__(self, "u_ref_minus", _vec(self.u_ref_minus, n, "u_ref_minus"))

    @classmethod
    def empty(cls, n: int) -> "ReactionNetwork":
        z = np.zeros((0, n))
        return cls(z, z, np.zeros(0), np.zeros(0), np.ones(n), np.ones(n))

    @property
    def n_species(self) -> int:
        return self.alpha.shape[1]

    @property
    def n_reactions(self) -> int:
        return self.alpha.shape[0]

    def k(self, side: int) -> np.ndarray:
        return self.k_plus if side == PLUS else self.k_minus

    def ref(self, side: int) -> np.ndarray:
        return self.u_ref_plus if side == PLUS else self.u_ref_minus

    def rates(self, u, side: int = PLUS) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if self.n_reactions == 0:
            return np.zeros_like(u)
        return _core.mass_action_rates(
            np.ascontiguousarray(u), self.alpha, self.beta, self.k(side), self.ref(side)
        )

    def conserved_directions(self) -> np.ndarray:
        """Basis of vectors ``w`` with ``w . (alpha - beta) = 0`` for all reactions."""
        if self.n_reactions == 0:
            return np.eye(self.n_species)
        _, s, vt = np.linalg.svd(self.alpha - self.beta)
        rank = int((s > 1e-12).sum())
        return vt[rank:]


def mass_action_rate(network: ReactionNetwork, u, side: int = PLUS) -> np.ndarray:
    """``f_i = -k (alpha_i - beta_i)(prod ubar^alpha - prod ubar^beta)`` summed over reactions."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise DomainError("mass-action rates need u >= 0")
    out = network.rates(np.atleast_2d(u), side)
    return out[0] if u.ndim == 1 else out


# ------------------------------------------------------------------ transmission


@dataclass(frozen=True)
class LinearTransmission:
    """``r_i = k_i (ubar_i^+ - ubar_i^-)``."""

    k: np.ndarray
    u_ref_plus: np.ndarray
    u_ref_minus: np.ndarray
    variant: str = field(default="linear", init=False)

    def __post_init__(self):
        k = np.atleast_1d(np.asarray(self.k, dtype=float))
        if np.any(k <= 0):
            raise ConfigError("linear transmission needs k_i > 0")
        n = len(k)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "u_ref_plus", _vec(self.u_ref_plus, n, "u_ref_plus"))
        object.__setattr__(self, "u_ref_minus", _vec(self.u_ref_minus, n, "u_ref_minus"))

    @property
    def n_species(self) -> int:
        return len(self.k)

    def rates(self, up, um) -> np.ndarray:
        up, um = np.atleast_2d(up), np.atleast_2d(um)
        return self.k * (up / self.u_ref_plus - um / self.u_ref_minus)


@dataclass(frozen=True)
class PolynomialTransmission:
    """``r_i = k_G (gamma_i - delta_i)(prod a^gamma b^delta - prod a^delta b^gamma)``
    with ``a, b`` the normalised plus and minus traces."""

    gamma: np.ndarray
    delta: np.ndarray
    k_gamma: float
    u_ref_plus: np.ndarray
    u_ref_minus: np.ndarray
    variant: str = field(default="polynomial", init=False)

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        d = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if g.shape != d.shape or np.any(g < 0) or np.any(d < 0) or np.any(g != np.round(g)) or np.any(d != np.round(d)):
            raise ConfigError("gamma and delta must be nonnegative integer vectors of equal length")
        if not self.k_gamma >= 0:
            raise ConfigError("k_gamma must be nonnegative")
        n = len(g)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "k_gamma", float(self.k_gamma))
        object.__setattr__(self, "u_ref_plus", _vec(self.u_ref_plus, n, "u_ref_plus"))
        object.__setattr__(self, "u_ref_minus", _vec(self.u_ref_minus, n, "u_ref_minus"))

    @property
    def n_species(self) -> int:
        return len(self.gamma)

    def rates(self, up, um) -> np.ndarray:
        return _core.polynomial_transmission(
            np.ascontiguousarray(np.atleast_2d(up), dtype=float),
            np.ascontiguousarray(np.atleast_2d(um), dtype=float),
            self.gamma, self.delta, self.k_gamma, self.u_ref_plus, self.u_ref_minus,
        )


def _coef_constant(c, up, um):
    return np.broadcast_to(c, (len(up), len(c)))


def _coef_linear_total(c, up, um):
    return c[None, :] * (1.0 + up.sum(axis=1) + um.sum(axis=1))[:, None]


def _coef_exp_decay(c, up, um):
    return c[None, :] * np.exp(-(up.sum(axis=1) + um.sum(axis=1)))[:, None]


COEFFICIENT_FORMS = {
    "constant": _coef_constant,
    "linear_total": _coef_linear_total,
    "exp_decay": _coef_exp_decay,
}


@dataclass(frozen=True)
class NonlinearCoefficientTransmission:
    """``r_i = k_i(u+, u-) ((ubar_i^+)^gamma_i - (ubar_i^-)^gamma_i)``.

    ``k_i`` is chosen from :data:`COEFFICIENT_FORMS` and scaled by ``c``.
    """

    gamma: np.ndarray
    c: np.ndarray
    form: str
    u_ref_plus: np.ndarray
    u_ref_minus: np.ndarray
    variant: str = field(default="nonlinear_coefficient", init=False)

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if np.any(g <= 0):
            raise ConfigError("nonlinear-coefficient exponents must be positive")
        n = len(g)
        c = _vec(self.c, n, "k_i")
        if np.any(c < 0):
            raise ConfigError("coefficient scales must be nonnegative")
        if self.form not in COEFFICIENT_FORMS:
            raise ConfigError(f"unknown coefficient form {self.form!r}; choose from {sorted(COEFFICIENT_FORMS)}")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "u_ref_plus", _vec(self.u_ref_plus, n, "u_ref_plus"))
        object.__setattr__(self, "u_ref_minus", _vec(self.u_ref_minus, n, "u_ref_minus"))

    @property
    def n_species(self) -> int:
        return len(self.gamma)

    def rates(self, up, um) -> np.ndarray:
        up = np.atleast_2d(np.asarray(up, dtype=float))
        um = np.atleast_2d(np.asarray(um, dtype=float))
        kc = COEFFICIENT_FORMS[self.form](self.c, up, um)
        return kc * ((up / self.u_ref_plus) ** self.gamma - (um / self.u_ref_minus) ** self.gamma)


def transmission_rate(model, u_plus, u_minus):
    """Return ``(r_plus, r_minus)`` with ``r_minus = -r_plus``."""
    up = np.asarray(u_plus, dtype=float)
    um = np.asarray(u_minus, dtype=float)
    if np.any(up < 0) or np.any(um < 0):
        raise DomainError("transmission rates need nonnegative traces")
    r = model.rates(np.atleast_2d(up), np.atleast_2d(um))
    if up.ndim == 1:
        r = r[0]
    return r, -r


# ------------------------------------------------------------------------ models


@dataclass(frozen=True)
class KineticModel:
    """Entropy, bulk network and interface transmission for one system."""

    entropy: EntropyModel
    network: ReactionNetwork
    transmission: object

    @property
    def n_species(self) -> int:
        return self.entropy.n_species

    def f(self, u, side: int) -> np.ndarray:
        return self.network.rates(u, side)

    def r(self, up, um) -> np.ndarray:
        return self.transmission.rates(up, um)


def model_from_dict(d: dict) -> KineticModel:
    """Build a :class:`KineticModel` from a model descriptor."""
    try:
        n = int(d["n_species"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("model descriptor needs an integer n_species") from exc
    if n < 1:
        raise ConfigError("n_species must be >= 1")
    refp = d.get("u_ref_plus", np.ones(n))
    refm = d.get("u_ref_minus", np.ones(n))
    entropy = EntropyModel(n, refp, refm, bool(d.get("shift", True)))
    if d.get("alpha") is not None:
        alpha = np.atleast_2d(np.asarray(d["alpha"], dtype=float))
        beta = np.atleast_2d(np.asarray(d["beta"], dtype=float))
        if alpha.shape[1] != n:
            raise ConfigError("alpha/beta length must equal n_species")
        n_r = alpha.shape[0]
        network = ReactionNetwork(alpha, beta, _vec(d.get("k_plus", 1.0), n_r, "k_plus"),
                                  _vec(d.get("k_minus", 1.0), n_r, "k_minus"), refp, refm)
    else:
        network = ReactionNetwork.empty(n)
        network = ReactionNetwork(network.alpha, network.beta, network.k_plus, network.k_minus, refp, refm)
    variant = d.get("transmission_variant", "linear")
    if variant == "linear":
        trans = LinearTransmission(_vec(d.get("k_i", 1.0), n, "k_i"), refp, refm)
    elif variant == "polynomial":
        trans = PolynomialTransmission(d["gamma"], d["delta"], float(d.get("k_gamma", 1.0)), refp, refm)
    elif variant == "nonlinear_coefficient":
        k_i = d.get("k_i", "constant")
        if isinstance(k_i, str):
            form, scale = k_i, d.get("k_scale", 1.0)
        else:
            form, scale = d.get("k_form", "constant"), k_i
        trans = NonlinearCoefficientTransmission(d.get("gamma", np.ones(n)), _vec(scale, n, "k_i"), form, refp, refm)
    else:
        raise ConfigError(f"unknown transmission_variant {variant!r}")
    if trans.n_species != n:
        raise ConfigError("transmission parameters do not match n_species")
    return KineticModel(entropy, network, trans)


# ---------------------------------------------------------------- regularisation


def damp(values, epsilon: float) -> np.ndarray:
    """Row-wise ``v / (1 + eps |v|_2)``."""
    v = np.asarray(values, dtype=float)
    norm = np.linalg.norm(np.atleast_2d(v), axis=-1)
    out = np.atleast_2d(v) / (1.0 + epsilon * norm)[:, None]
    return out.reshape(v.shape)


@dataclass(frozen=True)
class RegularizedModel:
    """Rates damped by ``1 / (1 + eps |rate|_2)`` so that ``|rate| <= 1/eps``."""

    base: KineticModel
    epsilon: float

    @property
    def entropy(self) -> EntropyModel:
        return self.base.entropy

    @property
    def n_species(self) -> int:
        return self.base.n_species

    def f(self, u, side: int) -> np.ndarray:
        return damp(self.base.f(u, side), self.epsilon)

    def r(self, up, um) -> np.ndarray:
        # |r^+| = |r^-| so one damping factor serves both sides
        return damp(self.base.r(up, um), self.epsilon)


def regularize(model: KineticModel, epsilon: float) -> RegularizedModel:
    if not (0.0 < epsilon <= 1.0):
        raise DomainError(f"epsilon must lie in (0, 1], got {epsilon}")
    return RegularizedModel(model, float(epsilon))


def clip_initial_data(u0, epsilon: float) -> np.ndarray:
    """``min(u0, 1/eps)`` componentwise."""
    if not (0.0 < epsilon <= 1.0):
        raise DomainError(f"epsilon must lie in (0, 1], got {epsilon}")
    return np.minimum(np.asarray(u0, dtype=float), 1.0 / epsilon)


# ------------------------------------------------------------ gradient structure


@dataclass(frozen=True)
class GradientStructure:
    """Cosh dual dissipation potentials for bulk reactions and the interface.

    ``diffusion`` holds diagonal tensors per side with shape ``(n, 2)`` (or
    ``(m, n, 2)`` per cell). ``interface_terms`` is a list of
    ``(lambda, k_fn)`` pairs for the generalised interface potential, with
    ``k_fn(up, um) -> (m,)`` the coefficient in front of the symmetric power.
    """

    network: ReactionNetwork
    diffusion_plus: np.ndarray | None = None
    diffusion_minus: np.ndarray | None = None
    interface_terms: tuple = ()

    def kappa(self, u, side: int) -> np.ndarray:
        """``k prod ubar^{(alpha+beta)/2}`` per reaction, shape ``(m, R)``."""
        ub = np.atleast_2d(u) / self.network.ref(side)
        expo = 0.5 * (self.network.alpha + self.network.beta)
        return self.network.k(side)[None, :] * np.prod(ub[:, None, :] ** expo[None, :, :], axis=2)


def gradient_structure_for(model: KineticModel, A_plus=None, A_minus=None) -> GradientStructure:
    """Gradient structure generating ``model``'s bulk and interface rates."""
    t = model.transmission
    terms = ()
    if isinstance(t, LinearTransmission):
        n = t.n_species
        terms = tuple((np.eye(n)[i], (lambda i: lambda up, um: np.full(len(up), t.k[i]))(i)) for i in range(n))
    elif isinstance(t, PolynomialTransmission):
        lam = t.gamma - t.delta
        m = np.minimum(t.gamma, t.delta)

        def k_fn(up, um, t=t, m=m):
            a = up / t.u_ref_plus
            b = um / t.u_ref_minus
            return t.k_gamma * np.prod((a * b) ** m, axis=1)

        terms = ((lam, k_fn),)
    return GradientStructure(model.network, A_plus, A_minus, terms)


def rate_from_gradient_structure(gs: GradientStructure, entropy: EntropyModel, u, side: int = PLUS) -> np.ndarray:
    """Bulk rate ``sum_r kappa_r C'((alpha_r - beta_r) . (-Dh(u))) (alpha_r - beta_r)``."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    xi = -entropy_gradient(entropy, u, side)
    nu = gs.network.alpha - gs.network.beta
    if len(nu) == 0:
        return np.zeros_like(u)
    _, dc = cosh_potential(xi @ nu.T)
    return (gs.kappa(u, side) * dc) @ nu


def interface_rate_from_gradient_structure(gs: GradientStructure, entropy: EntropyModel, up, um) -> np.ndarray:
    """``r^+ = -d/dXi^+ R*_Gamma`` at ``Xi = -Dh``; signed ``lambda`` are allowed."""
    up = np.atleast_2d(np.asarray(up, dtype=float))
    um = np.atleast_2d(np.asarray(um, dtype=float))
    jump = -entropy_gradient(entropy, up, PLUS) + entropy_gradient(entropy, um, MINUS)
    a = up / entropy.u_ref_plus
    b = um / entropy.u_ref_minus
    out = np.zeros_like(up)
    for lam, k_fn in gs.interface_terms:
        lam = np.asarray(lam, dtype=float)
        kappa = k_fn(up, um) * np.prod((a * b) ** (0.5 * np.abs(lam)), axis=1)
        _, dc = cosh_potential(jump @ lam)
        out -= (kappa * dc)[:, None] * lam[None, :]
    return out


def check_ellipticity(tensors, a_min: float | None = None, n_dirs: int = 64,
                      rng: np.random.Generator | None = None) -> float:
    """Smallest Rayleigh quotient of diagonal tensors over random directions.

    ``tensors`` has trailing shape ``(2,)`` (diagonal entries). Raises
    :class:`ConfigError` if the estimate is not positive or below ``a_min``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    diag = np.asarray(tensors, dtype=float).reshape(-1, 2)
    theta = rng.uniform(0, 2 * np.pi, n_dirs)
    z = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    q = diag @ (z**2).T
    lo = float(min(q.min(), diag.min()))
    if not lo > 0 or (a_min is not None and lo < a_min):
        raise ConfigError(f"diffusion tensors are not uniformly elliptic (min eigenvalue {lo:.3g})")
    return lo


# -------------------------------------------------------------------- validation


def _log_uniform(rng, m, n, lo=1e-3, hi=1e3):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=(m, n)))


def validate_hypotheses(network, model, entropy: EntropyModel, n_samples: int = 10_000,
                        rng: np.random.Generator | None = None, tol: float = 1e-12) -> dict:
    """Worst-case violations of the structural hypotheses on random samples.

    ``network`` needs ``rates(u, side)``; ``model`` (transmission) needs
    ``rates(up, um)``. Sign conditions are measured relative to the magnitude
    of the summed terms so that roundoff on large samples is not flagged.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    rng = np.random.default_rng(0) if rng is None else rng
    n = entropy.n_species
    rep = {"n_samples": int(n_samples), "tolerance": tol}

    f_viol, qp_bulk = 0.0, 0.0
    for side in (PLUS, MINUS):
        u = _log_uniform(rng, n_samples, n) * entropy.ref(side)
        f = np.asarray(network.rates(u, side))
        terms = f * entropy_gradient(entropy, u, side)
        scale = np.maximum(np.abs(terms).sum(axis=1), 1.0)
        f_viol = max(f_viol, float(np.max(np.maximum(terms.sum(axis=1), 0.0) / scale)))
        for i in range(n):
            u0 = u.copy()
            u0[:, i] = 0.0
            fi = np.asarray(network.rates(u0, side))[:, i]
            qp_bulk = max(qp_bulk, float(np.max(np.maximum(-fi, 0.0))))
    rep["f_dissipation_violation"] = f_viol
    rep["f_quasi_positivity_violation"] = qp_bulk

    r_viol, mass, qp_int = 0.0, 0.0, 0.0
    if model is not None:
        up = _log_uniform(rng, n_samples, n) * entropy.u_ref_plus
        um = _log_uniform(rng, n_samples, n) * entropy.u_ref_minus
        rp, rm = transmission_rate(model, up, um)
        terms = rp * entropy_gradient(entropy, up, PLUS) + rm * entropy_gradient(entropy, um, MINUS)
        scale = np.maximum(np.abs(rp * entropy_gradient(entropy, up, PLUS)).sum(axis=1)
                           + np.abs(rm * entropy_gradient(entropy, um, MINUS)).sum(axis=1), 1.0)
        r_viol = float(np.max(np.maximum(-terms.sum(axis=1), 0.0) / scale))
        mass = float(np.max(np.abs(rp + rm)))
        for i in range(n):
            a, b = up.copy(), um.copy()
            a[:, i] = 0.0
            b[:, i] = 0.0
            qp_int = max(qp_int, float(np.max(np.maximum(transmission_rate(model, a, um)[0][:, i], 0.0))))
            qp_int = max(qp_int, float(np.max(np.maximum(transmission_rate(model, up, b)[1][:, i], 0.0))))
    rep["r_dissipation_violation"] = r_viol
    rep["mass_preservation_defect"] = mass
    rep["r_quasi_positivity_violation"] = qp_int
    rep["flags"] = [
        k for k in ("f_dissipation_violation", "f_quasi_positivity_violation", "r_dissipation_violation",
                    "r_quasi_positivity_violation")
        if rep[k] > tol
    ] + (["mass_preservation_defect"] if mass != 0.0 else [])
    rep["ok"] = not rep["flags"]
    return rep
