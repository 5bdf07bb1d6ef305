"""Numpy implementations of the per-cell kernels (fallback backend)."""

from __future__ import annotations

import numpy as np


def _monomials(x, powers):
    # x: (m, n), powers: (R, n) -> (m, R); 0**0 == 1 in numpy
    return np.prod(x[:, None, :] ** powers[None, :, :], axis=2)


def mass_action_rates(u, alpha, beta, k, u_ref):
    u = np.ascontiguousarray(u, dtype=float)
    ub = u / u_ref
    diff = _monomials(ub, alpha) - _monomials(ub, beta)
    return -(diff * k) @ (alpha - beta)


def polynomial_transmission(up, um, gamma, delta, k, u_ref_plus, u_ref_minus):
    a = np.asarray(up, dtype=float) / u_ref_plus
    b = np.asarray(um, dtype=float) / u_ref_minus
    p = np.prod(a ** gamma * b ** delta, axis=1)
    q = np.prod(a ** delta * b ** gamma, axis=1)
    return k * (p - q)[:, None] * (gamma - delta)[None, :]


def boltzmann_density(u, u_ref, shift):
    r = np.asarray(u, dtype=float) / u_ref
    with np.errstate(divide="ignore", invalid="ignore"):
        rlogr = np.where(r > 0.0, r * np.log(np.where(r > 0.0, r, 1.0)), 0.0)
    b = rlogr - r
    if shift:
        b = b + 1.0
    return (u_ref * b).sum(axis=1)


def bregman_density(u, big_u, u_ref):
    a = np.asarray(u, dtype=float) / u_ref
    b = np.asarray(big_u, dtype=float) / u_ref
    d = (a - b) / b
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = (1.0 + d) * np.log1p(np.where(a > 0.0, d, 0.0)) - d
    inner = np.where(a > 0.0, inner, 1.0)
    return (u_ref * b * inner).sum(axis=1)
