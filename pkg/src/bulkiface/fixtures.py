"""Negative-control fixtures.

Each fixture breaks exactly one structural property so that the matching
check has something to flag. They are used by the ``verify-all`` command and
by the test-suite.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .geometry import ReflectionMap
from .kinetics import LOG_FLOOR, EntropyModel, KineticModel

# flag names each fixture is designed to raise
EXPECTED_FLAGS = {
    "kinetics_quasi_positivity": {"f_quasi_positivity_violation", "f_dissipation_violation"},
    "entropy_violating_rate": {"entropy_defect"},
    "mismatched_reflection": {"gamma_fixed_defect"},
    "corrupted_snapshot": {"residual_jump"},
}


@dataclasses.dataclass(frozen=True)
class ConstantRateNetwork:
    """``f(u) = -rate (alpha - beta)`` regardless of ``u``.

    With ``alpha_1 - beta_1 > 0`` the first species is consumed even where it
    vanishes, which breaks quasi-positivity.
    """

    stoich: np.ndarray
    rate: float = 1.0

    def rates(self, u, side: int = 1) -> np.ndarray:
        u = np.atleast_2d(u)
        return np.broadcast_to(-self.rate * np.asarray(self.stoich, float), u.shape).copy()


def quasi_positivity_fixture(n: int = 2):
    """Network and entropy for the quasi-positivity negative control."""
    stoich = np.zeros(n)
    stoich[0] = 1.0
    if n > 1:
        stoich[1] = -1.0
    return ConstantRateNetwork(stoich), EntropyModel(n, np.ones(n), np.ones(n))


@dataclasses.dataclass(frozen=True)
class EntropyViolatingModel:
    """Bulk rate ``f = +log(u / u_ref)`` with the base interface rate.

    ``f . Dh = |log u|^2 >= 0``, so the bulk reactions produce entropy.
    """

    base: KineticModel

    @property
    def entropy(self) -> EntropyModel:
        return self.base.entropy

    @property
    def n_species(self) -> int:
        return self.base.n_species

    def f(self, u, side: int) -> np.ndarray:
        ref = self.base.entropy.ref(side)
        return np.log(np.maximum(np.atleast_2d(u), LOG_FLOOR) / ref)

    def r(self, up, um) -> np.ndarray:
        return self.base.r(up, um)


def entropy_violating_scenario(scenario):
    return dataclasses.replace(scenario, model=EntropyViolatingModel(scenario.model))


def mismatched_reflection(m: ReflectionMap, shift: float = 0.01) -> ReflectionMap:
    """Reflection map whose lower height function is shifted by ``shift``.

    Only meaningful for hypograph maps: the two height functions no longer
    agree on the interface, so interface points are moved.
    """
    if m.kind != "hypograph":
        raise ValueError("mismatched fixture needs a hypograph map")
    return dataclasses.replace(m, eta1=m.eta1.shifted(shift))


def corrupted_trajectory(traj, index: int = -1, factor: float = 1.1):
    """Copy of ``traj`` with one snapshot scaled by ``factor``.

    The default is the final snapshot. The residuals are weak in time, so an
    interior snapshot only enters through its two neighbouring intervals and a
    corruption there is an O(dt) effect, the same order as the quadrature
    error itself. The final snapshot enters the boundary term directly.
    """
    snaps = traj.snapshots.copy()
    snaps[index] *= factor
    return dataclasses.replace(traj, snapshots=snaps)
