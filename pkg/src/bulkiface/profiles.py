"""C² cutoff profiles shared by the truncation families.

All profiles are built from the quintic smoothstep ``S(s) = 6s^5 - 15s^4 + 10s^3``
on ``[0, 1]``, which has vanishing first and second derivatives at both ends.
"""

from __future__ import annotations

import numpy as np


def smoothstep(s):
    """Quintic smoothstep and its first two derivatives, clamped outside [0, 1]."""
    s = np.asarray(s, dtype=float)
    t = np.clip(s, 0.0, 1.0)
    inside = (s > 0.0) & (s < 1.0)
    # the polynomial can overshoot 1 by an ulp just below t = 1
    val = np.clip(t * t * t * (t * (6.0 * t - 15.0) + 10.0), 0.0, 1.0)
    d1 = np.where(inside, 30.0 * t * t * (1.0 - t) ** 2, 0.0)
    d2 = np.where(inside, 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t), 0.0)
    return val, d1, d2


def cutoff(s):
    """Decreasing cutoff: 1 on (-inf, 0], 0 on [1, inf), strictly decreasing inside.

    Returns ``(value, first derivative, second derivative)``.
    """
    val, d1, d2 = smoothstep(s)
    return 1.0 - val, -d1, -d2


def radial_bump(rho):
    """Radial bump equal to 1 for ``rho <= 1/2`` and 0 for ``rho >= 1``."""
    val, _, _ = cutoff(2.0 * np.asarray(rho, dtype=float) - 1.0)
    return val
