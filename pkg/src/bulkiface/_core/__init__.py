"""Per-cell kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and ``BULKIFACE_PURE_PYTHON``
is not set. ``BACKEND`` names the active implementation.
"""

from __future__ import annotations

import os

from . import _pykernels

python_kernels = _pykernels

try:
    if os.environ.get("BULKIFACE_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels as _active

    compiled_kernels = _active
    BACKEND = "cython"
except ImportError:
    _active = _pykernels
    compiled_kernels = None
    BACKEND = "python"

mass_action_rates = _active.mass_action_rates
polynomial_transmission = _active.polynomial_transmission
boltzmann_density = _active.boltzmann_density
bregman_density = _active.bregman_density

__all__ = [
    "BACKEND",
    "boltzmann_density",
    "bregman_density",
    "compiled_kernels",
    "mass_action_rates",
    "polynomial_transmission",
    "python_kernels",
]
