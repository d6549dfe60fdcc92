"""Distances between particle measures and grid densities.

The bounded Lipschitz distance is approximated from below by the supremum over
a fixed finite family of test functions of position and spin, each with sup
norm and Lipschitz constant at most one:

* clip(theta - c, -1, 1) for shifts c on a uniform grid,
* the same ramps times cos(2 pi k x_1) / (1 + 2 pi k) and sin(2 pi k x_1) / (1 + 2 pi k).

The product bound |grad (g h)| <= |g'| |h| + |g| |h'| <= 1 keeps every member
inside the unit ball of the bounded Lipschitz norm.
"""
from __future__ import annotations

import math

import numpy as np

from .pde import GridSlice
from .simulate import ParticleMeasure

SHIFTS = np.linspace(-4.0, 4.0, 81)
MODES = 3


def _atoms(measure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x_1, theta, weight) for every atom of a particle measure or grid slice."""
    if isinstance(measure, ParticleMeasure):
        x = np.asarray(measure.x, float)
        x1 = x[:, 0] if x.ndim == 2 else x
        return x1, np.asarray(measure.theta, float), np.asarray(measure.weights, float)
    if isinstance(measure, GridSlice):
        masses = measure.cell_masses()
        sp = measure.space
        x1 = np.broadcast_to(sp.x[:, None, None], masses.shape)
        th = np.broadcast_to(measure.theta.points, masses.shape)
        return x1.ravel(), th.ravel(), masses.ravel()
    raise TypeError(f"cannot read atoms from {type(measure).__name__}")


def _family_integrals(x1, theta, weight, shifts, modes) -> np.ndarray:
    ramps = np.clip(theta[None, :] - shifts[:, None], -1.0, 1.0)  # (C, atoms)
    factors = [np.ones_like(x1)]
    for k in range(1, modes + 1):
        damp = 1.0 / (1.0 + 2 * math.pi * k)
        factors += [damp * np.cos(2 * math.pi * k * x1), damp * np.sin(2 * math.pi * k * x1)]
    spatial = np.array(factors) * weight  # (F, atoms)
    return spatial @ ramps.T  # (F, C)


def bl_distance(mu, xi, shifts=SHIFTS, modes: int = MODES) -> float:
    """Lower bound of the bounded Lipschitz distance between two measures.

    Either argument may be a ParticleMeasure or a GridSlice.
    """
    shifts = np.asarray(shifts, float)
    a = _family_integrals(*_atoms(mu), shifts, modes)
    b = _family_integrals(*_atoms(xi), shifts, modes)
    return float(np.max(np.abs(a - b)))
