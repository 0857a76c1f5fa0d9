"""Characteristics-based upwinding of the transported fields.

The material derivative is discretized by tracing each node one step
back along the convection field, clamping the foot to the closed
domain, and evaluating the previous temperature / solid-fraction
fields there by P1 interpolation.  Interpolation weights are convex,
so nodal bounds (y >= 0, 0 <= xi <= 1) survive the transport step and
no CFL restriction applies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mesh import StructuredMesh, interpolate


@dataclass(frozen=True)
class VelocityField:
    """Convection velocity (x, t) -> vector, deterministic in (x, t)."""

    evaluator: Callable[[np.ndarray, float], np.ndarray]
    description: str = "velocity"

    @classmethod
    def zero(cls, dimension: int) -> "VelocityField":
        def _eval(coords, t):
            return np.zeros((coords.shape[0], dimension))
        return cls(_eval, "zero velocity")

    @classmethod
    def constant(cls, vector) -> "VelocityField":
        vec = np.atleast_1d(np.asarray(vector, dtype=float))

        def _eval(coords, t):
            return np.broadcast_to(vec, (coords.shape[0], vec.size))
        return cls(_eval, f"constant velocity {tuple(vec)}")

    def __call__(self, coords: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(self.evaluator(coords, t), dtype=float)


@dataclass(frozen=True)
class AdvectedPair:
    """Upwinded fields (previous step composed with the foot map)."""

    y_bar: np.ndarray
    xi_bar: np.ndarray
    clamped_fraction: float

    def __post_init__(self):
        self.y_bar.setflags(write=False)
        self.xi_bar.setflags(write=False)


def characteristic_feet(mesh: StructuredMesh, v: VelocityField,
                        t_n: float, tau: float):
    """Departure points x - tau * v(x, t_n), clamped to the domain box.

    Returns ``(feet, clamped_fraction)`` where the fraction counts
    nodes whose foot left the closed domain and was projected back.
    """
    if not tau > 0:
        raise ValueError(f"time step must be positive, got {tau}")
    coords = mesh.node_coords
    vel = v(coords, t_n)
    if vel.shape != coords.shape:
        raise ValueError(f"velocity evaluator returned shape {vel.shape}, "
                         f"expected {coords.shape}")
    feet = coords - tau * vel
    lo = np.asarray(mesh.lower)
    hi = np.asarray(mesh.upper)
    clamped = np.clip(feet, lo, hi)
    moved = np.any(clamped != feet, axis=1)
    return clamped, float(moved.mean())


def advect(mesh: StructuredMesh, feet: np.ndarray, y_prev: np.ndarray,
           xi_prev: np.ndarray, clamped_fraction: float = 0.0) -> AdvectedPair:
    """P1-interpolate the previous fields at the characteristic feet."""
    feet = np.asarray(feet, dtype=float)
    lo = np.asarray(mesh.lower)
    hi = np.asarray(mesh.upper)
    tol = 1e-12 * float(np.max(hi - lo))
    if np.any(feet < lo - tol) or np.any(feet > hi + tol):
        raise ValueError("characteristic feet outside the closed domain; "
                         "clamp before interpolating")
    y_bar = interpolate(mesh, np.asarray(y_prev, dtype=float), feet)
    xi_bar = interpolate(mesh, np.asarray(xi_prev, dtype=float), feet)
    return AdvectedPair(y_bar=y_bar, xi_bar=xi_bar,
                        clamped_fraction=float(clamped_fraction))
