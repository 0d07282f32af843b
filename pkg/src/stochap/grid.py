"""Staggered periodic grid, velocity quadrature and discrete operators.

Index conventions used throughout the package:

* primal arrays have ``M`` entries, entry ``i`` sits at ``x_i = i*dx``;
* dual arrays have ``M`` entries, entry ``i`` sits at ``x_{i+1/2}``;
* kinetic fields carry the velocity axis last, shape ``(..., M, Q)``.

Periodic wraparound is done with ``np.roll``; there are no ghost cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError, DimensionError

PRIMAL = "primal"
DUAL = "dual"


@dataclass(frozen=True)
class StaggeredGrid1D:
    num_cells: int
    domain_length: float = 1.0

    def __post_init__(self):
        if int(self.num_cells) != self.num_cells or self.num_cells < 3:
            raise ConfigError(f"num_cells must be an integer >= 3, got {self.num_cells}")
        if not self.domain_length > 0:
            raise ConfigError(f"domain_length must be positive, got {self.domain_length}")

    @property
    def dx(self) -> float:
        return self.domain_length / self.num_cells

    @property
    def primal_nodes(self) -> np.ndarray:
        return np.arange(self.num_cells) * self.dx

    @property
    def dual_nodes(self) -> np.ndarray:
        return (np.arange(self.num_cells) + 0.5) * self.dx

    def nodes(self, location: str) -> np.ndarray:
        if location == PRIMAL:
            return self.primal_nodes
        if location == DUAL:
            return self.dual_nodes
        raise AlignmentError(f"unknown node family {location!r}")

    def wrap(self, index):
        """Map any integer index (or array of them) into ``[0, M)``."""
        return np.mod(index, self.num_cells)


@dataclass(frozen=True, eq=False)
class VelocityQuadrature:
    """Nodes and weights on [-1, 1] with ``sum(weights) == 1``.

    The weighted sum ``weights @ phi`` realizes the velocity average
    ``Pi phi = 1/2 int phi dv``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    @classmethod
    def gauss_legendre(cls, num_nodes: int = 16) -> "VelocityQuadrature":
        if num_nodes < 2 or num_nodes % 2:
            raise ConfigError(f"velocity quadrature needs an even node count >= 2, got {num_nodes}")
        x, w = np.polynomial.legendre.leggauss(num_nodes)
        # mirror the positive half so that v -> -v symmetry is exact in floating point
        half = num_nodes // 2
        pos_x, pos_w = x[half:], w[half:] / 2.0
        nodes = np.concatenate([-pos_x[::-1], pos_x])
        weights = np.concatenate([pos_w[::-1], pos_w])
        weights = weights / weights.sum()
        return cls(nodes, weights, "gauss_legendre")

    @classmethod
    def two_point(cls) -> "VelocityQuadrature":
        return cls(np.array([-1.0, 1.0]), np.array([0.5, 0.5]), "two_point")

    @property
    def size(self) -> int:
        return self.nodes.size

    def project_pi(self, phi):
        """Velocity average over the last axis."""
        phi = np.asarray(phi, dtype=float)
        if phi.shape[-1:] != (self.size,):
            raise DimensionError(
                f"velocity profile has trailing size {phi.shape[-1:] or 0}, quadrature has {self.size}"
            )
        # nodes are stored as (-v_half[::-1], v_half): summing mirror pairs first makes
        # the average of an odd profile exactly zero in floating point
        half = self.size // 2
        return (phi[..., half:] + phi[..., half - 1::-1]) @ self.weights[half:]

    @property
    def vplus(self) -> np.ndarray:
        return np.maximum(self.nodes, 0.0)

    @property
    def vminus(self) -> np.ndarray:
        return np.minimum(self.nodes, 0.0)


def project_pi(quad: VelocityQuadrature, phi):
    return quad.project_pi(phi)


# kind -> (input family, output family)
_DIFFERENCE_ALIGNMENT = {
    "D_minus": (DUAL, DUAL),
    "D_plus": (DUAL, DUAL),
    "D_center": (DUAL, DUAL),
    "D_zero": (DUAL, PRIMAL),
    "delta_zero": (PRIMAL, DUAL),
}


def apply_difference(grid: StaggeredGrid1D, kind: str, values, location: str, axis: int = -1):
    """Periodic finite difference of a grid field.

    ``location`` states which node family ``values`` lives on and is checked
    against the operator: ``D_minus``, ``D_plus`` and ``D_center`` act on
    dual fields, ``D_zero`` maps dual to primal and ``delta_zero`` maps
    primal to dual.  ``axis`` is the spatial axis of ``values``.
    """
    try:
        expected, _ = _DIFFERENCE_ALIGNMENT[kind]
    except KeyError:
        raise ConfigError(f"unknown difference operator {kind!r}") from None
    if location != expected:
        raise AlignmentError(f"{kind} acts on {expected} fields, got a {location} field")
    values = np.asarray(values, dtype=float)
    if values.shape[axis] != grid.num_cells:
        raise DimensionError(f"spatial axis has {values.shape[axis]} entries, grid has {grid.num_cells}")
    dx = grid.dx
    if kind == "D_minus" or kind == "D_zero":
        # (phi_{i+1/2} - phi_{i-1/2}) / dx, stored at i+1/2 (D_minus) or at i (D_zero)
        return (values - np.roll(values, 1, axis=axis)) / dx
    if kind == "D_plus" or kind == "delta_zero":
        return (np.roll(values, -1, axis=axis) - values) / dx
    # centered difference normalized so that D_center = (D_plus + D_minus) / 2
    return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * dx)


def norm_macro(grid: StaggeredGrid1D, mu) -> float:
    """Squared discrete L2 norm ``sum_i mu_i**2 dx``."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (grid.num_cells,):
        raise DimensionError(f"macro field must have shape ({grid.num_cells},), got {mu.shape}")
    return float(np.sum(mu * mu) * grid.dx)


def inner(grid: StaggeredGrid1D, quad: VelocityQuadrature, phi, psi) -> float:
    """``sum_i Pi(phi_{i+1/2} psi_{i+1/2}) dx`` for kinetic fields of shape (M, Q)."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    shape = (grid.num_cells, quad.size)
    if phi.shape != shape or psi.shape != shape:
        raise DimensionError(f"kinetic fields must have shape {shape}, got {phi.shape} and {psi.shape}")
    return float(np.sum(quad.project_pi(phi * psi)) * grid.dx)


def norm_micro(grid: StaggeredGrid1D, quad: VelocityQuadrature, phi) -> float:
    """Squared kinetic norm ``sum_i Pi(phi_{i+1/2}**2) dx``."""
    return inner(grid, quad, phi, phi)
