"""Linear collision operator with a symmetric scattering kernel.

The discrete operator acting on velocity profiles is

    (L phi)_q = sum_q' 2 w_q' s(v_q, v_q') (phi_q' - phi_q)

where ``w`` are the normalized quadrature weights (so ``2 w`` discretizes
``dv``).  The kernel is rescaled at construction so that every row of
``2 w s`` sums to one while staying symmetric; constants are then exactly in
the null space and ``Pi(L phi) = 0`` holds to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, PreconditionError
from .grid import StaggeredGrid1D, VelocityQuadrature

TOL_MEAN = 1e-10


@dataclass(frozen=True)
class _LinearKernel:
    # module-level callable so kernels pickle into worker processes
    c: float

    def __call__(self, v, vp):
        return 0.5 * (1.0 + 0.5 * self.c * v * vp) * np.ones(np.broadcast(v, vp).shape)


@dataclass(frozen=True, eq=False)
class CollisionKernel:
    """Symmetric positive kernel ``s(v, v')``.

    ``evaluator`` must broadcast over numpy arrays.  ``one_group`` marks the
    constant kernel ``s = 1/2``, for which ``L phi = Pi phi - phi``.
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    one_group: bool = False

    @classmethod
    def isotropic(cls) -> "CollisionKernel":
        return cls(_LinearKernel(0.0), one_group=True)

    @classmethod
    def linear_anisotropic(cls, c: float) -> "CollisionKernel":
        """``s(v, v') = (1 + c v v' / 2) / 2`` with ``0 <= c < 1``."""
        if not 0.0 <= c < 1.0:
            raise ConfigError(f"anisotropy c must lie in [0, 1), got {c}")
        return cls(_LinearKernel(float(c)), one_group=(c == 0.0))

    def node_matrix(self, quad: VelocityQuadrature) -> np.ndarray:
        v = quad.nodes
        s = np.asarray(self.evaluator(v[:, None], v[None, :]), dtype=float)
        if s.shape != (quad.size, quad.size):
            raise DimensionError("kernel evaluator did not broadcast to a (Q, Q) matrix")
        return s


def _symmetric_row_normalize(s, measure, tol=1e-15, max_iter=500):
    """Scale ``s -> D s D`` until ``(D s D) @ measure == 1`` (symmetric Sinkhorn)."""
    d = np.ones(s.shape[0])
    for _ in range(max_iter):
        rows = d * (s @ (measure * d))
        if np.max(np.abs(rows - 1.0)) < tol:
            break
        d = d / np.sqrt(rows)
    out = d[:, None] * s * d[None, :]
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class ScatterField:
    """Scattering rate sampled at primal and dual nodes."""

    primal: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        for name in ("primal", "dual"):
            arr = getattr(self, name)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ConfigError(f"scattering rate on {name} nodes must be finite and positive")

    @classmethod
    def constant(cls, grid: StaggeredGrid1D, value: float = 1.0) -> "ScatterField":
        if not value > 0:
            raise ConfigError(f"scattering rate must be positive, got {value}")
        return cls(np.full(grid.num_cells, float(value)), np.full(grid.num_cells, float(value)))

    @classmethod
    def from_function(cls, grid: StaggeredGrid1D, fn) -> "ScatterField":
        return cls(
            np.asarray(fn(grid.primal_nodes), dtype=float) * np.ones(grid.num_cells),
            np.asarray(fn(grid.dual_nodes), dtype=float) * np.ones(grid.num_cells),
        )

    @property
    def sigma_min(self) -> float:
        return float(min(self.primal.min(), self.dual.min()))

    @property
    def sigma_max(self) -> float:
        return float(max(self.primal.max(), self.dual.max()))


@dataclass(frozen=True, eq=False)
class CollisionOperator:
    quad: VelocityQuadrature
    kernel: CollisionKernel
    node_kernel: np.ndarray = field(init=False, repr=False)
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        measure = 2.0 * self.quad.weights
        s = _symmetric_row_normalize(self.kernel.node_matrix(self.quad), measure)
        if np.any(s <= 0):
            raise ConfigError("collision kernel must be strictly positive on the quadrature nodes")
        object.__setattr__(self, "node_kernel", s)
        object.__setattr__(self, "matrix", s * measure[None, :] - np.eye(self.quad.size))
        # build the pseudo-inverse eagerly so instances stay read-only once shared
        self._pinv

    @classmethod
    def build(cls, quad: VelocityQuadrature, kernel: CollisionKernel | None = None) -> "CollisionOperator":
        return cls(quad, kernel or CollisionKernel.isotropic())

    @property
    def s_min(self) -> float:
        return float(self.node_kernel.min())

    @property
    def s_max(self) -> float:
        return float(self.node_kernel.max())

    def apply(self, phi):
        phi = np.asarray(phi, dtype=float)
        if phi.shape[-1:] != (self.quad.size,):
            raise DimensionError(f"profile trailing size must be {self.quad.size}")
        return phi @ self.matrix.T

    @cached_property
    def _pinv(self) -> np.ndarray:
        # least-squares inverse of the augmented system [L; w^T] phi = [h; 0]
        aug = np.vstack([self.matrix, self.quad.weights[None, :]])
        pinv = np.linalg.pinv(aug, rcond=1e-13)
        return pinv[:, : self.quad.size]

    def pseudo_inverse_apply(self, h):
        """Return ``phi`` with ``L phi = h`` and ``Pi phi = 0``; requires ``Pi h = 0``."""
        h = np.asarray(h, dtype=float)
        if h.shape[-1:] != (self.quad.size,):
            raise DimensionError(f"profile trailing size must be {self.quad.size}")
        mean = np.abs(self.quad.project_pi(h))
        scale = np.sqrt(self.quad.project_pi(h * h))
        if np.any(mean > TOL_MEAN * np.maximum(scale, np.finfo(float).tiny)):
            raise PreconditionError(f"pseudo-inverse needs a zero-mean profile, |Pi h| = {np.max(mean):.3e}")
        phi = h @ self._pinv.T
        resid = phi @ self.matrix.T - h
        if not np.all(np.isfinite(phi)) or np.max(np.abs(resid), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(h))):
            raise NumericalError("restricted collision system is singular")
        return phi

    @cached_property
    def _spectrum(self):
        # L is self-adjoint for the weighted product: W^{1/2} L W^{-1/2} is symmetric.
        # The constant mode is pinned exactly and removed from the remaining basis.
        root = np.sqrt(self.quad.weights)
        sym = root[:, None] * self.matrix / root[None, :]
        lam, vecs = np.linalg.eigh(0.5 * (sym + sym.T))
        keep = np.argsort(np.abs(vecs.T @ root))[:-1]
        basis = vecs[:, keep]
        basis = basis - root[:, None] * (root @ basis)[None, :]
        basis, _ = np.linalg.qr(basis)
        lam = np.einsum("qj,qp,pj->j", basis, sym, basis)
        return lam, basis

    def implicit_solver(self, coefficient) -> np.ndarray:
        """Matrix ``K`` with ``K r`` solving ``(I - c L) g = r``.

        Built as ``1 w^T + sum_j (1 - c lam_j)^{-1} P_j`` so that ``Pi(K r) = Pi(r)``
        holds to rounding even for very stiff ``c``.  ``coefficient`` is a scalar
        or an array of per-cell values; for arrays a stack of matrices indexed by
        cell is returned, one per distinct value.
        """
        coefficient = np.asarray(coefficient, dtype=float)
        if np.any(coefficient < 0) or not np.all(np.isfinite(coefficient)):
            raise NumericalError("implicit collision coefficient must be finite and nonnegative")
        lam, basis = self._spectrum
        root = np.sqrt(self.quad.weights)
        const = np.outer(np.ones(self.quad.size), self.quad.weights)

        def one(c):
            scale = 1.0 / (1.0 - c * lam)
            return const + (basis * scale[None, :] / root[:, None]) @ (basis.T * root[None, :])

        if coefficient.ndim == 0:
            return one(float(coefficient))
        values, inverse = np.unique(coefficient, return_inverse=True)
        mats = np.stack([one(c) for c in values])
        return mats[inverse.reshape(coefficient.shape)]


def apply_L(op: CollisionOperator, phi):
    return op.apply(phi)


def pseudo_inverse_apply(op: CollisionOperator, h):
    return op.pseudo_inverse_apply(h)


def implicit_collision_solve(r, sigma_loc: float, dt: float, eps: float, op: CollisionOperator):
    """Solve ``(I - (sigma dt / eps^2) L) g = r`` for one cell."""
    if dt < 0 or eps <= 0 or sigma_loc <= 0:
        raise PreconditionError("implicit collision solve needs dt >= 0, eps > 0, sigma > 0")
    return np.asarray(r, dtype=float) @ op.implicit_solver(sigma_loc * dt / eps**2).T


def diffusion_coefficient(op: CollisionOperator, sigma: ScatterField, location: str = "dual") -> np.ndarray:
    """``kappa = -Pi(v L^{-1} v) / sigma`` on the requested node family."""
    v = op.quad.nodes
    centered = v - op.quad.project_pi(v)
    moment = -op.quad.project_pi(v * op.pseudo_inverse_apply(centered))
    if not moment > 0:
        raise NumericalError(f"diffusion moment must be positive, got {moment}")
    return moment / getattr(sigma, location)
