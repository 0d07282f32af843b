"""Stochastic micro-macro AP scheme, its telegraph form and the limit diffusion scheme.

All steppers are vectorized over optional leading batch axes: ``rho`` has
shape ``(..., M)``, ``g`` has shape ``(..., M, Q)`` and the Gaussian draw
``xi`` has shape ``(..., K)``.  The batch axes index independent
realizations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .collision import CollisionKernel, CollisionOperator, ScatterField, diffusion_coefficient
from .errors import BlowUpError, ConfigError
from .grid import PRIMAL, DUAL, StaggeredGrid1D, VelocityQuadrature
from .noise import GaussianDraw, NoiseModel, empty_noise

BLOWUP_THRESHOLD = 1e12


@dataclass(frozen=True, eq=False)
class SchemeConfig:
    """Everything a stepper needs; derived matrices are cached on first use."""

    grid: StaggeredGrid1D
    quad: VelocityQuadrature
    collision: CollisionOperator
    sigma: ScatterField
    noise: NoiseModel
    epsilon: float
    dt: float
    cfl_safety: float = 0.9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}", key="scheme.epsilon")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}", key="scheme.dt")
        if not 0 < self.cfl_safety <= 1:
            raise ConfigError(f"cfl_safety must lie in (0, 1], got {self.cfl_safety}", key="scheme.cfl_safety")
        if self.noise.num_cells != self.grid.num_cells:
            raise ConfigError("noise model and grid disagree on the number of cells")

    @classmethod
    def build(
        cls,
        grid: StaggeredGrid1D,
        epsilon: float,
        dt: float | None = None,
        quad: VelocityQuadrature | None = None,
        kernel: CollisionKernel | None = None,
        sigma: ScatterField | None = None,
        noise: NoiseModel | None = None,
        cfl_safety: float = 0.9,
    ) -> "SchemeConfig":
        """Assemble a config with one-group defaults; ``dt=None`` picks the general CFL step."""
        quad = quad or VelocityQuadrature.gauss_legendre(16)
        collision = CollisionOperator.build(quad, kernel)
        sigma = sigma or ScatterField.constant(grid, 1.0)
        noise = noise if noise is not None else empty_noise(grid)
        if dt is None:
            kind = "telegraph" if quad.kind == "two_point" else "general"
            dt = cfl_safety * cfl_dt(grid.dx, epsilon, collision.s_min, sigma.sigma_min, kind)
        return cls(grid, quad, collision, sigma, noise, float(epsilon), float(dt), cfl_safety)

    def replace(self, **changes) -> "SchemeConfig":
        params = {k: getattr(self, k) for k in
                  ("grid", "quad", "collision", "sigma", "noise", "epsilon", "dt", "cfl_safety")}
        params.update(changes)
        return SchemeConfig(**params)

    @cached_property
    def collision_solver(self) -> np.ndarray:
        """``(I - c L)^{-1}`` with ``c = sigma dt / eps^2``; (Q, Q) or per-cell (M, Q, Q)."""
        c = self.sigma.dual * self.dt / self.epsilon**2
        if np.all(c == c[0]):
            return self.collision.implicit_solver(c[0])
        return self.collision.implicit_solver(c)

    @cached_property
    def source_response(self) -> np.ndarray:
        """``(I - c L)^{-1} v`` with its velocity mean removed; (Q,) or (M, Q)."""
        K = self.collision_solver
        resp = K @ self.quad.nodes
        return resp - self.quad.project_pi(resp)[..., None]

    @cached_property
    def kappa(self) -> np.ndarray:
        return diffusion_coefficient(self.collision, self.sigma, DUAL)

    def cfl_limit(self, kind: str = "general") -> float:
        return cfl_dt(self.grid.dx, self.epsilon, self.collision.s_min, self.sigma.sigma_min, kind)


def cfl_dt(dx: float, eps: float, s_m: float, sigma_m: float, kind: str) -> float:
    """Right-hand side of the telegraph or general CFL bound."""
    for name, value in (("dx", dx), ("epsilon", eps), ("s_m", s_m), ("sigma_m", sigma_m)):
        if not value > 0:
            raise ConfigError(f"{name} must be positive for the CFL bound, got {value}")
    if kind == "telegraph":
        return 0.5 * (0.5 * dx**2 + eps * dx)
    if kind == "general":
        return 2.0 * s_m * sigma_m * dx**2 / (2.0 * (2.0 + eps)) + eps * dx / (2.0 + eps)
    raise ConfigError(f"unknown CFL kind {kind!r}")


def _xi(draw):
    return draw.xi if isinstance(draw, GaussianDraw) else np.asarray(draw, dtype=float)


def check_finite(rho, step_index=None, *others):
    """Raise ``BlowUpError`` if any field is non-finite or ``max|rho|`` passes the threshold."""
    bad = not np.all(np.isfinite(rho)) or np.max(np.abs(rho), initial=0.0) > BLOWUP_THRESHOLD
    bad = bad or any(not np.all(np.isfinite(o)) for o in others)
    if bad:
        raise BlowUpError("solution blew up", step=step_index)


def blown_up(rho) -> np.ndarray:
    """Per-realization blow-up mask over the leading batch axes of ``rho``."""
    with np.errstate(invalid="ignore"):
        return ~np.all(np.isfinite(rho) & (np.abs(rho) <= BLOWUP_THRESHOLD), axis=-1)


def _apply_solver(solver, r):
    if solver.ndim == 2:
        return r @ solver.T
    return np.einsum("mpq,...mq->...mp", solver, r)


def step_smm(state, draw, cfg: SchemeConfig, check: bool = True, step_index: int | None = None):
    """One step of the micro-macro scheme: ``g`` first, then ``rho`` with the new ``g``."""
    rho, g = state
    xi = _xi(draw)
    dt, eps, dx = cfg.dt, cfg.epsilon, cfg.grid.dx
    v = cfg.quad.nodes

    nf_rho = cfg.noise.factors(PRIMAL, xi, dt)
    nf_g = cfg.noise.factors(DUAL, xi, dt)

    g_left = np.roll(g, 1, axis=-2)
    g_right = np.roll(g, -1, axis=-2)
    transport = cfg.quad.vplus * (g - g_left) + cfg.quad.vminus * (g_right - g)
    transport = transport - cfg.quad.project_pi(transport)[..., None]

    grad_rho = (np.roll(rho, -1, axis=-1) - rho) / dx
    rhs = g - (dt / (eps * dx)) * transport + g * nf_g[..., None]
    # the stiff source -(dt/eps^2) v delta0(rho) goes through the precomputed response
    # of the collision solve to v, which keeps Pi(g) exact when dt/eps^2 is huge
    g_new = _apply_solver(cfg.collision_solver, rhs) - (dt / eps**2) * grad_rho[..., None] * cfg.source_response
    # exact arithmetic gives Pi(g_new) = (1 + nf) Pi(g); restoring it removes the rounding
    # that the large transport term would otherwise leak into the velocity mean
    target = cfg.quad.project_pi(g) * (1.0 + nf_g)
    g_new = g_new + (target - cfg.quad.project_pi(g_new))[..., None]

    flux = cfg.quad.project_pi(g_new * v)
    rho_new = rho - (dt / dx) * (flux - np.roll(flux, 1, axis=-1)) + rho * nf_rho
    if check:
        check_finite(rho_new, step_index, g_new)
    return rho_new, g_new


def well_prepared_g(cfg: SchemeConfig, rho) -> np.ndarray:
    """Leading-order micro part ``g = L^{-1}(v delta0 rho) / sigma`` on dual nodes.

    For the one-group kernel this is ``-v delta0 rho / sigma``.
    """
    rho = np.asarray(rho, dtype=float)
    v = cfg.quad.nodes
    grad_rho = (np.roll(rho, -1, axis=-1) - rho) / cfg.grid.dx
    basis = cfg.collision.pseudo_inverse_apply(v - cfg.quad.project_pi(v))
    return basis * (grad_rho / cfg.sigma.dual)[..., None]


def split_distribution(cfg: SchemeConfig, f0):
    """Micro-macro split of ``f0(x, v)``: ``rho = Pi f0`` and ``g = (f0 - rho) / eps``."""
    v = cfg.quad.nodes
    f_primal = np.asarray(f0(cfg.grid.primal_nodes[:, None], v[None, :]), dtype=float)
    f_dual = np.asarray(f0(cfg.grid.dual_nodes[:, None], v[None, :]), dtype=float)
    shape = (cfg.grid.num_cells, cfg.quad.size)
    f_primal = np.broadcast_to(f_primal, shape)
    f_dual = np.broadcast_to(f_dual, shape)
    rho = _exact_mean(cfg, f_primal)
    g = (f_dual - _exact_mean(cfg, f_dual)[:, None]) / cfg.epsilon
    return rho, g


def _exact_mean(cfg: SchemeConfig, f):
    # rows that do not depend on v are their own average; skip the weighted sum so g0 = 0 exactly
    flat = np.all(f == f[:, :1], axis=1)
    return np.where(flat, f[:, 0], cfg.quad.project_pi(f))


@dataclass
class TelegraphState:
    """Density on primal nodes and scaled flux ``J = eps * j`` on dual nodes."""

    rho: np.ndarray
    J: np.ndarray


def telegraph_from_micro(g, eps: float, quad: VelocityQuadrature):
    """``J = eps * Pi(v g)`` for a two-point micro field."""
    return eps * quad.project_pi(g * quad.nodes)


def micro_from_telegraph(J, eps: float):
    """Zero-mean two-point micro field with ``eps * Pi(v g) = J`` (nodes ordered -1, +1)."""
    J = np.asarray(J, dtype=float)
    return np.stack([-J / eps, J / eps], axis=-1)


def step_telegraph(state: TelegraphState, draw, cfg: SchemeConfig, check: bool = True,
                   step_index: int | None = None) -> TelegraphState:
    """Reduced (rho, J) telegraph step with ``sigma = 1``; J is updated first."""
    xi = _xi(draw)
    dt, eps, dx = cfg.dt, cfg.epsilon, cfg.grid.dx
    mu = dt / (eps * dx)
    lam = 1.0 / (1.0 + dt / eps**2)
    rho, J = state.rho, state.J

    nf_rho = cfg.noise.factors(PRIMAL, xi, dt)
    nf_J = cfg.noise.factors(DUAL, xi, dt)

    J_right = np.roll(J, -1, axis=-1)
    J_left = np.roll(J, 1, axis=-1)
    J_new = lam * (
        J * (1.0 + nf_J)
        + 0.5 * mu * (J_right - 2.0 * J + J_left)
        - mu * (np.roll(rho, -1, axis=-1) - rho)
    )
    rho_new = rho - mu * (J_new - np.roll(J_new, 1, axis=-1)) + rho * nf_rho
    if check:
        check_finite(rho_new, step_index, J_new)
    return TelegraphState(rho_new, J_new)


def diffusion_operator(kappa, dx: float):
    """Dense periodic 3-point matrix ``A rho_i = (k+ d0rho+ - k- d0rho-) / dx``."""
    kappa = np.asarray(kappa, dtype=float)
    m = kappa.size
    A = np.zeros((m, m))
    idx = np.arange(m)
    k_right = kappa  # kappa_{i+1/2}
    k_left = np.roll(kappa, 1)  # kappa_{i-1/2}
    A[idx, (idx + 1) % m] += k_right / dx**2
    A[idx, idx] -= (k_right + k_left) / dx**2
    A[idx, (idx - 1) % m] += k_left / dx**2
    return A


def apply_diffusion(rho, kappa, dx: float):
    grad = (np.roll(rho, -1, axis=-1) - rho) / dx
    flux = kappa * grad
    return (flux - np.roll(flux, 1, axis=-1)) / dx


def step_diffusion_explicit(rho, draw, cfg: SchemeConfig, kappa=None, check: bool = True,
                            step_index: int | None = None):
    """Explicit 3-point diffusion step with the same Ito-corrected noise factor."""
    kappa = cfg.kappa if kappa is None else np.asarray(kappa, dtype=float)
    nf = cfg.noise.factors(PRIMAL, _xi(draw), cfg.dt)
    rho_new = rho + cfg.dt * apply_diffusion(rho, kappa, cfg.grid.dx) + rho * nf
    if check:
        check_finite(rho_new, step_index)
    return rho_new


def limit_diffusion_step_from_smm(cfg: SchemeConfig, kappa=None):
    """Stepper ``(rho, draw) -> rho`` for the scheme the SMM step reduces to as eps -> 0."""
    kappa = cfg.kappa if kappa is None else np.asarray(kappa, dtype=float)

    def step(rho, draw, check=True, step_index=None):
        return step_diffusion_explicit(rho, draw, cfg, kappa, check, step_index)

    return step
