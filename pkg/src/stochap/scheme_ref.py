"""Reference integrators: explicit upwind kinetic scheme and Crank-Nicolson diffusion.

Both use the same Ito-corrected explicit noise factor as the micro-macro
scheme so that path-coupled comparisons are like-for-like.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import ConfigError, NumericalError
from .grid import PRIMAL
from .scheme_smm import SchemeConfig, _xi, check_finite, diffusion_operator


def explicit_kinetic_dt(cfg: SchemeConfig, cfl_safety: float | None = None) -> float:
    """Largest step honoring both the transport and the relaxation bound.

    Uses ``1 / (1/(eps dx) + sigma_M/eps^2)``, which is below each bound
    separately, scaled by the safety factor.
    """
    safety = cfg.cfl_safety if cfl_safety is None else cfl_safety
    eps, dx = cfg.epsilon, cfg.grid.dx
    return safety / (1.0 / (eps * dx) + cfg.sigma.sigma_max / eps**2)


def check_explicit_kinetic_dt(cfg: SchemeConfig):
    eps, dx = cfg.epsilon, cfg.grid.dx
    transport = cfg.cfl_safety * eps * dx
    relaxation = cfg.cfl_safety * eps**2 / cfg.sigma.sigma_max
    if cfg.dt > transport * (1 + 1e-12) or cfg.dt > relaxation * (1 + 1e-12):
        raise ConfigError(
            f"explicit kinetic scheme needs dt <= {min(transport, relaxation):.6g}, got {cfg.dt:.6g}",
            key="scheme.dt",
        )


def kinetic_initial(cfg: SchemeConfig, rho, g=None):
    """Unsplit ``f = rho + eps g`` on primal nodes; ``g`` is averaged from the dual grid."""
    rho = np.asarray(rho, dtype=float)
    f = np.repeat(rho[..., None], cfg.quad.size, axis=-1)
    if g is not None:
        g = np.asarray(g, dtype=float)
        f = f + cfg.epsilon * 0.5 * (g + np.roll(g, 1, axis=-2))
    return f


def kinetic_density(cfg: SchemeConfig, f):
    return cfg.quad.project_pi(f)


def step_explicit_kinetic(f, draw, cfg: SchemeConfig, check: bool = True, step_index: int | None = None):
    """Fully explicit upwind step of the unsplit kinetic equation, ``f`` of shape (..., M, Q)."""
    if check:
        check_explicit_kinetic_dt(cfg)
    dt, eps, dx = cfg.dt, cfg.epsilon, cfg.grid.dx
    nf = cfg.noise.factors(PRIMAL, _xi(draw), dt)
    upwind = (
        cfg.quad.vplus * (f - np.roll(f, 1, axis=-2))
        + cfg.quad.vminus * (np.roll(f, -1, axis=-2) - f)
    )
    collision = (f @ cfg.collision.matrix.T) * (cfg.sigma.primal * (dt / eps**2))[:, None]
    f_new = f - (dt / (eps * dx)) * upwind + collision + f * nf[..., None]
    if check:
        check_finite(kinetic_density(cfg, f_new), step_index, f_new)
    return f_new


@lru_cache(maxsize=32)
def _cn_factors(kappa_bytes: bytes, m: int, dx: float, dt: float):
    kappa = np.frombuffer(kappa_bytes, dtype=float)
    A = diffusion_operator(kappa, dx)
    eye = np.eye(m)
    try:
        lu = scipy.linalg.lu_factor(eye - 0.5 * dt * A)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError("Crank-Nicolson matrix factorization failed") from exc
    return lu, eye + 0.5 * dt * A


def crank_nicolson_matrices(kappa, dx: float, dt: float):
    """LU factors of ``I - dt/2 A`` and the explicit half ``I + dt/2 A``."""
    kappa = np.ascontiguousarray(kappa, dtype=float)
    return _cn_factors(kappa.tobytes(), kappa.size, float(dx), float(dt))


def step_crank_nicolson_diffusion(rho, draw, kappa, cfg: SchemeConfig, check: bool = True,
                                  step_index: int | None = None):
    """``(I - dt/2 A) rho' = (I + dt/2 A) rho + rho * noise_factor``; noise stays explicit."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0):
        raise ConfigError("diffusion coefficient must be nonnegative")
    lu, explicit = crank_nicolson_matrices(kappa, cfg.grid.dx, cfg.dt)
    rho = np.asarray(rho, dtype=float)
    nf = cfg.noise.factors(PRIMAL, _xi(draw), cfg.dt)
    rhs = rho @ explicit.T + rho * nf
    flat = rhs.reshape(-1, rhs.shape[-1]).T
    rho_new = scipy.linalg.lu_solve(lu, flat).T.reshape(rhs.shape)
    if check:
        check_finite(rho_new, step_index)
    return rho_new
