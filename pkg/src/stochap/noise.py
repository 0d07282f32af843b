"""Truncated spectral multiplicative noise and reproducible Gaussian draws.

A noise model is a finite list of spatial mode profiles ``Qe_k`` sampled on
both node families.  One time step consumes one standard normal per mode;
the scheme multiplies a field by ``1 + noise_factor`` where

    noise_factor_i = dt * S_i + sqrt(dt) * sum_k b_ik xi_k,   S_i = 1/2 sum_k b_ik^2

(the Ito form of the Stratonovich product).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .grid import DUAL, PRIMAL, StaggeredGrid1D


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Mode tables ``b_primal[k, i] = Qe_k(x_i)`` and ``b_dual[k, i] = Qe_k(x_{i+1/2})``."""

    b_primal: np.ndarray
    b_dual: np.ndarray
    labels: tuple = ()
    S_primal: np.ndarray = field(init=False, repr=False)
    S_dual: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.b_primal.shape != self.b_dual.shape or self.b_primal.ndim != 2:
            raise DimensionError("primal and dual mode tables must both have shape (K, M)")
        object.__setattr__(self, "S_primal", 0.5 * np.sum(self.b_primal**2, axis=0))
        object.__setattr__(self, "S_dual", 0.5 * np.sum(self.b_dual**2, axis=0))

    @property
    def num_modes(self) -> int:
        return self.b_primal.shape[0]

    @property
    def num_cells(self) -> int:
        return self.b_primal.shape[1]

    @property
    def trace(self) -> float:
        """Truncated ``sum_k ||Qe_k||_inf^2`` over both node families."""
        if self.num_modes == 0:
            return 0.0
        sup = np.maximum(np.abs(self.b_primal).max(axis=1), np.abs(self.b_dual).max(axis=1))
        return float(np.sum(sup**2))

    def table(self, location: str) -> np.ndarray:
        if location == PRIMAL:
            return self.b_primal
        if location == DUAL:
            return self.b_dual
        raise ConfigError(f"unknown node family {location!r}")

    def correction(self, location: str) -> np.ndarray:
        return self.S_primal if location == PRIMAL else self.S_dual

    def factors(self, location: str, xi, dt: float):
        """Vectorized noise factor over all nodes; ``xi`` has shape ``(..., K)``."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1:] != (self.num_modes,):
            raise DimensionError(f"draw has {xi.shape[-1:]} modes, model has {self.num_modes}")
        out = dt * self.correction(location)
        if self.num_modes:
            out = out + np.sqrt(dt) * (xi @ self.table(location))
        else:
            out = np.broadcast_to(out, xi.shape[:-1] + (self.num_cells,)).copy()
        return out


def empty_noise(grid: StaggeredGrid1D) -> NoiseModel:
    z = np.zeros((0, grid.num_cells))
    return NoiseModel(z, z.copy())


def constant_noise(grid: StaggeredGrid1D, amplitude: float = 1.0) -> NoiseModel:
    """A single spatially constant Brownian mode."""
    b = np.full((1, grid.num_cells), float(amplitude))
    return NoiseModel(b, b.copy(), labels=(0,))


def paper_mode_coefficient(k: int) -> float:
    """Amplitude of mode ``k``: 1 for k=0, 1/(k+1) for k>0, 1/(1-k) for k<0."""
    if k == 0:
        return 1.0
    return 1.0 / (k + 1) if k > 0 else 1.0 / (1 - k)


def build_paper_noise(grid: StaggeredGrid1D, N: int, raw_wavenumbers: bool = False) -> NoiseModel:
    """Constant mode plus ``cos(k w x) + sin(k w x)`` for ``0 < |k| <= N/2``.

    ``w = 2 pi / domain_length`` makes every mode periodic on the domain;
    ``raw_wavenumbers=True`` uses ``w = 1`` literally.
    """
    if int(N) != N or N < 2 or N % 2:
        raise ConfigError(f"noise mode cap N must be even and >= 2, got {N}", key="noise.num_modes")
    omega = 1.0 if raw_wavenumbers else 2.0 * np.pi / grid.domain_length
    ks = [0] + list(range(1, N // 2 + 1)) + list(range(-1, -N // 2 - 1, -1))
    xp, xd = grid.primal_nodes, grid.dual_nodes

    def profile(k, x):
        if k == 0:
            return np.ones_like(x)
        return paper_mode_coefficient(k) * (np.cos(k * omega * x) + np.sin(k * omega * x))

    bp = np.stack([profile(k, xp) for k in ks])
    bd = np.stack([profile(k, xd) for k in ks])
    return NoiseModel(bp, bd, labels=tuple(ks))


def noise_factor(model: NoiseModel, location: str, i: int, draw, dt: float) -> float:
    """Scalar ``dt * S_i + sqrt(dt) * sum_k b_ik xi_k`` at one node."""
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if not 0 <= i < model.num_cells:
        raise IndexError(f"node index {i} out of range for {model.num_cells} cells")
    xi = draw.xi if isinstance(draw, GaussianDraw) else np.asarray(draw, dtype=float)
    if xi.shape != (model.num_modes,):
        raise DimensionError(f"draw has shape {xi.shape}, model has {model.num_modes} modes")
    b = model.table(location)[:, i]
    return float(dt * model.correction(location)[i] + np.sqrt(dt) * np.dot(b, xi))


@dataclass(frozen=True)
class GaussianDraw:
    xi: np.ndarray
    realization: int
    step: int


class DrawStream:
    """Per-realization Gaussian stream split deterministically from a master seed.

    Step ``n`` always receives the ``n``-th block of ``num_modes`` normals of
    the realization's own generator, so draws do not depend on which worker
    runs the realization or in which order realizations are executed.
    """

    def __init__(self, master_seed: int, realization: int, num_modes: int):
        self.master_seed = int(master_seed)
        self.realization = int(realization)
        self.num_modes = int(num_modes)
        self._rng = self._generator()
        self.step = 0

    def _generator(self):
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.realization,))
        return np.random.Generator(np.random.PCG64(seq))

    def next(self) -> GaussianDraw:
        xi = self._rng.standard_normal(self.num_modes)
        draw = GaussianDraw(xi, self.realization, self.step)
        self.step += 1
        return draw

    def block(self, num_steps: int) -> np.ndarray:
        """The next ``num_steps`` draws as an array of shape ``(num_steps, K)``."""
        out = self._rng.standard_normal((num_steps, self.num_modes))
        self.step += num_steps
        return out

    def draw_at(self, step: int) -> GaussianDraw:
        """Regenerate the draw of an arbitrary step without touching this stream."""
        rng = self._generator()
        xi = rng.standard_normal((step + 1, self.num_modes))[step]
        return GaussianDraw(xi, self.realization, step)


def sample_draw(stream: DrawStream, num_modes: int | None = None) -> GaussianDraw:
    if num_modes is not None and num_modes != stream.num_modes:
        raise DimensionError(f"stream produces {stream.num_modes} modes, {num_modes} requested")
    return stream.next()
