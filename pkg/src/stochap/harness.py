"""Monte Carlo ensembles with path coupling across schemes.

Realizations are grouped into fixed-size chunks.  A chunk is the unit of
work handed to the worker pool and is advanced as one batched array, so the
floating-point work done for a realization depends only on the chunk size,
never on the number of workers.  Chunk results are reduced in
realization-index order with Welford accumulation.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .collision import CollisionKernel, ScatterField
from .errors import ConfigError, EnsembleError
from .grid import StaggeredGrid1D, VelocityQuadrature
from .noise import DrawStream, NoiseModel, build_paper_noise, constant_noise, empty_noise
from .scheme_ref import (
    explicit_kinetic_dt,
    kinetic_density,
    kinetic_initial,
    step_crank_nicolson_diffusion,
    step_explicit_kinetic,
)
from .scheme_smm import (
    SchemeConfig,
    TelegraphState,
    blown_up,
    step_diffusion_explicit,
    step_smm,
    step_telegraph,
    well_prepared_g,
)
from .stability import discrete_energy

log = logging.getLogger(__name__)

SCHEME_KINDS = ("smm", "telegraph", "explicit_kinetic", "crank_nicolson", "diffusion_explicit")
DRAW_BLOCK = 256


@dataclass(frozen=True, eq=False)
class Problem:
    """Physical setup shared by every scheme of a coupled ensemble.

    ``g0`` is ``"zero"``, ``"well_prepared"`` or an explicit (M, Q) array.
    Telegraph runs need ``quad = VelocityQuadrature.two_point()``.
    """

    grid: StaggeredGrid1D
    epsilon: float
    rho0: np.ndarray
    noise: NoiseModel
    quad: VelocityQuadrature = field(default_factory=lambda: VelocityQuadrature.gauss_legendre(16))
    kernel: CollisionKernel = field(default_factory=CollisionKernel.isotropic)
    sigma: ScatterField | None = None
    g0: object = "zero"

    def scheme_config(self, dt: float, cfl_safety: float = 0.9) -> SchemeConfig:
        return SchemeConfig.build(self.grid, self.epsilon, dt, self.quad, self.kernel,
                                  self.sigma, self.noise, cfl_safety)

    def initial_micro(self, cfg: SchemeConfig) -> np.ndarray:
        if isinstance(self.g0, str):
            if self.g0 == "zero":
                return np.zeros((self.grid.num_cells, self.quad.size))
            if self.g0 == "well_prepared":
                return well_prepared_g(cfg, self.rho0)
            raise ConfigError(f"unknown initial micro mode {self.g0!r}")
        return np.asarray(self.g0, dtype=float)


def paper_initial_density(grid: StaggeredGrid1D) -> np.ndarray:
    """``1 + cos(2 pi x + pi)`` on primal nodes."""
    return 1.0 + np.cos(2.0 * np.pi * grid.primal_nodes + np.pi)


def max_stable_dt(kind: str, problem: Problem, cfl_safety: float = 0.9) -> float:
    """Largest auto-selected step for one scheme kind (``inf`` if unconditionally stable)."""
    cfg = problem.scheme_config(1.0, cfl_safety)
    if kind == "smm":
        return cfl_safety * cfg.cfl_limit("telegraph" if problem.quad.kind == "two_point" else "general")
    if kind == "telegraph":
        return cfl_safety * cfg.cfl_limit("telegraph")
    if kind == "explicit_kinetic":
        return explicit_kinetic_dt(cfg, cfl_safety)
    if kind == "diffusion_explicit":
        return cfl_safety * problem.grid.dx**2 / (2.0 * float(np.max(cfg.kappa)))
    if kind == "crank_nicolson":
        return math.inf
    raise ConfigError(f"unknown scheme kind {kind!r}", key="scheme.kind")


def resolve_time_grid(output_times, dt_max: float):
    """Shrink ``dt`` so that every output time is an integer number of steps.

    Returns ``(dt, steps)`` with ``steps[j] * dt == output_times[j]``.
    """
    times = [Fraction(t).limit_denominator(10**9) for t in output_times]
    if any(t < 0 for t in times):
        raise ConfigError("output times must be nonnegative", key="ensemble.output_times")
    if list(times) != sorted(times):
        raise ConfigError("output times must be sorted", key="ensemble.output_times")
    positive = [t for t in times if t > 0]
    if not positive:
        return float(dt_max), [0 for _ in times]
    base = positive[0]
    for t in positive[1:]:
        base = Fraction(math.gcd(base.numerator * t.denominator, t.numerator * base.denominator),
                        base.denominator * t.denominator)
    substeps = max(1, math.ceil(float(base) / dt_max - 1e-12))
    dt = base / substeps
    return float(dt), [int(t / dt) for t in times]


class _Runner:
    """Uniform batched interface over the scheme kinds."""

    def __init__(self, kind: str, problem: Problem, cfg: SchemeConfig):
        self.kind, self.problem, self.cfg = kind, problem, cfg

    def init(self, batch: int):
        rho = np.repeat(np.asarray(self.problem.rho0, dtype=float)[None, :], batch, axis=0)
        if self.kind == "smm":
            g = self.problem.initial_micro(self.cfg)
            return rho, np.repeat(g[None], batch, axis=0)
        if self.kind == "telegraph":
            g = self.problem.initial_micro(self.cfg)
            J = self.cfg.epsilon * self.cfg.quad.project_pi(g * self.cfg.quad.nodes)
            return TelegraphState(rho, np.repeat(J[None], batch, axis=0))
        if self.kind == "explicit_kinetic":
            g = self.problem.initial_micro(self.cfg)
            return kinetic_initial(self.cfg, rho, np.repeat(g[None], batch, axis=0))
        return rho

    def step(self, state, xi):
        cfg = self.cfg
        if self.kind == "smm":
            return step_smm(state, xi, cfg, check=False)
        if self.kind == "telegraph":
            return step_telegraph(state, xi, cfg, check=False)
        if self.kind == "explicit_kinetic":
            return step_explicit_kinetic(state, xi, cfg, check=False)
        if self.kind == "crank_nicolson":
            return step_crank_nicolson_diffusion(state, xi, cfg.kappa, cfg, check=False)
        return step_diffusion_explicit(state, xi, cfg, check=False)

    def density(self, state):
        if self.kind == "smm":
            return state[0]
        if self.kind == "telegraph":
            return state.rho
        if self.kind == "explicit_kinetic":
            return kinetic_density(self.cfg, state)
        return state

    def zero_rows(self, state, rows):
        """Reset failed realizations so they cannot overflow; they are excluded later."""
        if self.kind == "smm":
            state[0][rows] = 0.0
            state[1][rows] = 0.0
        elif self.kind == "telegraph":
            state.rho[rows] = 0.0
            state.J[rows] = 0.0
        else:
            state[rows] = 0.0
        return state


@dataclass(frozen=True, eq=False)
class EnsembleConfig:
    problem: Problem
    schemes: tuple = ("smm",)
    realizations: int = 100
    master_seed: int = 20240501
    output_times: tuple = (0.1,)
    dt: float | None = None
    cfl_safety: float = 0.9
    coupled: bool = True
    workers: int = 1
    chunk_size: int = 10
    keep_paths: bool = False
    record_draws: bool = False

    def __post_init__(self):
        if self.realizations < 1:
            raise ConfigError("need at least one realization", key="ensemble.realizations")
        if self.chunk_size < 1 or self.workers < 1:
            raise ConfigError("chunk_size and workers must be >= 1")
        for kind in self.schemes:
            if kind not in SCHEME_KINDS:
                raise ConfigError(f"unknown scheme kind {kind!r}", key="scheme.kind")
        if len(set(self.schemes)) != len(self.schemes):
            raise ConfigError("duplicate scheme kinds in one ensemble", key="scheme.kind")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive", key="scheme.dt")

    def step_plan(self):
        """Per scheme: ``(dt, output steps, dt_max)``."""
        limits = {k: max_stable_dt(k, self.problem, self.cfl_safety) for k in self.schemes}
        if self.coupled:
            dt_max = self.dt if self.dt is not None else min(limits.values())
            if math.isinf(dt_max):
                dt_max = max_stable_dt("diffusion_explicit", self.problem, self.cfl_safety)
            dt, steps = resolve_time_grid(self.output_times, dt_max)
            return {k: (dt, steps, limits[k]) for k in self.schemes}
        plan = {}
        for k in self.schemes:
            dt_max = self.dt if self.dt is not None else limits[k]
            if math.isinf(dt_max):
                dt_max = max_stable_dt("diffusion_explicit", self.problem, self.cfl_safety)
            dt, steps = resolve_time_grid(self.output_times, dt_max)
            plan[k] = (dt, steps, limits[k])
        return plan


@dataclass
class SchemeStats:
    mean: np.ndarray
    variance: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray
    count: int
    failures: list
    dt: float
    paths: np.ndarray | None = None
    draw_digest: str | None = None


@dataclass
class EnsembleStats:
    times: list
    x: np.ndarray
    schemes: dict
    metadata: dict

    def mean(self, kind: str, time_index: int) -> np.ndarray:
        return self.schemes[kind].mean[time_index]


def _chunk_bounds(cfg: EnsembleConfig):
    return [(lo, min(lo + cfg.chunk_size, cfg.realizations))
            for lo in range(0, cfg.realizations, cfg.chunk_size)]


def _run_chunk(args):
    cfg, lo, hi = args
    plan = cfg.step_plan()
    K = cfg.problem.noise.num_modes
    batch = hi - lo
    out = {}
    groups = [(tuple(cfg.schemes), 0)] if cfg.coupled else [((k,), i + 1) for i, k in enumerate(cfg.schemes)]
    for kinds, stream_key in groups:
        dt, steps, _ = plan[kinds[0]]
        runners = [_Runner(k, cfg.problem, cfg.problem.scheme_config(dt, cfg.cfl_safety)) for k in kinds]
        # uncoupled groups get independent streams by offsetting the realization key
        streams = [DrawStream(cfg.master_seed, r + stream_key * 10**9, K) for r in range(lo, hi)]
        states = [run.init(batch) for run in runners]
        n_out = len(steps)
        record = {k: np.zeros((batch, n_out, cfg.problem.grid.num_cells)) for k in kinds}
        failed_at = {k: np.full(batch, -1) for k in kinds}
        digests = {k: hashlib.sha256() for k in kinds}
        out_at = {}
        for j, s in enumerate(steps):
            out_at.setdefault(s, []).append(j)
        for j in out_at.get(0, []):
            for k, run, st in zip(kinds, runners, states):
                record[k][:, j] = run.density(st)
        n_final = max(steps) if steps else 0
        block = None
        for n in range(n_final):
            if n % DRAW_BLOCK == 0:
                size = min(DRAW_BLOCK, n_final - n)
                block = np.stack([st.block(size) for st in streams], axis=1)
            xi = block[n % DRAW_BLOCK]
            with np.errstate(all="ignore"):
                for i, (k, run) in enumerate(zip(kinds, runners)):
                    if cfg.record_draws:
                        digests[k].update(np.ascontiguousarray(xi).tobytes())
                    states[i] = run.step(states[i], xi)
                    bad = blown_up(run.density(states[i])) & (failed_at[k] < 0)
                    if np.any(bad):
                        failed_at[k][bad] = n + 1
                        states[i] = run.zero_rows(states[i], bad)
            for j in out_at.get(n + 1, []):
                for k, run, st in zip(kinds, runners, states):
                    record[k][:, j] = run.density(st)
        for k in kinds:
            out[k] = (record[k], failed_at[k], digests[k].hexdigest() if cfg.record_draws else None)
    return lo, out


class _Welford:
    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)
        self.lo = np.full(shape, np.inf)
        self.hi = np.full(shape, -np.inf)

    def add(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + delta * (x - self.mean)
        self.lo = np.minimum(self.lo, x)
        self.hi = np.maximum(self.hi, x)

    def variance(self):
        if self.n < 2:
            return np.zeros_like(self.m2)
        return self.m2 / (self.n - 1)


def run_ensemble(cfg: EnsembleConfig, chunk_order=None) -> EnsembleStats:
    """Run all realizations and reduce them in realization-index order.

    ``chunk_order`` permutes the order in which chunks are executed (used to
    check that scheduling never changes the result).
    """
    plan = cfg.step_plan()
    chunks = _chunk_bounds(cfg)
    if chunk_order is not None:
        chunks = [chunks[i] for i in chunk_order]
    tasks = [(cfg, lo, hi) for lo, hi in chunks]
    if cfg.workers == 1:
        results = [_run_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_chunk, tasks))
    results.sort(key=lambda item: item[0])

    M = cfg.problem.grid.num_cells
    n_out = len(cfg.output_times)
    schemes = {}
    for k in cfg.schemes:
        acc = _Welford((n_out, M))
        failures = []
        paths = np.full((cfg.realizations, n_out, M), np.nan) if cfg.keep_paths else None
        digest = hashlib.sha256() if cfg.record_draws else None
        for lo, out in results:
            record, failed_at, chunk_digest = out[k]
            if digest is not None:
                digest.update(chunk_digest.encode())
            for b in range(record.shape[0]):
                r = lo + b
                if failed_at[b] >= 0:
                    failures.append((r, int(failed_at[b])))
                    continue
                acc.add(record[b])
                if paths is not None:
                    paths[r] = record[b]
        if acc.n == 0:
            raise EnsembleError(f"all {cfg.realizations} realizations of scheme {k!r} blew up")
        if failures:
            log.warning("scheme %s: %d of %d realizations blew up", k, len(failures), cfg.realizations)
        schemes[k] = SchemeStats(acc.mean, acc.variance(), acc.lo, acc.hi, acc.n, failures,
                                 plan[k][0], paths, digest.hexdigest() if digest else None)

    meta = {
        "master_seed": cfg.master_seed,
        "realizations": cfg.realizations,
        "chunk_size": cfg.chunk_size,
        "coupled": cfg.coupled,
        "epsilon": cfg.problem.epsilon,
        "num_cells": M,
        "velocity_nodes": cfg.problem.quad.size,
        "noise_modes": cfg.problem.noise.num_modes,
        "cfl_safety": cfg.cfl_safety,
        "output_times": list(cfg.output_times),
        "dt": {k: plan[k][0] for k in cfg.schemes},
        "dt_limit": {k: plan[k][2] for k in cfg.schemes},
        "failures": {k: len(schemes[k].failures) for k in cfg.schemes},
        "recording": "one run per realization sampled at every output time",
        "explicit_kinetic_stencil": "first-order upwind transport, explicit collision, explicit Ito noise",
    }
    return EnsembleStats(list(cfg.output_times), cfg.problem.grid.primal_nodes, schemes, meta)


def relative_l2_gap(a, b) -> float:
    """``||a - b|| / ||b||`` in the discrete L2 norm (the dx factor cancels)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def make_noise(grid: StaggeredGrid1D, kind: str = "paper", num_modes: int = 200,
               raw_wavenumbers: bool = False) -> NoiseModel:
    if kind == "paper":
        if num_modes == 0:
            return empty_noise(grid)
        return build_paper_noise(grid, num_modes, raw_wavenumbers)
    if kind == "constant":
        return constant_noise(grid)
    if kind == "none":
        return empty_noise(grid)
    raise ConfigError(f"unknown noise kind {kind!r}", key="noise.kind")


PAPER_REGIMES = {
    "kinetic_eps1": (1.0, ("smm", "explicit_kinetic"), lambda eps: (0.1, 0.3, 0.6, 1.0)),
    "diffusive_eps1e-2": (1e-2, ("smm", "crank_nicolson"), lambda eps: (eps / 10, 4 * eps / 10, 0.05, 0.1)),
}


def paper_problem(epsilon: float, num_cells: int = 200, num_modes: int = 200,
                  raw_wavenumbers: bool = False, noise_kind: str = "paper") -> Problem:
    grid = StaggeredGrid1D(num_cells, 1.0)
    return Problem(grid, epsilon, paper_initial_density(grid),
                   make_noise(grid, noise_kind, num_modes, raw_wavenumbers))


def paper_experiment(regime: str, realizations: int = 100, master_seed: int = 20240501,
                     workers: int = 1, num_cells: int = 200, num_modes: int = 200,
                     raw_wavenumbers: bool = False, chunk_size: int = 10,
                     keep_paths: bool = False) -> EnsembleStats:
    """Coupled reproduction of one of the two reported regimes."""
    try:
        eps, kinds, times = PAPER_REGIMES[regime]
    except KeyError:
        raise ConfigError(f"unknown regime {regime!r}; choose from {sorted(PAPER_REGIMES)}") from None
    problem = paper_problem(eps, num_cells, num_modes, raw_wavenumbers)
    cfg = EnsembleConfig(problem, kinds, realizations, master_seed, times(eps),
                         workers=workers, chunk_size=chunk_size, keep_paths=keep_paths)
    stats = run_ensemble(cfg)
    stats.metadata["regime"] = regime
    return stats


@dataclass
class EnergyCurve:
    times: np.ndarray
    energy: np.ndarray  # ensemble mean, one entry per step including t = 0
    stderr: np.ndarray  # standard error of that mean
    dt: float
    growth_rate: float  # smallest L consistent with the envelope, see envelope_rate
    slope: float  # least-squares slope of log(E_n / E_0), for diagnostics

    def bound_holds(self, rate: float, num_stderr: float = 3.0) -> bool:
        """``E_n <= e^{rate t_n} E_0`` at every step, up to ``num_stderr`` standard errors."""
        lower = self.energy - num_stderr * self.stderr
        return bool(np.all(lower <= np.exp(rate * self.times) * self.energy[0] * (1 + 1e-12)))


def fit_growth_rate(times, energy) -> float:
    """Least-squares slope through the origin of ``log(E_n)`` against ``t_n``.

    ``energy`` must already be normalized by its initial value.
    """
    times = np.asarray(times, dtype=float)
    y = np.log(np.asarray(energy, dtype=float))
    return float(np.dot(times, y) / np.dot(times, times))


def envelope_rate(times, energy, stderr, num_stderr: float = 3.0) -> float:
    """Smallest ``L >= 0`` with ``E_n - k SE_n <= e^{L t_n} E_0`` for all ``n >= 1``.

    The estimate bounds the expectation rather than the sample mean, so each
    step is allowed ``num_stderr`` standard errors of Monte Carlo slack.
    """
    times = np.asarray(times, dtype=float)[1:]
    lower = (np.asarray(energy, dtype=float) - num_stderr * np.asarray(stderr, dtype=float))[1:]
    ratio = np.maximum(lower / energy[0], 1.0)
    return float(np.max(np.log(ratio) / times, initial=0.0))


def telegraph_energy_curve(problem: Problem, dt: float, horizon: float, realizations: int,
                           master_seed: int, aggregate: int = 1, chunk_size: int = 50) -> EnergyCurve:
    """Ensemble-mean telegraph energy ``sum rho^2 + J^2`` at every step.

    The streams produce Brownian increments on a grid ``aggregate`` times
    finer than ``dt``; each step uses the normalized sum of ``aggregate``
    consecutive draws.  Runs at ``dt`` with ``aggregate=2`` and at ``dt/2``
    with ``aggregate=1`` therefore follow the same Brownian paths.
    """
    if problem.quad.kind != "two_point":
        raise ConfigError("telegraph energy needs the two-point velocity set")
    cfg = problem.scheme_config(dt)
    n_steps = int(round(horizon / dt))
    K = problem.noise.num_modes
    acc = _Welford((n_steps + 1,))
    for lo in range(0, realizations, chunk_size):
        hi = min(lo + chunk_size, realizations)
        streams = [DrawStream(master_seed, r, K) for r in range(lo, hi)]
        raw = np.stack([st.block(n_steps * aggregate) for st in streams], axis=1)
        xi_all = raw.reshape(n_steps, aggregate, hi - lo, K).sum(axis=1) / np.sqrt(aggregate)
        run = _Runner("telegraph", problem, cfg)
        state = run.init(hi - lo)
        paths = np.empty((hi - lo, n_steps + 1))
        paths[:, 0] = discrete_energy(state, problem.epsilon)
        for n in range(n_steps):
            state = step_telegraph(state, xi_all[n], cfg, step_index=n)
            paths[:, n + 1] = discrete_energy(state, problem.epsilon)
        for row in paths:
            acc.add(row)
    times = np.arange(n_steps + 1) * dt
    stderr = np.sqrt(acc.variance() / realizations)
    return EnergyCurve(times, acc.mean, stderr, dt,
                       envelope_rate(times, acc.mean, stderr),
                       fit_growth_rate(times[1:], acc.mean[1:] / acc.mean[0]))
