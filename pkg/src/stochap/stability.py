"""Von Neumann analysis of the telegraph scheme and discrete energy monitors.

For an elementary wave ``rho_j = rho e^{i j phi}``, ``J_{j+1/2} = J e^{i (j+1/2) phi}``
one step of the reduced scheme maps ``(rho, J)`` through a 2x2 complex
matrix.  Its deterministic part is

    [[1 - 4 mu^2 lam X,  -i (1 - 2 mu X) 2 lam mu sin(theta)],
     [-2 i mu lam sin(theta),  (1 - 2 mu X) lam]]

with ``mu = dt/(eps dx)``, ``lam = 1/(1 + dt/eps^2)``, ``theta = phi/2`` and
``X = sin(theta)^2``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .grid import StaggeredGrid1D, VelocityQuadrature
from .scheme_smm import cfl_dt

NORM_TOL = 1e-12


@dataclass(frozen=True)
class AmplificationContext:
    mu: float
    lam: float
    theta: float

    @classmethod
    def from_steps(cls, dt: float, dx: float, eps: float, theta: float) -> "AmplificationContext":
        return cls(dt / (eps * dx), 1.0 / (1.0 + dt / eps**2), theta)

    @property
    def X(self) -> float:
        return float(np.sin(self.theta) ** 2)


def _matrix(ctx: AmplificationContext, a):
    """Amplification matrix with noise multiplier ``a`` (``a = 1`` is deterministic)."""
    mu, lam = ctx.mu, ctx.lam
    s = np.sin(ctx.theta)
    X = s * s
    return np.array(
        [
            [a - 4.0 * mu**2 * lam * X, -1j * (a - 2.0 * mu * X) * 2.0 * lam * mu * s],
            [-2j * mu * lam * s, (a - 2.0 * mu * X) * lam],
        ],
        dtype=complex,
    )


def amplification_det(ctx: AmplificationContext) -> np.ndarray:
    return _matrix(ctx, 1.0)


def noise_matrices(ctx: AmplificationContext):
    """``(B, C)`` in ``A = A_det + sqrt(dt) xi B + dt C``.

    The stochastic matrix is affine in the multiplier ``a = 1 + dt/2 + sqrt(dt) xi``,
    so ``B`` is its ``a``-derivative and ``C = B / 2``.
    """
    B = _matrix(ctx, 1.0) - _matrix(ctx, 0.0)
    return B, 0.5 * B


def amplification_stoch(ctx: AmplificationContext, xi: float, dt: float) -> np.ndarray:
    return _matrix(ctx, 1.0 + 0.5 * dt + np.sqrt(dt) * xi)


def spectral_norm_sq(m) -> float:
    """Largest eigenvalue of ``h = m^* m`` from its trace and determinant.

    ``T^2 - 4 D`` is evaluated as ``(h11 - h22)^2 + 4 |h12|^2``, which is the
    same quantity for Hermitian ``h`` but free of cancellation when the two
    eigenvalues are close (small ``dt``).
    """
    m = np.asarray(m, dtype=complex)
    h = m.conj().T @ m
    a, d = float(np.real(h[0, 0])), float(np.real(h[1, 1]))
    disc = (a - d) ** 2 + 4.0 * abs(h[0, 1]) ** 2
    return 0.5 * (a + d + np.sqrt(disc))


@dataclass(frozen=True)
class PolynomialReport:
    q0: float
    q1: float
    q_min: float
    q_at_X: float
    margin: float  # 1 - T + D = 8 lam mu^2 X Q(X)


def stability_polynomial(ctx: AmplificationContext) -> PolynomialReport:
    mu, lam, X = ctx.mu, ctx.lam, ctx.X

    def Q(x):
        return 1.0 - lam + 2.0 * lam * mu * x - 2.0 * lam * mu**2 * x**2 - 2.0 * lam * mu**2 * x

    q0, q1 = Q(0.0), Q(1.0)
    qx = Q(X)
    # concave in X, so the minimum over [0, 1] is at an endpoint
    return PolynomialReport(q0, q1, min(q0, q1), qx, 8.0 * lam * mu**2 * X * qx)


@dataclass(frozen=True)
class ScanPoint:
    dt: float
    dx: float
    epsilon: float
    cfl_ok: bool
    max_norm_sq: float
    q0: float
    q1: float

    @property
    def norm_ok(self) -> bool:
        return self.max_norm_sq <= 1.0 + NORM_TOL


@dataclass
class ScanReport:
    points: list

    @property
    def violations(self) -> list:
        """Points where the CFL bound holds but the norm bound fails (should be empty)."""
        return [p for p in self.points if p.cfl_ok and not p.norm_ok]

    @property
    def unstable_outside_cfl(self) -> list:
        return [p for p in self.points if not p.cfl_ok and not p.norm_ok]

    def __len__(self):
        return len(self.points)


def max_norm_over_theta(dt: float, dx: float, eps: float, n_theta: int = 201) -> float:
    thetas = np.concatenate([np.linspace(0.0, 2.0 * np.pi, n_theta), [np.pi / 2]])
    return max(spectral_norm_sq(amplification_det(AmplificationContext.from_steps(dt, dx, eps, t)))
               for t in thetas)


def scan_stability(dts, dxs, epsilons, n_theta: int = 201) -> ScanReport:
    """Evaluate the CFL flag and the worst amplification norm on a parameter grid."""
    points = []
    for dt, dx, eps in itertools.product(dts, dxs, epsilons):
        cfl_ok = dt <= cfl_dt(dx, eps, 1.0, 1.0, "telegraph")
        poly = stability_polynomial(AmplificationContext.from_steps(dt, dx, eps, np.pi / 2))
        points.append(ScanPoint(float(dt), float(dx), float(eps), bool(cfl_ok),
                                max_norm_over_theta(dt, dx, eps, n_theta), poly.q0, poly.q1))
    if not points:
        raise ValueError("stability scan needs nonempty ranges")
    return ScanReport(points)


def discrete_energy(state, eps: float, grid: StaggeredGrid1D | None = None,
                    quad: VelocityQuadrature | None = None):
    """Energy of a state.

    With ``quad`` given, ``state = (rho, g)`` and the result is
    ``||rho||^2 + eps^2 |||g|||^2`` (dx-weighted).  Otherwise ``state`` is a
    telegraph ``(rho, J)`` pair and the result is ``sum_i rho_i^2 + J_i^2``.
    Leading batch axes are kept.
    """
    if quad is not None:
        rho, g = state
        dx = grid.dx
        return np.sum(rho * rho, axis=-1) * dx + eps**2 * np.sum(quad.project_pi(g * g), axis=-1) * dx
    rho, J = (state.rho, state.J) if hasattr(state, "J") else state
    return np.sum(rho * rho, axis=-1) + np.sum(J * J, axis=-1)
