"""Nonlinear limiting PDE, its stationary eigenpair and the positivity certificate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ComplexDominant,
    Divergence,
    MissingCertificate,
    NoConvergence,
    NonPositiveLambda,
    StabilityViolation,
)
from .model import DensityField, EigenPair, Grid, ModelParams, poly_sup, real_critical_points
from .operators import Operators

log = logging.getLogger(__name__)


@dataclass
class PdeTrajectory:
    times: np.ndarray
    fields: list
    masses: np.ndarray
    mass_residuals: np.ndarray
    clipped: float = 0.0

    @property
    def final(self) -> DensityField:
        return self.fields[-1]


def _nonlinear_dt_bound(ops, mass):
    return ops.dt_max(shift=mass)


def _step(ops, u, dt):
    mass = u.sum() * ops.grid.dx
    if dt > _nonlinear_dt_bound(ops, mass) * (1 + 1e-12):
        raise StabilityViolation(
            f"dt={dt:.4g} exceeds the bound {_nonlinear_dt_bound(ops, mass):.4g} at mass {mass:.4g}"
        )
    new = u + dt * (ops.Lstar @ u + (ops.h - mass) * u)
    neg = new < 0
    clipped = 0.0
    if neg.any():
        clipped = float(-new[neg].sum() * ops.grid.dx)
        new[neg] = 0.0
    return new, mass, clipped


def step_nonlinear(f: DensityField, dt, params: ModelParams, ops: Operators | None = None):
    """One explicit Euler step of the nonlinear equation; returns the new field."""
    ops = ops or Operators(params, f.grid)
    new, _, clipped = _step(ops, f.values, dt)
    if clipped:
        log.debug("clipped %.3g mass in a nonlinear step", clipped)
    return DensityField(f.grid, new)


def evolve_nonlinear(f0: DensityField, T, params: ModelParams, dt, ops=None,
                     mass_cap=1e6, record_every=1) -> PdeTrajectory:
    ops = ops or Operators(params, f0.grid)
    dx = f0.grid.dx
    k = max(1, math.ceil(T / dt - 1e-12))
    dt = T / k
    u = f0.values.copy()
    times, fields, masses = [0.0], [f0], [f0.mass]
    residuals = np.empty(k)
    clipped_total = 0.0
    h = ops.h
    for i in range(k):
        mass_i = u.sum() * dx
        drift = float(np.dot(h, u) * dx) - mass_i * mass_i
        u, _, clipped = _step(ops, u, dt)
        clipped_total += clipped
        mass_next = u.sum() * dx
        residuals[i] = (mass_next - mass_i) / dt - drift
        if not mass_next < mass_cap:
            raise Divergence(f"mass {mass_next:.4g} exceeded the cap {mass_cap:.4g} at t={(i + 1) * dt:.4g}")
        if (i + 1) % record_every == 0 or i + 1 == k:
            times.append((i + 1) * dt)
            fields.append(DensityField(f0.grid, u.copy()))
            masses.append(mass_next)
    return PdeTrajectory(np.array(times), fields, np.array(masses), residuals, clipped_total)


def eigen_residual(ops: Operators, F, lam) -> float:
    """``|| L* F + h F - lam F ||_1``."""
    r = ops.Lstar @ F + (ops.h - lam) * F
    return float(np.abs(r).sum() * ops.grid.dx)


def solve_stationary(params: ModelParams, grid: Grid, tol=1e-12, macro=1.0,
                     max_iter=20000, ops: Operators | None = None) -> EigenPair:
    """Power iteration on the linear semigroup of ``L* + h``.

    Each macro step runs ``macro`` time units of Euler steps and renormalizes
    to unit mass.  The eigenvalue comes from the per-step mass growth factor
    ``g`` of the Euler map as ``(g - 1) / dt``, which is exact for the
    discrete operator at convergence.
    """
    ops = ops or Operators(params, grid)
    dx = grid.dx
    dt_bound = ops.dt_max(0.0)
    k = max(1, math.ceil(macro / dt_bound))
    dt = macro / k
    M = ops.euler_matrix(0.0, dt, "PhatStar")

    x = grid.points
    u = np.exp(-0.5 * x * x)
    u /= u.sum() * dx
    lam_old = math.nan
    for it in range(1, max_iter + 1):
        v = u
        for _ in range(k):
            v = M @ v
        mass = v.sum() * dx
        if not mass > 0:
            raise NonPositiveLambda("iterate lost all mass")
        growth = mass ** (1.0 / k)
        lam = (growth - 1.0) / dt
        v = v / mass
        diff = float(np.abs(v - u).sum() * dx)
        u = v
        if diff <= tol and abs(lam - lam_old) <= tol:
            break
        lam_old = lam
    else:
        raise NoConvergence(f"power iteration did not converge in {max_iter} macro steps")
    # last step gives the Rayleigh-free estimate on the converged vector
    lam = ((M @ u).sum() * dx - 1.0) / dt
    if lam <= 0:
        raise NonPositiveLambda(f"dominant eigenvalue {lam:.6g} is not positive")
    F = lam * u
    return EigenPair(DensityField(grid, np.clip(F, 0.0, None)), float(lam),
                     eigen_residual(ops, F, lam), it)


def dense_eigen_oracle(params: ModelParams, grid: Grid, ops: Operators | None = None,
                       imag_tol=1e-9) -> EigenPair:
    """Dominant eigenpair of the dense matrix ``L* + diag(h)`` via LAPACK."""
    if grid.n > 1000:
        raise ValueError("dense oracle is limited to n <= 1000")
    ops = ops or Operators(params, grid)
    A = ops.Lstar + np.diag(ops.h)
    w, V = np.linalg.eig(A)
    k = int(np.argmax(w.real))
    if abs(w[k].imag) > imag_tol * max(1.0, abs(w[k].real)):
        raise ComplexDominant(f"dominant eigenvalue {w[k]} is not real")
    v = V[:, k].real
    v = v * np.sign(v[np.argmax(np.abs(v))])
    lam = float(w[k].real)
    if lam <= 0:
        raise NonPositiveLambda(f"dominant eigenvalue {lam:.6g} is not positive")
    v = np.clip(v, 0.0, None)
    F = lam * v / (v.sum() * grid.dx)
    return EigenPair(DensityField(grid, F), lam, eigen_residual(ops, F, lam), 0)


@dataclass
class LambdaCertificate:
    holds: bool
    inf_h: float
    gamma: float
    lhs: float
    rhs: float


def lambda_sufficient_check(params: ModelParams, x1) -> LambdaCertificate:
    """Sufficient condition for a positive eigenvalue.

    Requires ``inf h > gamma`` on ``(-x1, x1)`` and
    ``gamma * kappa0 * eps**3 >= 12 * |rho| * x1``.
    """
    cert = params.kernel.certificate
    if cert is None:
        raise MissingCertificate("kernel carries no minorization pair (kappa0, eps)")
    if not 0 < cert.eps < x1:
        raise ValueError(f"need 0 < eps < x1, got eps={cert.eps}, x1={x1}")
    h = params.h
    inf_h = -poly_sup(-h, -x1, x1)
    lhs = params.gamma * cert.kappa0 * cert.eps ** 3
    rhs = 12.0 * abs(params.rho) * x1
    holds = inf_h > params.gamma and lhs >= rhs
    return LambdaCertificate(bool(holds), float(inf_h), params.gamma, float(lhs), float(rhs))


def moment_2q(F: DensityField, q=1):
    """Return ``(int x**(2q) F, fraction of it from the outer 10% of the grid)``."""
    g = F.grid
    x = g.points
    contrib = x ** (2 * q) * F.values
    total = float(contrib.sum() * g.dx)
    centre = 0.5 * (g.x_min + g.x_max)
    outer = np.abs(x - centre) >= 0.45 * (g.x_max - g.x_min)
    frac = float(contrib[outer].sum() * g.dx / total) if total > 0 else 0.0
    return total, frac
