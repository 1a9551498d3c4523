"""Grid generators for the trait motion and its adjoint, plus Feynman-Kac propagation.

The forward generator acts on test functions and drifts at ``+rho``; the
adjoint acts on densities.  Both are assembled so that the adjoint matrix is
the exact transpose of the forward one, which makes the discrete duality
``<L f, g> = <f, L* g>`` hold to rounding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import StabilityViolation
from .model import Grid, ModelParams, growth_rate

STABILITY_FACTOR = 0.9


def balance(P, symmetric=False, tol=1e-15, max_iter=20000):
    """Scale a nonnegative matrix to be doubly stochastic (Sinkhorn).

    Symmetric input is balanced with a single scaling vector so the result is
    exactly symmetric.
    """
    P = np.array(P, dtype=float)
    if symmetric:
        P = 0.5 * (P + P.T)
        d = np.ones(P.shape[0])
        for _ in range(max_iter):
            s = P @ d
            d = np.sqrt(d / s)
            B = (d[:, None] * d[None, :]) * P
            if np.abs(B.sum(axis=1) - 1.0).max() < tol:
                break
        return B
    r = np.ones(P.shape[0])
    c = np.ones(P.shape[1])
    for _ in range(max_iter):
        r = 1.0 / (P @ c)
        c = 1.0 / (P.T @ r)
        B = r[:, None] * P * c[None, :]
        if np.abs(B.sum(axis=1) - 1.0).max() < tol:
            break
    return B


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    grid: Grid
    entries: np.ndarray
    which: str
    params: ModelParams
    jump: np.ndarray
    leak: np.ndarray

    @property
    def transport(self) -> np.ndarray:
        return self.entries - self.jump

    def to_csv(self, path):
        """Row-major dump with a grid metadata header line."""
        g = self.grid
        with open(path, "w", newline="") as fh:
            fh.write(f"# which={self.which} x_min={g.x_min} x_max={g.x_max} n={g.n}\n")
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            rows, cols = np.nonzero(self.entries)
            for i, j in zip(rows, cols):
                w.writerow([int(i), int(j), repr(float(self.entries[i, j]))])


def _assemble(params: ModelParams, grid: Grid):
    n = grid.n
    kernel = params.kernel
    P = balance(kernel.cell_matrix(grid), symmetric=kernel.symmetric)
    jump = params.gamma * (P - np.eye(n))
    transport = np.zeros((n, n))
    rate = abs(params.rho) / grid.dx
    if rate > 0:
        idx = np.arange(n)
        transport[idx, idx] = -rate
        # upwind: information travels against the drift
        if params.rho > 0:
            transport[idx[:-1], idx[:-1] + 1] = rate
        else:
            transport[idx[1:], idx[1:] - 1] = rate
    L = transport + jump
    return L, jump, kernel.outside_mass(grid)


def generator_matrix(params: ModelParams, grid: Grid, which="L") -> GeneratorMatrix:
    L, jump, leak = _assemble(params, grid)
    if which == "L":
        return GeneratorMatrix(grid, L, "L", params, jump, leak)
    if which == "Lstar":
        return GeneratorMatrix(grid, L.T.copy(), "Lstar", params, jump.T.copy(), leak)
    raise ValueError(f"which must be 'L' or 'Lstar', got {which!r}")


def stability_bound(params: ModelParams, grid: Grid, hl: np.ndarray) -> float:
    return STABILITY_FACTOR / (params.gamma + float(np.abs(hl).max()) + abs(params.rho) / grid.dx)


class Operators:
    """Cached grid operators for one ``(params, grid)`` pair."""

    def __init__(self, params: ModelParams, grid: Grid):
        self.params = params
        self.grid = grid
        self.L, self.jump, self.leak = _assemble(params, grid)
        self.Lstar = self.L.T.copy()
        self.h = growth_rate(params, grid.points)

    @cached_property
    def P(self) -> np.ndarray:
        """Balanced jump probabilities between cells."""
        g = self.params.gamma
        if g == 0:
            return balance(self.params.kernel.cell_matrix(self.grid), self.params.kernel.symmetric)
        return self.jump / g + np.eye(self.grid.n)

    def inner(self, f, g) -> float:
        return float(np.dot(f, g) * self.grid.dx)

    def dt_max(self, lam=0.0, shift=None) -> float:
        hl = self.h - lam if shift is None else self.h - shift
        return stability_bound(self.params, self.grid, hl)

    def steps(self, t, lam, dt=None):
        """Split ``[0, t]`` into equal Euler steps no longer than ``dt``."""
        bound = self.dt_max(lam)
        if dt is None:
            dt = bound
        elif dt > bound * (1 + 1e-12):
            raise StabilityViolation(f"dt={dt:.4g} exceeds the stability bound {bound:.4g}")
        if t <= 0:
            return 0, 0.0
        k = max(1, math.ceil(t / dt - 1e-12))
        return k, t / k

    def euler_matrix(self, lam, dt, which="Phat") -> np.ndarray:
        A = self.L if which == "Phat" else self.Lstar
        M = dt * (A + np.diag(self.h - lam))
        M[np.diag_indices_from(M)] += 1.0
        return M

    def propagate(self, f, t, lam, which="Phat", dt=None, record=False):
        """Explicit Euler for ``du/dt = A u + (h - lam) u``.

        ``which='Phat'`` uses the forward generator, ``'PhatStar'`` the adjoint.
        With ``record=True`` returns ``(times, states)`` at every step.
        """
        if which not in ("Phat", "PhatStar"):
            raise ValueError(f"unknown semigroup {which!r}")
        u = np.array(f, dtype=float)
        k, step = self.steps(t, lam, dt)
        if k == 0:
            return (np.zeros(1), u[None, :]) if record else u
        M = self.euler_matrix(lam, step, which)
        if record:
            out = np.empty((k + 1, u.size))
            out[0] = u
            for i in range(k):
                u = M @ u
                out[i + 1] = u
            return np.arange(k + 1) * step, out
        for _ in range(k):
            u = M @ u
        return u


def duality_residual(f, g, params: ModelParams, grid: Grid, ops: Operators | None = None) -> float:
    """``<L f, g> - <f, L* g>`` under grid quadrature."""
    ops = ops or Operators(params, grid)
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    return ops.inner(ops.L @ f, g) - ops.inner(f, ops.Lstar @ g)


def fk_propagate(f, t, params, lam, which="Phat", dt=None, grid: Grid | None = None,
                 ops: Operators | None = None):
    if ops is None:
        if grid is None:
            raise ValueError("need a grid or an Operators instance")
        ops = Operators(params, grid)
    return ops.propagate(f, t, lam, which, dt)


def fk_duality_residual(f, g, t, params, lam, dt=None, grid=None, ops=None) -> float:
    """``<P_t f, g> - <f, P*_t g>`` with identical step sequences on both sides."""
    if ops is None:
        ops = Operators(params, grid)
    pf = ops.propagate(f, t, lam, "Phat", dt)
    pg = ops.propagate(g, t, lam, "PhatStar", dt)
    return ops.inner(pf, g) - ops.inner(f, pg)
