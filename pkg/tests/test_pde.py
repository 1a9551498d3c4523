import math

import numpy as np
import pytest

from ancestral.errors import MissingCertificate, StabilityViolation
from ancestral.model import Certificate, DensityField, GaussianConvolution, Grid, ModelParams, UniformWindow
from ancestral.operators import Operators
from ancestral.pde import (
    dense_eigen_oracle,
    eigen_residual,
    evolve_nonlinear,
    lambda_sufficient_check,
    moment_2q,
    solve_stationary,
    step_nonlinear,
)

from conftest import LAMBDA_EXAMPLE, constant_h


def test_zero_stays_zero(params, grid):
    f = DensityField(grid, np.zeros(grid.n))
    assert step_nonlinear(f, 0.01, params).values.max() == 0.0


def test_stationary_field_is_fixed(params, grid, eigen):
    g = step_nonlinear(eigen.F, 0.01, params)
    assert np.abs(g.values - eigen.F.values).sum() * grid.dx <= 1e-4


def test_logistic_mass_closed_form():
    g = Grid(-4.0, 4.0, 200)
    r, m0, T = 0.8, 0.1, 5.0
    p = constant_h(r, gamma=0.4)
    x = g.points
    f0 = np.exp(-x * x / 0.5)
    f0 *= m0 / (f0.sum() * g.dx)
    traj = evolve_nonlinear(DensityField(g, f0), T, p, dt=1e-3)
    e = math.exp(r * T)
    expected = r * m0 * e / (r + m0 * (e - 1))
    assert traj.final.mass == pytest.approx(expected, abs=1e-4)
    assert np.abs(traj.mass_residuals).max() <= 1e-10


def test_nonlinear_converges_to_stationary(params, grid, eigen):
    x = grid.points
    f0 = DensityField(grid, 0.5 * np.exp(-(x - 0.5) ** 2) / math.sqrt(math.pi))
    traj = evolve_nonlinear(f0, 20.0, params, dt=0.05, record_every=100)
    assert traj.final.mass == pytest.approx(eigen.lam, abs=1e-2)
    dist = [np.abs(f.values - eigen.F.values).sum() * grid.dx for f in traj.fields]
    assert all(b < a for a, b in zip(dist, dist[1:]))


def test_nonlinear_step_stability(params, grid):
    f0 = DensityField(grid, np.ones(grid.n))
    with pytest.raises(StabilityViolation):
        step_nonlinear(f0, 5.0, params)


def test_frozen_eigenvalue(eigen):
    assert eigen.lam == pytest.approx(LAMBDA_EXAMPLE, abs=1e-10)
    assert eigen.residual <= 1e-8
    assert eigen.F.mass == pytest.approx(eigen.lam, rel=1e-12)
    assert eigen.F.values.min() >= 0


def test_dense_oracle_agrees(params, grid, eigen):
    dense = dense_eigen_oracle(params, grid)
    assert dense.lam == pytest.approx(eigen.lam, abs=1e-9)
    assert np.abs(dense.F.values - eigen.F.values).sum() * grid.dx <= 1e-6


def test_drift_perturbation_small(params, grid, eigen):
    p0 = ModelParams(b=params.b, d=params.d, gamma=params.gamma, rho=0.0, kernel=params.kernel, K=params.K)
    lam0 = solve_stationary(p0, grid).lam
    assert abs(lam0 - eigen.lam) <= 1e-2 * eigen.lam


def test_dense_oracle_without_motion_is_max_h():
    g = Grid(-4.0, 4.0, 101)
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=0.0, rho=0.0, kernel=UniformWindow(0.3))
    d = dense_eigen_oracle(p, g)
    ops = Operators(p, g)
    assert d.lam == pytest.approx(ops.h.max(), abs=1e-12)


def test_eigen_residual_of_pair(params, grid, eigen):
    ops = Operators(params, grid)
    assert eigen_residual(ops, eigen.F.values, eigen.lam) <= 1e-8
    assert eigen_residual(ops, eigen.F.values, eigen.lam + 0.1) > 0.05


def _certified(gamma, rho):
    k = GaussianConvolution(1.0, Certificate(0.2, 0.5))
    return ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=gamma, rho=rho, kernel=k)


def test_lambda_certificate():
    # inf h on (-1, 1) is 0.5
    assert lambda_sufficient_check(_certified(2.0, 0.0), 1.0).holds is False
    c = lambda_sufficient_check(_certified(0.4, 0.0), 1.0)
    assert c.holds and c.inf_h == pytest.approx(0.5)
    assert lambda_sufficient_check(_certified(0.4, 1.0), 1.0).holds is False


def test_lambda_certificate_needs_pair():
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=0.4, rho=0.0, kernel=GaussianConvolution(1.0))
    with pytest.raises(MissingCertificate):
        lambda_sufficient_check(p, 1.0)


def test_moment_of_indicator():
    g = Grid(-1.0, 1.0, 2000)
    lam = 0.7
    F = DensityField(g, np.full(g.n, lam / 2))
    m, frac = moment_2q(F, 1)
    # the grid includes both endpoints, so quadrature is off by O(dx)
    assert m == pytest.approx(lam / 3, abs=2 * g.dx)
    assert 0 < frac < 1


def test_moment_of_stationary_small_outside(eigen):
    m, frac = moment_2q(eigen.F, 1)
    assert m > 0 and frac < 1e-3
