import math

import numpy as np
import pytest
from numpy.polynomial import Polynomial
from scipy import integrate
from scipy import stats as sst
from scipy.linalg import expm

from ancestral.errors import AcceptanceTooLow, FloorExit
from ancestral.model import ModelParams, UniformWindow, example_grid
from ancestral.paths import PathBatch, TraitPath, reverse_path
from ancestral.pde import solve_stationary
from ancestral.spine import (
    SpineContext,
    estimate_mt,
    path_integrals,
    sample_reversed,
    sample_spine_forward,
    sample_X,
    segment_integral,
)
from ancestral.stats import EmpiricalSample, wasserstein1

from conftest import constant_h


@pytest.fixture(scope="module")
def flat_ctx():
    """Constant ``h``: flat eigenfunction, ``lambda = r``."""
    p = constant_h(0.6, gamma=0.4)
    return SpineContext(p, solve_stationary(p, example_grid()), T_max=2.0)


@pytest.fixture(scope="module")
def drift_ctx():
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=1.0, rho=0.3, kernel=UniformWindow(1.0))
    return SpineContext(p, solve_stationary(p, example_grid()), T_max=1.0)


# ---------------------------------------------------------------- paths


def test_reverse_path_example():
    p = TraitPath(0.0, 3.0, 0.0, [1.0], [5.0], 0.0)
    r = reverse_path(p, 3.0)
    assert r.x0 == 5.0
    np.testing.assert_array_equal(r.jump_times, [2.0])
    np.testing.assert_array_equal(r.jump_values, [0.0])
    assert r(0.0) == 5.0 and r(2.5) == 0.0 and r(3.0) == 0.0


def test_reverse_with_drift():
    p = TraitPath(0.0, 2.0, 1.0, [0.5], [-1.0], 0.2)
    r = reverse_path(p, 2.0)
    assert r.slope == -0.2
    assert r.x0 == pytest.approx(-1.0 + 0.2 * 1.5)
    # pre-jump value of the original: 1 + 0.2 * 0.5
    assert r.jump_values[0] == pytest.approx(1.1)
    assert r(2.0) == pytest.approx(1.0)


def test_reverse_is_involution(rng):
    T = 4.0
    for _ in range(20):
        k = rng.integers(0, 6)
        jt = np.sort(rng.uniform(0, T, k))
        p = TraitPath(0.0, T, rng.normal(), jt, rng.normal(size=k), rng.normal() * 0.1)
        rr = reverse_path(reverse_path(p, T), T)
        s = rng.uniform(0, T, 30)
        np.testing.assert_allclose(rr(s), p(s), atol=1e-12)


def test_trait_path_validation():
    with pytest.raises(ValueError):
        TraitPath(0.0, 1.0, 0.0, [0.5, 0.2], [1.0, 2.0], 0.0)
    with pytest.raises(ValueError):
        reverse_path(TraitPath(1.0, 3.0, 0.0, [], [], 0.0), 2.0)
    with pytest.raises(ValueError):
        reverse_path(TraitPath(0.0, 1.0, 0.0, [], [], 0.0), 2.0)


def test_path_batch_matches_members(rng):
    T = 3.0
    paths = []
    for _ in range(15):
        k = rng.integers(0, 5)
        paths.append(TraitPath(0.0, T, rng.normal(), np.sort(rng.uniform(0, T, k)), rng.normal(size=k), 0.1))
    b = PathBatch.from_paths(paths)
    assert len(b) == 15
    np.testing.assert_array_equal(b.n_jumps(), [p.n_jumps for p in paths])
    for s in (0.0, 0.7, 2.2, 3.0):
        np.testing.assert_allclose(b.evaluate(s), [p(s) for p in paths], atol=1e-12)
        np.testing.assert_allclose(b.left_limit(s), [p.left_limit(s) for p in paths], atol=1e-12)
    rb = b.reverse(2.5)
    for i, p in enumerate(paths):
        rp = reverse_path(p, 2.5)
        for s in (0.1, 1.0, 2.4):
            assert rb[i](s) == pytest.approx(rp(s), abs=1e-12)
    sel = b.select(np.arange(15) % 2 == 0)
    assert sel.n == 8 and sel[1](1.0) == pytest.approx(paths[2](1.0))


def test_path_batch_rows():
    b = PathBatch(0.0, 1.0, [0.0, 1.0], [1], [0.5], [3.0], 0.0)
    rows = list(b.rows([0.0, 1.0]))
    assert rows == [(0, 0.0, 0.0), (0, 1.0, 0.0), (1, 0.0, 1.0), (1, 1.0, 3.0)]


# ------------------------------------------------------- path integrals


def test_segment_integral_quadrature():
    p = Polynomial([1.0, -0.3, -0.5, 0.1])
    for x, slope, L in [(0.3, 0.0, 1.2), (-1.0, 0.7, 2.0), (2.0, -0.4, 0.5)]:
        ref, _ = integrate.quad(lambda s: p(x + slope * s), 0, L)
        assert float(segment_integral(p, x, slope, L)) == pytest.approx(ref, rel=1e-12)


def test_path_integrals_quadrature(rng):
    p = Polynomial([1.0, 0.0, -0.5])
    paths = [TraitPath(0.0, 2.0, 0.4, [0.5, 1.5], [-1.0, 0.8], 0.2), TraitPath(0.0, 2.0, -0.2, [], [], 0.2)]
    got = path_integrals(PathBatch.from_paths(paths), p)
    for q, g in zip(paths, got):
        pts = [0.0, *q.jump_times, 2.0]
        ref = sum(integrate.quad(lambda s: p(q(s)), a, b)[0] for a, b in zip(pts, pts[1:]))
        assert g == pytest.approx(ref, rel=1e-10)
    partial = path_integrals(PathBatch.from_paths(paths), p, t_end=1.0)
    assert partial[1] == pytest.approx(integrate.quad(lambda s: p(-0.2 + 0.2 * s), 0, 1)[0], rel=1e-10)


# ------------------------------------------------------------ raw motion


def test_sample_X_without_jumps(rng):
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=0.0, rho=0.3, kernel=UniformWindow(0.3))
    b = sample_X(0.5, 2.0, p, rng, n=100)
    assert b.n_jumps().sum() == 0
    np.testing.assert_allclose(b.evaluate(2.0), 1.1)
    np.testing.assert_allclose(sample_X(0.5, 2.0, p, rng, adjoint=True, n=5).evaluate(2.0), -0.1)


def test_sample_X_jump_counts_poisson(params, rng):
    T, n = 3.0, 20000
    counts = sample_X(0.0, T, params, rng, n=n).n_jumps()
    mu = params.gamma * T
    assert abs(counts.mean() - mu) <= 4 * math.sqrt(mu / n)
    k = np.arange(6)
    obs = np.r_[[np.sum(counts == i) for i in k], np.sum(counts > k[-1])]
    exp = np.r_[sst.poisson.pmf(k, mu), sst.poisson.sf(k[-1], mu)] * n
    assert sst.chisquare(obs, exp).pvalue > 1e-3


def test_adjoint_motion_mirrors_forward(rng):
    # translation-invariant symmetric kernel: X* equals X reflected in the drift
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=1.0, rho=0.2, kernel=UniformWindow(0.5))
    T = 2.0
    a = sample_X(0.0, T, p, rng, n=5000).evaluate(T) - p.rho * T
    b = sample_X(0.0, T, p, rng, adjoint=True, n=5000).evaluate(T) + p.rho * T
    assert sst.ks_2samp(a, b).pvalue > 1e-3


# ------------------------------------------------------------ m_t


def test_mt_trivial(params, rng):
    assert estimate_mt(0.0, 0.0, params, 0.9, 10, rng) == (1.0, 0.0)
    m, se = estimate_mt(0.3, 1.0, constant_h(0.8, gamma=0.4), 0.8, 100, rng)
    assert m == pytest.approx(1.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)
    m, _ = estimate_mt(0.3, 1.5, constant_h(0.8, gamma=0.4), 0.5, 100, rng)
    assert m == pytest.approx(math.exp(0.3 * 1.5), rel=1e-12)


def test_m_table_start_and_lattice(ctx):
    np.testing.assert_array_equal(ctx.m(0.0), 1.0)
    with pytest.raises(ValueError):
        ctx.m(0.0005)
    with pytest.raises(ValueError):
        ctx.m(ctx.T_max + 1)


def test_m_against_monte_carlo(ctx, rng):
    g = ctx.grid
    for x in (-1.0, 0.0, 1.5):
        i = int(round(g.locate(x)))
        m, se = estimate_mt(g.points[i], 1.0, ctx.params, ctx.lam, 10000, rng)
        assert abs(m - ctx.m(1.0)[i]) <= 3 * se + 1e-3


def test_m_weighted_by_F_is_conserved(ctx):
    # <m_t, F> is constant because F is the adjoint eigenfunction
    for t in (0.5, 1.0, 2.0):
        assert ctx.ops.inner(ctx.m(t), ctx.F) == pytest.approx(ctx.lam, rel=1e-10)


def test_flat_case_m_is_constant(flat_ctx):
    inner = flat_ctx.grid.inner_half()
    np.testing.assert_allclose(flat_ctx.m(1.0)[inner], 1.0, atol=1e-9)


def test_spine_marginal_is_probability(ctx):
    i = ctx.grid.n // 2 + 30
    q = ctx.spine_marginal(i, 2.0, 1.0)
    assert q.min() >= 0
    assert q.sum() * ctx.grid.dx == pytest.approx(1.0, abs=1e-9)


# ------------------------------------------------------------ forward spine


def test_forward_spine_constant_rate(flat_ctx, rng):
    T = 1.0
    s = sample_spine_forward(0.0, T, flat_ctx, rng, n_trials=40000)
    # 4 SE keeps the family-wise false alarm rate of the suite small
    assert abs(s.rate - math.exp(-flat_ctx.C * T)) <= 4 * s.rate_se
    # killing is independent of the path, so accepted paths are plain X
    x = sample_X(0.0, T, flat_ctx.params, rng, n=5000).evaluate(T)
    assert sst.ks_2samp(s.paths.evaluate(T), x).pvalue > 1e-3


def test_forward_spine_arguments(ctx, rng):
    with pytest.raises(ValueError):
        sample_spine_forward(0.0, 1.0, ctx, rng)
    with pytest.raises(ValueError):
        sample_spine_forward("uniform", 1.0, ctx, rng, n_trials=10)
    s = sample_spine_forward("biased", 0.5, ctx, rng, n_accept=100)
    assert s.paths.n == 100


def test_acceptance_floor(ctx, rng):
    with pytest.raises(AcceptanceTooLow):
        sample_spine_forward(3.9, 2.0, ctx, rng, n_trials=6000, floor=0.5)


# ------------------------------------------------------------ reversed spine


def test_reversed_flat_equals_forward(flat_ctx, rng):
    T = 1.5
    y = sample_reversed(T, flat_ctx, rng, 5000, x0=0.0).paths.evaluate(T)
    x = sample_X(0.0, T, flat_ctx.params, rng, n=5000).evaluate(T)
    assert sst.ks_2samp(x, y).pvalue > 1e-3


def test_reversed_without_jumps(rng):
    p = constant_h(0.6, gamma=0.0)
    c = SpineContext(p, solve_stationary(p, example_grid()), T_max=1.0)
    r = sample_reversed(1.0, c, rng, 50, x0=0.25)
    assert r.paths.n_jumps().sum() == 0
    np.testing.assert_array_equal(r.paths.evaluate(1.0), 0.25)


def test_reversed_generator_is_conservative(drift_ctx):
    G = drift_ctx.reversed_generator()
    inner = drift_ctx.F >= 1e-3 * drift_ctx.F.max()
    assert np.abs(G.sum(axis=1)[inner]).max() <= 1e-8


def test_reversed_matches_grid_generator(drift_ctx, rng):
    c = drift_ctx
    g = c.grid
    t, n = 0.5, 20000
    phi = np.sin(g.points)
    G = c.reversed_generator()
    for x in (-0.5, 0.0, 0.8):
        i = int(round(g.locate(x)))
        ref = float((expm(t * G) @ phi)[i])
        y = sample_reversed(t, c, rng, n, x0=g.points[i]).paths.evaluate(t)
        v = np.sin(y)
        se = v.std(ddof=1) / math.sqrt(n)
        # grid upwinding adds numerical diffusion of order rho * dx
        assert abs(v.mean() - ref) <= 3 * se + c.params.rho * g.dx * t


def test_reversed_marginal_law(drift_ctx, rng):
    # started from F / lambda, the reversed spine has law m_s F / lambda at time s
    c = drift_ctx
    y = sample_reversed(1.0, c, rng, 20000).paths
    start = EmpiricalSample(c.grid.points, c.F)
    target = EmpiricalSample(c.grid.points, c.m(1.0) * c.F)
    assert wasserstein1(y.evaluate(0.0), start) <= 0.02
    assert wasserstein1(y.evaluate(1.0), target) <= 0.02
    assert wasserstein1(start, target) > 0.1


def test_floor_exit(drift_ctx, rng):
    c = SpineContext(drift_ctx.params, drift_ctx.eigen, T_max=1.0, floor_rel=1e-2)
    lo = c._reversed_tables[2]
    with pytest.raises(FloorExit):
        sample_reversed(1.0, c, rng, 200, x0=lo + 1e-3)


def test_reversal_consistency(ctx, rng):
    T = 2.0
    fwd = sample_spine_forward("biased", T, ctx, rng, n_accept=10000).paths.reverse(T)
    rev = sample_reversed(T, ctx, rng, 10000).paths
    for s in (T / 4, T / 2, 3 * T / 4):
        assert wasserstein1(fwd.evaluate(s), rev.evaluate(s)) <= 0.05


def test_reversal_consistency_large_drift(drift_ctx, rng):
    T = 1.0
    fwd = sample_spine_forward("biased", T, drift_ctx, rng, n_accept=10000).paths.reverse(T)
    rev = sample_reversed(T, drift_ctx, rng, 10000).paths
    for s in (T / 4, T / 2, 3 * T / 4):
        assert wasserstein1(fwd.evaluate(s), rev.evaluate(s)) <= 0.05


def test_reversed_small_step_generator(drift_ctx, rng):
    c = drift_ctx
    g = c.grid
    delta, n = 1e-2, 100_000
    phi = lambda z: np.exp(-2 * (z - 0.3) ** 2)  # noqa: E731
    G = c.reversed_generator()
    Gphi = G @ phi(g.points)
    GGphi = G @ Gphi
    for x in (-1.0, -0.5, 0.0, 0.5, 1.0):
        i = int(round(g.locate(x)))
        y = sample_reversed(delta, c, rng, n, x0=g.points[i]).paths.evaluate(delta)
        d = (phi(y) - phi(g.points[i])) / delta
        se = d.std(ddof=1) / math.sqrt(n)
        # O(delta) time bias plus the upwind discretization of the drift
        assert abs(d.mean() - Gphi[i]) <= 3 * se + delta * abs(GGphi[i]) + c.params.rho * g.dx
