import math

import numpy as np
import pytest
from scipy import stats as sst

from ancestral import ibm
from ancestral.errors import EmptyInitial, Explosion, Extinct, NotAlive, UnknownId
from ancestral.ibm import (
    BIRTH,
    DEATH,
    MUTATION,
    PopulationState,
    extract_lineage,
    init_population,
    sample_uniform_lineage,
    simulate,
    simulate_coupled,
    snapshot,
)
from ancestral.model import DensityField, GaussianConvolution, Grid, ModelParams, Tabulated, UniformWindow
from ancestral.stats import wasserstein1

from conftest import constant_h

compiled = pytest.mark.skipif(ibm._core is None, reason="compiled core not built")


@pytest.fixture(scope="module")
def history(params, eigen):
    return simulate(params, init_population(params, eigen.F, 7, K=200), 5.0)


def _replay(h, t):
    """Traits alive at ``t`` from a sequential walk over the event list."""
    trait = {}
    since = {}
    for i in range(h.N0):
        trait[i], since[i] = h.birth_trait[i], 0.0
    for time, kind, i, x in zip(h.ev_time, h.ev_kind, h.ev_id, h.ev_trait):
        if time > t:
            break
        i = int(i)
        if kind == BIRTH:
            trait[i], since[i] = x, time
        elif kind == DEATH:
            del trait[i]
        else:
            trait[i], since[i] = x, time
    rho = h.params.rho
    return {i: v + rho * (t - since[i]) for i, v in trait.items()}


def test_init_count():
    g = Grid(-4.0, 4.0, 400)
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=0.4, rho=0.0, kernel=UniformWindow(0.3), K=100)
    f = DensityField(g, np.exp(-g.points ** 2))
    f = DensityField(g, 2 * f.values / f.mass)
    s = init_population(p, f, 3)
    assert s.N == 200 and s.mass == pytest.approx(2.0)


def test_init_narrow_bump_stays_in_cells():
    g = Grid(-4.0, 4.0, 401)
    v = np.zeros(g.n)
    v[200] = 1.0 / g.dx
    s = init_population(constant_h(1.0), DensityField(g, v), 5, K=500)
    assert np.all(np.abs(s.traits - g.points[200]) <= g.dx / 2)


def test_init_matches_density(params, eigen, rng):
    s = init_population(params, eigen.F, 11, K=2000)
    ref = [wasserstein1(eigen.F.grid.points[rng.choice(eigen.F.grid.n, s.N, p=eigen.F.values / eigen.F.values.sum())],
                        eigen.F) for _ in range(20)]
    assert wasserstein1(s.traits, eigen.F) <= 3 * np.mean(ref) + eigen.F.grid.dx


def test_empty_initial(params, grid):
    with pytest.raises(EmptyInitial):
        init_population(params, DensityField(grid, np.full(grid.n, 1e-9)), 1, K=10)


def test_pure_drift():
    p = ModelParams(b=[0.0], d=[0.0], gamma=0.0, rho=0.25, kernel=UniformWindow(0.3), K=10, strict=False)
    s = PopulationState(np.array([-1.0, 0.0, 2.0]), 4, 10)
    h = simulate(p, s, 4.0, mode="frozen", lam=0.0, cap=100)
    assert h.ev_time.size == 0
    np.testing.assert_allclose(np.sort(snapshot(h, 4.0).values), [0.0, 1.0, 3.0])


def test_frozen_branching_mean():
    r, lam, T, n0 = 1.0, 0.7, 2.0, 50
    p = constant_h(r, gamma=0.4, K=n0)
    final = []
    for seed in range(200):
        s = PopulationState(np.zeros(n0), seed, n0)
        final.append(simulate(p, s, T, mode="frozen", lam=lam).N_final)
    final = np.asarray(final, dtype=float)
    expected = n0 * math.exp((r - lam) * T)
    se = final.std(ddof=1) / math.sqrt(final.size)
    assert abs(final.mean() - expected) <= 3 * se


def test_first_event_time_exponential(params):
    # single individual at x=1 with frozen competition: total rate b + d + lam + gamma
    lam = 0.5
    x = 1.0
    b, d = 1.0, 0.5 * x * x
    rate = b + d + lam + params.gamma
    times, kinds = [], []
    p = ModelParams(b=params.b.coef, d=params.d.coef, gamma=params.gamma, rho=0.0,
                    kernel=params.kernel, K=1)
    for seed in range(1500):
        h = simulate(p, PopulationState(np.array([x]), seed, 1), 5.0, mode="frozen", lam=lam, cap=100)
        if h.ev_time.size:
            times.append(h.ev_time[0])
            kinds.append(h.ev_kind[0])
    times = np.asarray(times)
    assert sst.kstest(times, "expon", args=(0, 1 / rate)).pvalue > 1e-3
    kinds = np.asarray(kinds)
    obs = [np.sum(kinds == k) for k in (BIRTH, DEATH, MUTATION)]
    exp = np.array([b, d + lam, params.gamma]) / rate * len(kinds)
    assert sst.chisquare(obs, exp).pvalue > 1e-3


def test_snapshot_weights(history):
    s = snapshot(history, history.T)
    assert s.size == history.N_final
    assert s.mass == pytest.approx(history.N_final / history.K)
    with pytest.raises(ValueError):
        snapshot(history, history.T + 1)


@pytest.mark.parametrize("t", [0.0, 1.3, 5.0])
def test_traits_match_replay(history, t):
    ref = _replay(history, t)
    idx = history.alive_at(t)
    assert sorted(idx.tolist()) == sorted(ref)
    np.testing.assert_allclose(history.trait_at(idx, t), [ref[i] for i in idx], atol=1e-12)


def test_population_curve_consistent(history):
    times, N = history.population_curve()
    assert N[-1] == history.N_final
    for t in (0.5, 2.0, 4.5):
        k = np.searchsorted(times, t, side="right") - 1
        assert N[k] == history.N_at(t)


def test_labels_and_records(history):
    i = int(history.alive_at(history.T)[-1])
    lab = history.label(i)
    assert history.index_of(lab) == i
    rec = history.record(lab)
    assert rec.id == lab
    if rec.parent is not None:
        assert rec.parent == lab[:-1]
    assert rec.death_time is None or rec.death_time > rec.birth_time
    with pytest.raises(UnknownId):
        history.index_of((10 ** 6,))
    with pytest.raises(UnknownId):
        history.index_of(history.n)


def test_lineage_endpoint_and_ancestry(history):
    T = history.T
    for i in history.alive_at(T)[:20]:
        path = extract_lineage(history, int(i), T)
        assert path.end_value == pytest.approx(float(history.trait_at([i], T)[0]), abs=1e-12)
        # the path passes through every ancestor's trait at the child's birth time
        j = int(i)
        while history.parent[j] >= 0:
            par = int(history.parent[j])
            tb = history.birth_time[j]
            assert path(tb) == pytest.approx(float(history.trait_at([par], tb)[0]), abs=1e-12)
            j = par
        assert path.x0 == history.birth_trait[j]


def test_lineage_not_alive(history):
    dead = np.flatnonzero(history.death_time < history.T)
    with pytest.raises(NotAlive):
        extract_lineage(history, int(dead[0]), history.T)


def test_uniform_lineage_is_uniform(history, rng):
    alive = history.alive_at(history.T)
    ends = history.trait_at(alive, history.T)
    # clonal births share traits, so test uniformity over groups of equal end value
    ends = np.sort(ends)
    starts = np.r_[True, np.diff(ends) > 1e-9]
    values = ends[starts]
    sizes = np.diff(np.r_[np.flatnonzero(starts), ends.size])
    counts = np.zeros(values.size)
    draws = 40 * alive.size
    for _ in range(draws):
        v = sample_uniform_lineage(history, history.T, rng).end_value
        k = int(np.argmin(np.abs(values - v)))
        assert abs(values[k] - v) <= 1e-9
        counts[k] += 1
    assert sst.chisquare(counts, draws * sizes / alive.size).pvalue > 1e-3


def test_single_survivor(params):
    h = simulate(constant_h(0.0, K=1), PopulationState(np.array([0.3]), 2, 1), 0.01, mode="frozen", lam=0.0,
                 cap=10)
    path = sample_uniform_lineage(h, 0.01, np.random.default_rng(0))
    assert path.x0 == 0.3


def test_extinct(params):
    p = constant_h(0.0, K=5)
    h = simulate(p, PopulationState(np.zeros(5), 1, 5), 50.0, mode="frozen", lam=2.0)
    assert h.extinct and h.N_final == 0
    with pytest.raises(Extinct):
        sample_uniform_lineage(h, 50.0, np.random.default_rng(0))


def test_explosion():
    p = constant_h(3.0, K=10)
    with pytest.raises(Explosion):
        simulate(p, PopulationState(np.zeros(10), 1, 10), 10.0, mode="frozen", lam=0.0, cap=200)


def test_frozen_needs_lambda(params):
    s = PopulationState(np.zeros(3), 1, 10)
    with pytest.raises(ValueError):
        simulate(params, s, 1.0, mode="frozen")
    with pytest.raises(ValueError):
        simulate(params, s, 1.0, mode="sideways")


def test_deterministic(params, eigen):
    s = init_population(params, eigen.F, 9, K=100)
    a, b = simulate(params, s, 3.0), simulate(params, s, 3.0)
    np.testing.assert_array_equal(a.ev_time, b.ev_time)
    np.testing.assert_array_equal(a.ev_trait, b.ev_trait)


def test_seed_changes_history(params, eigen):
    a = simulate(params, init_population(params, eigen.F, 1, K=100), 2.0)
    b = simulate(params, init_population(params, eigen.F, 2, K=100), 2.0)
    assert a.ev_time.size != b.ev_time.size or not np.array_equal(a.ev_time, b.ev_time)


def test_coupled_runs_start_together(params, eigen):
    s = init_population(params, eigen.F, 4, K=300)
    hn, hf = simulate_coupled(params, s, 3.0, eigen.lam)
    assert hn.comp_bound == hf.comp_bound
    # identical uniforms: the first event coincides
    assert hn.ev_time[0] == hf.ev_time[0] and hn.ev_kind[0] == hf.ev_kind[0]


def _kernels():
    g = Grid(-4.0, 4.0, 81)
    return [GaussianConvolution(0.3), UniformWindow(0.3), Tabulated.from_kernel(GaussianConvolution(0.3), g)]


@compiled
@pytest.mark.parametrize("kernel", _kernels(), ids=["gaussian", "uniform", "tabulated"])
@pytest.mark.parametrize("mode", ["nonlinear", "frozen"])
def test_backends_bit_identical(kernel, mode, eigen):
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=0.4, rho=0.001, kernel=kernel, K=150)
    s = init_population(p, eigen.F, 21, K=150)
    a = simulate(p, s, 4.0, mode=mode, lam=eigen.lam, backend="compiled")
    b = simulate(p, s, 4.0, mode=mode, lam=eigen.lam, backend="python")
    for key in ("ev_time", "ev_kind", "ev_id", "ev_trait", "parent", "birth_time", "death_time"):
        np.testing.assert_array_equal(getattr(a, key), getattr(b, key))


@compiled
def test_backends_bit_identical_large_drift(eigen):
    p = ModelParams(b=[1.0], d=[0, 0, 0.5], gamma=1.0, rho=0.3, kernel=UniformWindow(1.0), K=100)
    s = init_population(p, eigen.F, 5, K=100)
    a = simulate(p, s, 3.0, backend="compiled")
    b = simulate(p, s, 3.0, backend="python")
    np.testing.assert_array_equal(a.ev_trait, b.ev_trait)
    np.testing.assert_array_equal(a.death_time, b.death_time)


def test_unknown_backend(params):
    with pytest.raises(ValueError):
        simulate(params, PopulationState(np.zeros(2), 1, 10), 1.0, backend="gpu")
