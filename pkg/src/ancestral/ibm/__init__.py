"""Event-driven simulation of the interacting population with full genealogy.

Each individual carries its own candidate clock, thinned against a bound on
its event rates along its drift path over a short lookahead window.  Every
random number an individual consumes comes from a counter-based stream keyed
by its genealogical label, so a run in nonlinear mode and a run in frozen
mode from the same seed make their decisions with identical uniforms until
the competition terms make them disagree.

The event loop exists twice: a compiled core and a pure-Python fallback
that produce bit-identical histories.  The compiled core is used when it was
built, unless ``ANCESTRAL_FORCE_PYTHON=1`` is set.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..errors import EmptyInitial, Explosion, Extinct, NotAlive, UnknownId
from ..model import (
    DensityField,
    GaussianConvolution,
    ModelParams,
    Tabulated,
    UniformWindow,
    real_critical_points,
)
from ..paths import TraitPath
from ..stats import EmpiricalSample
from . import _fallback
from .rng import master_key, mix64, root_key, uniforms

try:
    if os.environ.get("ANCESTRAL_FORCE_PYTHON") == "1":
        raise ImportError("forced")
    from . import _core
except ImportError:
    _core = None

BACKEND = "compiled" if _core is not None else "python"
BIRTH, DEATH, MUTATION = _fallback.BIRTH, _fallback.DEATH, _fallback.MUTATION
KIND_NAMES = {BIRTH: "birth", DEATH: "death", MUTATION: "mutation"}
INIT_SALT = 0x632BE59BD9B4E019
DEFAULT_WINDOW = 0.1


def _backend(name):
    if name in (None, "auto"):
        return _core or _fallback
    if name == "python":
        return _fallback
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled core is not available in this build")
        return _core
    raise ValueError(f"unknown backend {name!r}")


@dataclass(frozen=True, eq=False)
class PopulationState:
    """Initial population: root traits and the seed that keys every stream."""

    traits: np.ndarray
    seed: int
    K: int

    @property
    def N(self) -> int:
        return self.traits.size

    @property
    def mass(self) -> float:
        return self.N / self.K


def init_population(params: ModelParams, init: DensityField, seed: int, K=None) -> PopulationState:
    """``round(K * mass)`` i.i.d. roots drawn from ``init`` by inverse CDF.

    A trait is a grid cell chosen with probability proportional to its value,
    then placed uniformly inside that cell.
    """
    K = int(K or params.K)
    n0 = int(round(K * init.mass))
    if n0 <= 0:
        raise EmptyInitial(f"K * mass = {K * init.mass:.4g} rounds to zero individuals")
    g = init.grid
    cdf = np.cumsum(init.values)
    cdf /= cdf[-1]
    u = uniforms(mix64(seed ^ INIT_SALT), 0, 2 * n0)
    j = np.minimum(np.searchsorted(cdf, u[:n0], side="right"), g.n - 1)
    traits = g.points[j] + (u[n0:] - 0.5) * g.dx
    return PopulationState(traits, int(seed), K)


@dataclass(frozen=True)
class CouplingHandle:
    """Shared randomness for paired runs: one seed and one competition bound."""

    seed: int
    comp_bound: float


def coupling_handle(state: PopulationState, lam, margin=1.25) -> CouplingHandle:
    return CouplingHandle(state.seed, margin * max(lam, state.mass))


def _kernel_args(kernel):
    if isinstance(kernel, GaussianConvolution):
        return 0, float(kernel.sigma), 0.0, 1.0, np.zeros((1, 1))
    if isinstance(kernel, UniformWindow):
        return 1, float(kernel.eps), 0.0, 1.0, np.zeros((1, 1))
    if isinstance(kernel, Tabulated):
        cdf = np.cumsum(kernel.values, axis=1)
        cdf /= cdf[:, -1:]
        return 2, 0.0, kernel.grid.x_min, kernel.grid.dx, cdf
    raise TypeError(f"unsupported kernel {type(kernel).__name__}")


def simulate(params: ModelParams, init, T, seed=None, mode="nonlinear", lam=None,
             shared_randomness: CouplingHandle | None = None, window=DEFAULT_WINDOW,
             cap=None, backend=None) -> "PopulationHistory":
    """Exact simulation on ``[0, T]``.

    ``init`` is a :class:`PopulationState` or a :class:`DensityField` (drawn
    with ``seed``).  In ``"frozen"`` mode the competition death rate is the
    constant ``lam`` instead of ``N/K``.
    """
    if mode not in ("nonlinear", "frozen"):
        raise ValueError(f"mode must be 'nonlinear' or 'frozen', got {mode!r}")
    if not T > 0:
        raise ValueError("T must be positive")
    if isinstance(init, DensityField):
        if seed is None:
            raise ValueError("a seed is required to draw the initial population")
        init = init_population(params, init, seed)
    if shared_randomness is not None:
        if shared_randomness.seed != init.seed:
            raise ValueError("coupling handle and initial population use different seeds")
        cb = shared_randomness.comp_bound
    elif mode == "frozen":
        cb = None
    else:
        cb = 1.25 * init.mass
    if mode == "frozen":
        if lam is None:
            raise ValueError("frozen mode needs the competition constant lam")
        cb = lam if cb is None else cb
        if cb < lam:
            raise ValueError(f"competition bound {cb} is below lam={lam}")
    if cap is None:
        cap = 10 * init.K * (lam if lam is not None else max(params.c, init.mass))
    kind, kparam, tx0, tdx, cdf = _kernel_args(params.kernel)
    rk = np.array([root_key(init.seed, i) for i in range(init.N)], dtype=np.uint64)
    res = _backend(backend).run(
        init.traits, rk, master_key(init.seed), float(T), float(params.rho), float(params.gamma),
        params.b.coef, real_critical_points(params.b), params.d.coef, real_critical_points(params.d),
        kind, kparam, tx0, tdx, cdf, mode == "frozen", float(lam or 0.0), int(init.K),
        float(cb), float(window), float(cap),
    )
    if res["status"] == _fallback.EXPLOSION:
        raise Explosion(f"population exceeded the cap {cap:.6g} before T={T}")
    return PopulationHistory(params, mode, lam, init.seed, float(T), init.K, res, float(cb))


@dataclass(frozen=True)
class IndividualRecord:
    id: tuple
    parent: tuple | None
    birth_time: float
    death_time: float | None
    birth_trait: float
    jump_log: list


class PopulationHistory:
    """Append-only genealogical ledger of one run.

    Individuals are indexed ``0..n-1`` in order of appearance; labels are the
    Ulam-Harris tuples returned by :meth:`label`.
    """

    def __init__(self, params, mode, lam, seed, T, K, raw, comp_bound):
        self.params = params
        self.mode = mode
        self.lam = lam
        self.seed = seed
        self.T = T
        self.K = K
        self.comp_bound = comp_bound
        self.parent = raw["parent"]
        self.rank = raw["rank"]
        self.birth_time = raw["birth_time"]
        self.death_time = raw["death_time"]
        self.birth_trait = raw["birth_trait"]
        self.ev_time = raw["ev_time"]
        self.ev_kind = raw["ev_kind"]
        self.ev_id = raw["ev_id"]
        self.ev_trait = raw["ev_trait"]
        self.extinct = raw["status"] == _fallback.EXTINCT
        self.stats = dict(raw["stats"])
        mut = np.flatnonzero(self.ev_kind == MUTATION)
        order = mut[np.lexsort((self.ev_time[mut], self.ev_id[mut]))]
        self._mut_id = self.ev_id[order]
        self._mut_time = self.ev_time[order]
        self._mut_value = self.ev_trait[order]
        self._mut_off = np.searchsorted(self._mut_id, np.arange(self.n + 1))

    @property
    def n(self) -> int:
        """Number of individuals that ever lived."""
        return self.parent.size

    @property
    def N0(self) -> int:
        return int(np.sum(self.parent < 0))

    def label(self, i) -> tuple:
        out = []
        while i >= 0:
            out.append(int(self.rank[i]))
            i = int(self.parent[i])
        return tuple(reversed(out))

    @cached_property
    def _label_index(self):
        return {self.label(i): i for i in range(self.n)}

    def index_of(self, ident) -> int:
        if isinstance(ident, (int, np.integer)):
            if not 0 <= ident < self.n:
                raise UnknownId(ident)
            return int(ident)
        try:
            return self._label_index[tuple(ident)]
        except (KeyError, TypeError):
            raise UnknownId(ident) from None

    def alive_at(self, t) -> np.ndarray:
        """Indices alive at ``t`` (born at or before ``t``, dying after it)."""
        return np.flatnonzero((self.birth_time <= t) & (self.death_time > t))

    def N_at(self, t) -> int:
        return int(np.count_nonzero((self.birth_time <= t) & (self.death_time > t)))

    def trait_at(self, idx, t) -> np.ndarray:
        """Traits of individuals ``idx`` at time ``t``."""
        idx = np.asarray(idx, dtype=np.int64)
        # own jumps are time-sorted, so those at or before t form a prefix
        k = np.bincount(self._mut_id[self._mut_time <= t], minlength=self.n)[idx]
        has = k > 0
        j = np.where(has, self._mut_off[idx] + k - 1, 0)
        if self._mut_time.size:
            v = np.where(has, self._mut_value[j], self.birth_trait[idx])
            s = np.where(has, self._mut_time[j], self.birth_time[idx])
        else:
            v, s = self.birth_trait[idx], self.birth_time[idx]
        return v + self.params.rho * (t - s)

    def jumps(self, i):
        a, b = self._mut_off[i], self._mut_off[i + 1]
        return self._mut_time[a:b], self._mut_value[a:b]

    def record(self, ident) -> IndividualRecord:
        i = self.index_of(ident)
        p = int(self.parent[i])
        jt, jv = self.jumps(i)
        dt = float(self.death_time[i])
        return IndividualRecord(self.label(i), self.label(p) if p >= 0 else None,
                                float(self.birth_time[i]), dt if math.isfinite(dt) else None,
                                float(self.birth_trait[i]), list(zip(jt.tolist(), jv.tolist())))

    def individuals(self):
        return (self.record(i) for i in range(self.n))

    def population_curve(self):
        """``(times, N)`` after each event, starting with ``(0, N0)``."""
        step = np.where(self.ev_kind == BIRTH, 1, np.where(self.ev_kind == DEATH, -1, 0))
        return (np.concatenate([[0.0], self.ev_time]),
                self.N0 + np.concatenate([[0], np.cumsum(step)]))

    @property
    def N_final(self) -> int:
        return self.N_at(self.T)

    def event_rows(self):
        """``(time, kind, id, parent, trait)`` with dotted labels, in event order."""
        for t, k, i, x in zip(self.ev_time, self.ev_kind, self.ev_id, self.ev_trait):
            p = int(self.parent[i])
            yield (float(t), KIND_NAMES[int(k)], ".".join(map(str, self.label(int(i)))),
                   ".".join(map(str, self.label(p))) if p >= 0 else "", float(x))


def snapshot(history: PopulationHistory, t) -> EmpiricalSample:
    """Traits alive at ``t`` with weight ``1/K`` each."""
    if not 0 <= t <= history.T:
        raise ValueError(f"t={t} outside [0, {history.T}]")
    idx = history.alive_at(t)
    return EmpiricalSample(history.trait_at(idx, t), np.full(idx.size, 1.0 / history.K),
                           allow_empty=True)


def extract_lineage(history: PopulationHistory, ident, t) -> TraitPath:
    """Trait path of the ancestors of ``ident`` on ``[0, t]``."""
    i = history.index_of(ident)
    if not (history.birth_time[i] <= t < history.death_time[i]):
        raise NotAlive(f"individual {history.label(i)} is not alive at t={t}")
    chain = []
    while i >= 0:
        chain.append(i)
        i = int(history.parent[i])
    chain.reverse()
    times, values = [], []
    for k, a in enumerate(chain):
        end = history.birth_time[chain[k + 1]] if k + 1 < len(chain) else t
        jt, jv = history.jumps(a)
        sel = jt < end if k + 1 < len(chain) else jt <= end
        times.append(jt[sel])
        values.append(jv[sel])
    root = chain[0]
    return TraitPath(float(history.birth_time[root]), float(t), float(history.birth_trait[root]),
                     np.concatenate(times), np.concatenate(values), history.params.rho)


def sample_uniform_lineage(history: PopulationHistory, T, rng: np.random.Generator) -> TraitPath:
    alive = history.alive_at(T)
    if alive.size == 0:
        raise Extinct(f"no individual alive at T={T}")
    return extract_lineage(history, int(alive[rng.integers(alive.size)]), T)


def simulate_coupled(params: ModelParams, init: PopulationState, T, lam, **kw):
    """Nonlinear and frozen runs driven by the same randomness."""
    handle = coupling_handle(init, lam)
    hn = simulate(params, init, T, mode="nonlinear", lam=lam, shared_randomness=handle, **kw)
    hf = simulate(params, init, T, mode="frozen", lam=lam, shared_randomness=handle, **kw)
    return hn, hf


__all__ = [
    "BACKEND", "CouplingHandle", "IndividualRecord", "PopulationHistory", "PopulationState",
    "coupling_handle", "extract_lineage", "init_population", "sample_uniform_lineage",
    "simulate", "simulate_coupled", "snapshot",
]
