"""Path samplers for the trait motion, the spine and the time-reversed spine.

All samplers work on batches: every round advances all unfinished paths by
one event, so a batch of ``n`` paths costs a number of numpy passes equal to
the largest jump count rather than ``n`` Python loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial import Polynomial

from .errors import AcceptanceTooLow, FloorExit, NonPositiveLambda
from .model import EigenPair, ModelParams
from .operators import Operators
from .paths import PathBatch, TraitPath, reverse_path

C_MARGIN = 0.1
ACCEPTANCE_FLOOR = 1e-4
FLOOR_EXIT_LIMIT = 0.01


# --------------------------------------------------------- path integrals


def segment_integral(p: Polynomial, x, slope, length):
    """Exact ``int_0^length p(x + slope * s) ds`` by Taylor expansion at ``x``."""
    x = np.asarray(x, dtype=float)
    length = np.asarray(length, dtype=float)
    out = np.zeros(np.broadcast(x, length).shape)
    q = p
    fac = 1.0
    sl = 1.0
    for k in range(p.degree() + 1):
        fac *= k + 1
        out = out + q(x) * sl * length ** (k + 1) / fac
        q = q.deriv()
        sl *= slope
    return out


def path_integrals(batch: PathBatch, p: Polynomial, t_end=None) -> np.ndarray:
    """``int_{t0}^{t_end} p(path(s)) ds`` for every path in the batch."""
    t_end = batch.t1 if t_end is None else float(t_end)
    n = batch.n
    keep = batch.jump_times < t_end
    pid = np.concatenate([np.arange(n), batch.jump_path[keep]])
    st = np.concatenate([np.full(n, batch.t0), batch.jump_times[keep]])
    sv = np.concatenate([batch.x0, batch.jump_values[keep]])
    order = np.lexsort((st, pid))
    pid, st, sv = pid[order], st[order], sv[order]
    last = np.r_[pid[1:] != pid[:-1], True]
    end = np.where(last, t_end, np.r_[st[1:], t_end])
    seg = segment_integral(p, sv, batch.slope, end - st)
    return np.bincount(pid, weights=seg, minlength=n)


# ------------------------------------------------------------ raw motion


def _jump_rounds(x0, T, slope, gamma, draw, rng):
    """Poisson(gamma) jump epochs with targets from ``draw(pre_values, rng)``."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    jp, jt, jv = [], [], []
    if gamma > 0 and T > 0:
        idx = np.arange(n)
        t = np.zeros(n)
        v = x0.copy()
        while idx.size:
            tn = t + rng.exponential(1.0 / gamma, idx.size)
            go = tn < T
            idx, t, v, tn = idx[go], t[go], v[go], tn[go]
            if not idx.size:
                break
            new = draw(v + slope * (tn - t), rng)
            jp.append(idx)
            jt.append(tn)
            jv.append(new)
            t, v = tn, new
    cat = (lambda a, dt: np.concatenate(a) if a else np.empty(0, dtype=dt))
    return PathBatch(0.0, T, x0, cat(jp, np.int64), cat(jt, float), cat(jv, float), slope)


def sample_X(x, T, params: ModelParams, rng: np.random.Generator, adjoint=False, n=None) -> PathBatch:
    """Paths of the trait motion (or, with ``adjoint=True``, its adjoint) from ``x``.

    The adjoint drifts at ``-rho`` and jumps from ``x`` to a draw from the
    density ``y -> m(y, x)``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if n is not None:
        x = np.broadcast_to(x, (n,)).copy() if x.size == 1 else x
    kernel = params.kernel
    draw = kernel.sample_adjoint if adjoint else kernel.sample
    slope = -params.rho if adjoint else params.rho
    return _jump_rounds(x, float(T), slope, params.gamma, draw, rng)


def estimate_mt(x, t, params: ModelParams, lam, n_paths, rng: np.random.Generator):
    """Monte Carlo ``E_x[exp(int_0^t (h - lam)(X_s) ds)]`` and its standard error."""
    if t <= 0:
        return 1.0, 0.0
    batch = sample_X(x, t, params, rng, n=n_paths)
    w = np.exp(path_integrals(batch, params.h - lam))
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0


# --------------------------------------------------------------- context


class SpineContext:
    """Eigenpair, grid operators and the table ``m_t(x)`` for ``t`` in ``[0, T_max]``."""

    def __init__(self, params: ModelParams, eigen: EigenPair, T_max=5.0, dt=1e-3, substeps=10,
                 floor_rel=1e-8, ops: Operators | None = None):
        if not eigen.lam > 0:
            raise NonPositiveLambda(f"lambda={eigen.lam} must be positive")
        self.params = params
        self.eigen = eigen
        self.grid = eigen.grid
        self.lam = float(eigen.lam)
        self.ops = ops or Operators(params, self.grid)
        self.T_max = float(T_max)
        k = max(1, math.ceil(self.T_max / dt - 1e-12))
        self.dt = self.T_max / k
        # Euler steps between stored rows; the first-order time error of the
        # table has to stay well below Monte Carlo standard errors
        self.substeps = int(substeps)
        self.step = self.dt / self.substeps
        self.F = eigen.F.values
        self.floor = floor_rel * self.F.max()
        self.C = max(params.c - self.lam, 0.0) + C_MARGIN

    @cached_property
    def m_table(self) -> np.ndarray:
        """Row ``k`` holds ``m_{k dt}`` on the grid."""
        M = self.ops.euler_matrix(self.lam, self.step, "Phat")
        k = round(self.T_max / self.dt)
        table = np.empty((k + 1, self.grid.n))
        u = np.ones(self.grid.n)
        table[0] = u
        for r in range(1, k + 1):
            for _ in range(self.substeps):
                u = M @ u
            table[r] = u
        return table

    def _steps(self, t) -> int:
        k = t / self.dt
        kr = round(k)
        if abs(k - kr) > 1e-6 or not 0 <= kr <= self.m_table.shape[0] - 1:
            raise ValueError(f"t={t} is not on the m-table lattice (dt={self.dt}, T_max={self.T_max})")
        return int(kr)

    def m(self, t) -> np.ndarray:
        return self.m_table[self._steps(t)]

    def m_at(self, t, x):
        return np.interp(x, self.grid.points, self.m(t))

    def propagate_density(self, u, t, dt=None):
        """Adjoint Feynman-Kac evolution of a density for time ``t``."""
        return self.ops.propagate(u, t, self.lam, "PhatStar", dt=dt or self.step)

    def spine_marginal(self, x_index, T, t) -> np.ndarray:
        """Grid density at time ``t`` of the spine on ``[0, T]`` started at grid point ``x_index``."""
        g = self.grid
        delta = np.zeros(g.n)
        delta[x_index] = 1.0 / g.dx
        q = self.propagate_density(delta, t) * self.m(T - t) / self.m(T)[x_index]
        return q

    def sample_F(self, n, rng):
        """Draws from ``F / lambda`` (grid cell by weight, uniform inside the cell)."""
        g = self.grid
        p = self.F / self.F.sum()
        j = rng.choice(g.n, size=n, p=p)
        return g.points[j] + rng.uniform(-0.5, 0.5, n) * g.dx

    # reversed-process tables
    @cached_property
    def _reversed_tables(self):
        Ff = np.maximum(self.F, self.floor)
        W = Ff[:, None] * self.ops.P          # W[j, i] = F_j P_ji
        col = W.sum(axis=0)
        kappa = self.params.gamma * col / Ff
        cdf = np.cumsum(W, axis=0).T / col[:, None]
        ok = np.flatnonzero(self.F >= self.floor)
        return kappa, cdf, self.grid.points[ok[0]], self.grid.points[ok[-1]]

    @property
    def kappa(self) -> np.ndarray:
        """Jump intensity of the reversed process on the grid."""
        return self._reversed_tables[0]

    def reversed_generator(self) -> np.ndarray:
        """``L^R = D_F^{-1} L* D_F + diag(h - lambda)`` on the grid."""
        Ff = np.maximum(self.F, self.floor)
        G = (self.ops.Lstar * Ff[None, :]) / Ff[:, None]
        G[np.diag_indices_from(G)] += self.ops.h - self.lam
        return G


# --------------------------------------------------------- forward spine


@dataclass
class SpineSample:
    paths: PathBatch
    trials: int
    accepted: int
    C: float

    @property
    def rate(self) -> float:
        return self.accepted / self.trials

    @property
    def rate_se(self) -> float:
        p = self.rate
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials)


def sample_spine_forward(init, T, ctx: SpineContext, rng: np.random.Generator, n_trials=None,
                         n_accept=None, batch=20000, floor=ACCEPTANCE_FLOOR) -> SpineSample:
    """Spine on ``[0, T]`` by killing the trait motion at rate ``C - (h - lambda)``.

    ``init`` is a trait (start at that point), an array of start points, or
    ``"biased"``: start from ``F / lambda``, in which case the accepted paths
    start from ``m_T F / lambda``.  Give ``n_trials`` for a fixed number of
    proposals or ``n_accept`` to continue until that many paths survive.
    """
    if (n_trials is None) == (n_accept is None):
        raise ValueError("give exactly one of n_trials and n_accept")
    params = ctx.params
    hC = params.h - (ctx.lam + ctx.C)

    def starts(m):
        if isinstance(init, str):
            if init != "biased":
                raise ValueError(f"unknown init {init!r}")
            return ctx.sample_F(m, rng)
        x = np.asarray(init, dtype=float).reshape(-1)
        if x.size == 1:
            return np.full(m, x[0])
        return x[rng.integers(x.size, size=m)] if m != x.size else x.copy()

    kept, trials, accepted = [], 0, 0
    while True:
        m = min(batch, n_trials - trials) if n_trials is not None else batch
        paths = sample_X(starts(m), T, params, rng)
        ok = np.log(rng.random(m)) < path_integrals(paths, hC)
        trials += m
        accepted += int(ok.sum())
        kept.append(paths.select(ok))
        if trials >= 5000 and accepted / trials < floor:
            raise AcceptanceTooLow(f"acceptance {accepted}/{trials} below {floor:g}; reduce T")
        if n_trials is not None and trials >= n_trials:
            break
        if n_accept is not None and accepted >= n_accept:
            break
    merged = _concat(kept)
    if n_accept is not None and merged.n > n_accept:
        merged = merged.select(np.arange(merged.n) < n_accept)
    if accepted == 0:
        raise AcceptanceTooLow(f"no path survived out of {trials}")
    return SpineSample(merged, trials, accepted, ctx.C)


def _concat(batches) -> PathBatch:
    b0 = batches[0]
    off = np.cumsum([0] + [b.n for b in batches[:-1]])
    return PathBatch(
        b0.t0, b0.t1,
        np.concatenate([b.x0 for b in batches]),
        np.concatenate([b.jump_path + o for b, o in zip(batches, off)]),
        np.concatenate([b.jump_times for b in batches]),
        np.concatenate([b.jump_values for b in batches]),
        b0.slope,
    )


# -------------------------------------------------------- reversed spine


@dataclass
class ReversedSample:
    paths: PathBatch
    floor_exits: int
    attempts: int
    phantoms: int

    @property
    def exit_rate(self) -> float:
        return self.floor_exits / self.attempts


def sample_reversed(T, ctx: SpineContext, rng: np.random.Generator, n, x0=None, window=0.1,
                    exit_limit=FLOOR_EXIT_LIMIT) -> ReversedSample:
    """Time-reversed spine started from ``F / lambda`` (or from ``x0``).

    Drift ``-rho``; jumps at rate ``kappa(x) = gamma * sum_j F_j P_ji / F_i``
    to targets drawn with weights ``F_j P_ji``, by thinning against the
    largest ``kappa`` over a lookahead window.  Paths that leave the region
    ``F >= floor`` are discarded and counted.
    """
    kappa, cdf, lo_ok, hi_ok = ctx._reversed_tables
    g = ctx.grid
    pts = g.points
    slope = -ctx.params.rho
    w = math.inf if slope == 0 else min(window, g.dx / abs(slope))

    def kap(x):
        return np.interp(x, pts, kappa)

    def bound(x):
        if slope == 0:
            return kap(x)
        y = x + slope * w
        lo, hi = np.minimum(x, y), np.maximum(x, y)
        ilo = np.floor(g.locate(lo)).astype(np.int64)
        ihi = np.clip(np.floor(g.locate(hi)).astype(np.int64), 0, g.n - 1)
        node = np.where(ihi > ilo, kappa[ihi], 0.0)
        return np.maximum(np.maximum(kap(lo), kap(hi)), node) * (1 + 1e-12)

    def target(x):
        fx = np.clip(g.locate(x), 0, g.n - 1)
        i = np.clip(np.floor(fx).astype(np.int64), 0, g.n - 2)
        col = np.where(rng.random(x.size) < fx - i, i + 1, i)
        u = rng.random(x.size)
        j = np.minimum((cdf[col] < u[:, None]).sum(axis=1), g.n - 1)
        return pts[j] + rng.uniform(-0.5, 0.5, x.size) * g.dx

    got, exits, attempts, phantoms = [], 0, 0, 0
    need = n
    while need > 0:
        m = need + max(16, need // 50)
        start = ctx.sample_F(m, rng) if x0 is None else np.full(m, float(x0))
        attempts += m
        idx = np.arange(m)
        t = np.zeros(m)
        v = start.copy()
        B = bound(v)
        wend = np.full(m, w)
        jp, jt, jv = [], [], []
        bad = np.zeros(m, dtype=bool)
        while idx.size:
            out = (v < lo_ok) | (v > hi_ok)
            if out.any():
                bad[idx[out]] = True
                keep = ~out
                idx, t, v, B, wend = idx[keep], t[keep], v[keep], B[keep], wend[keep]
                if not idx.size:
                    break
            with np.errstate(divide="ignore"):
                tc = t + rng.exponential(1.0, idx.size) / B
            stop = np.minimum(wend, T)
            move = tc >= stop
            # window expiry or horizon: advance without an event
            v = np.where(move, v + slope * (stop - t), v)
            t = np.where(move, stop, t)
            fin = move & (stop >= T)
            renew = move & ~fin
            cand = ~move
            vc = v[cand] + slope * (tc[cand] - t[cand])
            acc = rng.random(vc.size) * B[cand] < kap(vc)
            ci = np.flatnonzero(cand)
            phantoms += int((~acc).sum())
            t[ci] = tc[cand]
            v[ci] = vc
            ja = ci[acc]
            if ja.size:
                new = target(v[ja])
                jp.append(idx[ja])
                jt.append(t[ja])
                jv.append(new)
                v[ja] = new
            reb = renew.copy()
            reb[ja] = True
            if reb.any():
                B[reb] = bound(v[reb])
                wend[reb] = t[reb] + w
            keep = ~fin
            idx, t, v, B, wend = idx[keep], t[keep], v[keep], B[keep], wend[keep]
        cat = (lambda a, dt: np.concatenate(a) if a else np.empty(0, dtype=dt))
        batch = PathBatch(0.0, T, start, cat(jp, np.int64), cat(jt, float), cat(jv, float), slope)
        exits += int(bad.sum())
        good = batch.select(~bad)
        if good.n > need:
            good = good.select(np.arange(good.n) < need)
        got.append(good)
        need -= good.n
        if attempts >= 1000 and exits / attempts > exit_limit:
            raise FloorExit(f"{exits} of {attempts} reversed paths left the region F >= floor")
    return ReversedSample(_concat(got), exits, attempts, phantoms)


__all__ = [
    "PathBatch", "ReversedSample", "SpineContext", "SpineSample", "TraitPath", "estimate_mt",
    "path_integrals", "reverse_path", "sample_X", "sample_reversed", "sample_spine_forward",
    "segment_integral",
]
