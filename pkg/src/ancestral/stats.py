"""Distances between empirical measures and the end-to-end lineage comparisons."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import Extinct, TooFewSurvivors
from .model import DensityField

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EmpiricalSample:
    """Weighted point sample.  Distances compare the normalized measures."""

    values: np.ndarray
    weights: np.ndarray | None = None
    allow_empty: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        w = np.ones(v.size) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape != v.shape:
            raise ValueError("values and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if not self.allow_empty and not w.sum() > 0:
            raise ValueError("sample must have positive total weight")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def mean(self, fn=None) -> float:
        x = self.values if fn is None else fn(self.values)
        return float(np.dot(self.probabilities, x))

    @classmethod
    def from_density(cls, f: DensityField) -> "EmpiricalSample":
        return cls(f.grid.points, f.values)


def _as_sample(a) -> EmpiricalSample:
    if isinstance(a, EmpiricalSample):
        return a
    if isinstance(a, DensityField):
        return EmpiricalSample.from_density(a)
    return EmpiricalSample(a)


def _cdfs(a: EmpiricalSample, b: EmpiricalSample):
    x = np.concatenate([a.values, b.values])
    pa = np.concatenate([a.probabilities, np.zeros(b.size)])
    pb = np.concatenate([np.zeros(a.size), b.probabilities])
    order = np.argsort(x, kind="stable")
    x = x[order]
    return x, np.cumsum(pa[order]), np.cumsum(pb[order])


def wasserstein1(a, b) -> float:
    """Exact ``W1`` between two weighted samples: ``int |F_a - F_b| dx``."""
    a, b = _as_sample(a), _as_sample(b)
    x, ca, cb = _cdfs(a, b)
    return float(np.sum(np.abs(ca[:-1] - cb[:-1]) * np.diff(x)))


def ks_distance(a, b) -> float:
    """Two-sample sup distance between the CDFs."""
    a, b = _as_sample(a), _as_sample(b)
    x, ca, cb = _cdfs(a, b)
    # evaluate after the last copy of every tied value
    last = np.r_[x[1:] != x[:-1], True]
    return float(np.max(np.abs(ca[last] - cb[last])))


def ks_critical(n, m=None, alpha=0.01) -> float:
    """Asymptotic two-sample KS critical value at level ``alpha``."""
    m = n if m is None else m
    c = math.sqrt(-0.5 * math.log(alpha / 2))
    return c * math.sqrt((n + m) / (n * m))


def self_distance(draw, size, rng, reps=1) -> float:
    """Mean ``W1`` between independent batches ``draw(size, rng)``."""
    return float(np.mean([wasserstein1(draw(size, rng), draw(size, rng)) for _ in range(reps)]))


# ------------------------------------------------------- spine marginals


def marginal_check_spine(ctx, T, t) -> float:
    """``L1`` distance between the propagated spine law and ``m_{T-t} F / lambda``."""
    if not 0 <= t <= T:
        raise ValueError("need 0 <= t <= T")
    g = ctx.grid
    F = ctx.F / ctx.lam
    start = ctx.m(T) * F
    # spine density at time t is P*_t(start / m_T) * m_{T-t}
    u = ctx.propagate_density(start / ctx.m(T), t) * ctx.m(T - t) if t > 0 else start
    return float(np.abs(u - ctx.m(T - t) * F).sum() * g.dx)


# ---------------------------------------------------- lineage comparison


@dataclass
class CheckpointResult:
    t: float
    w1: float
    ks: float
    calibration: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.w1 <= self.tolerance and self.w1 <= self.calibration


@dataclass
class LineageReport:
    T: float
    replicates: int
    extinct: int
    checkpoints: list = field(default_factory=list)

    @property
    def survivors(self) -> int:
        return self.replicates - self.extinct

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checkpoints)

    def to_dict(self):
        return {
            "T": self.T, "replicates": self.replicates, "extinct": self.extinct,
            "passed": self.passed,
            "checkpoints": [dict(vars(c), passed=c.passed) for c in self.checkpoints],
        }


LINEAGE_SALT = 0x5EED


def reversed_lineage_comparison(histories, ctx, T, checkpoints, n_spine, rng: np.random.Generator,
                                **kw) -> LineageReport:
    """Reversed uniformly sampled lineages against the reversed-spine sampler.

    One lineage per surviving history keeps the lineage sample i.i.d.  The
    pick inside a history is keyed by that history's seed, so the report does
    not depend on the order of ``histories``; ``rng`` drives only the
    reversed-spine draws.  ``histories`` may be a lazy iterable.
    """
    from .ibm import sample_uniform_lineage

    lineages, extinct = [], 0
    for h in histories:
        try:
            lineages.append(sample_uniform_lineage(h, T, np.random.default_rng([h.seed, LINEAGE_SALT])))
        except Extinct:
            extinct += 1
    return compare_lineages(lineages, extinct, ctx, T, checkpoints, n_spine, rng, **kw)


def compare_lineages(lineages, extinct, ctx, T, checkpoints, n_spine, rng: np.random.Generator,
                     tolerance=0.1, min_survivors=20, calibration_factor=3.0,
                     calibration_reps=20) -> LineageReport:
    """Marginals of reversed lineages against reversed-spine draws at each checkpoint.

    The calibrated tolerance is ``calibration_factor`` times the mean ``W1``
    between two independent reversed-spine batches of the lineage sample size.
    """
    from .paths import PathBatch
    from .spine import sample_reversed

    if len(lineages) < min_survivors:
        raise TooFewSurvivors(f"{len(lineages)} surviving replicates, need {min_survivors}")
    rev = PathBatch.from_paths(lineages).reverse(T)
    m = rev.n
    yr = sample_reversed(T, ctx, rng, n_spine).paths
    pool = sample_reversed(T, ctx, rng, 2 * m * calibration_reps).paths
    report = LineageReport(float(T), m + extinct, extinct)
    for s in checkpoints:
        a = rev.evaluate(s)
        ps = pool.evaluate(s)
        cal = np.mean([wasserstein1(ps[2 * k * m:(2 * k + 1) * m], ps[(2 * k + 1) * m:(2 * k + 2) * m])
                       for k in range(calibration_reps)])
        b = yr.evaluate(s)
        report.checkpoints.append(CheckpointResult(
            float(s), wasserstein1(a, b), ks_distance(a, b), calibration_factor * float(cal),
            float(tolerance)))
    log.info("lineage comparison: %d survivors, %d extinct", m, extinct)
    return report


# ----------------------------------------------------- IBM diagnostics


def ibm_pde_distance(history, f: DensityField, t=None) -> float:
    """``W1`` between the normalized population at ``t`` and the normalized PDE field."""
    from .ibm import snapshot

    snap = snapshot(history, history.T if t is None else t)
    if snap.size == 0:
        return math.nan
    return wasserstein1(snap, EmpiricalSample.from_density(f))


def coupling_gap(h1, h2, times, phi=lambda x: np.minimum(x, 5.0)) -> float:
    """``max_t |<Z_t, phi> - <Z~_t, phi>|`` over ``times`` for two coupled runs."""
    from .ibm import snapshot

    gap = 0.0
    for t in times:
        a, b = snapshot(h1, t), snapshot(h2, t)
        va = float(np.dot(a.weights, phi(a.values))) if a.size else 0.0
        vb = float(np.dot(b.weights, phi(b.values))) if b.size else 0.0
        gap = max(gap, abs(va - vb))
    return gap


def fluctuation_scaling(histories_by_K, t, phi=lambda x: np.minimum(x, 5.0)) -> dict:
    """``K * Var<Z^K_t, phi>`` over replicates, for each ``K``.

    Fluctuations of order ``1/sqrt(K)`` keep this roughly constant in ``K``.
    Returns ``{K: (scaled variance, replicates)}``.
    """
    from .ibm import snapshot

    out = {}
    for K, hs in histories_by_K.items():
        vals = []
        for h in hs:
            s = snapshot(h, t)
            vals.append(float(np.dot(s.weights, phi(s.values))) if s.size else 0.0)
        if len(vals) < 2:
            raise ValueError(f"need at least two replicates for K={K}")
        out[K] = (K * float(np.var(vals, ddof=1)), len(vals))
    return out
