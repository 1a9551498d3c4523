"""Model constants, mutation kernels, rate polynomials and trait grids.

Rates are polynomials in the trait.  Birth is usually constant and death a
polynomial with a positive even leading term, which makes the growth rate
``h = b - d`` bounded above and confining.  Kernels are densities
``m(x, y)`` of the post-jump trait ``y`` given the pre-jump trait ``x``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import ndtr

from .errors import (
    AssumptionViolation,
    ConfigInvalid,
    DoubleStochasticityViolation,
    MassLeak,
)

KERNEL_TOL = 1e-3


# ---------------------------------------------------------------- grid


@dataclass(frozen=True)
class Grid:
    """Uniform grid of ``n`` cell centres on ``[x_min, x_max]``.

    Every point carries the weight ``dx`` (midpoint rule), so the quadrature
    of ``f`` is ``f.sum() * dx``.
    """

    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ConfigInvalid("grid.n", f"need at least 3 points, got {self.n}")
        if not self.x_min < 0 < self.x_max:
            raise ConfigInvalid("grid", "the origin must lie strictly inside the grid")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    @property
    def edges(self) -> np.ndarray:
        """Cell boundaries, ``n + 1`` values."""
        h = 0.5 * self.dx
        return np.linspace(self.x_min - h, self.x_max + h, self.n + 1)

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.dx)

    def inner_half(self) -> np.ndarray:
        """Indices of the points in the central half of the grid."""
        x = self.points
        centre = 0.5 * (self.x_min + self.x_max)
        half_width = 0.25 * (self.x_max - self.x_min)
        return np.flatnonzero(np.abs(x - centre) <= half_width + 1e-12)

    def locate(self, x):
        """Fractional index of ``x`` (0 at ``x_min``, ``n - 1`` at ``x_max``)."""
        return (np.asarray(x, dtype=float) - self.x_min) / self.dx

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "n": self.n}


@dataclass(frozen=True, eq=False)
class DensityField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} values, got shape {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def normalized(self) -> np.ndarray:
        """Probability weights per grid cell (sum to 1)."""
        return self.values / self.values.sum()

    def interpolate(self, x):
        return np.interp(x, self.grid.points, self.values, left=0.0, right=0.0)


@dataclass(frozen=True, eq=False)
class EigenPair:
    """Stationary density ``F`` with ``mass(F) == lam``."""

    F: DensityField
    lam: float
    residual: float = float("nan")
    iterations: int = 0

    @property
    def grid(self) -> Grid:
        return self.F.grid


# ------------------------------------------------------------- kernels


@dataclass(frozen=True)
class Certificate:
    """Minorization pair: ``m(x, y) >= kappa0`` whenever ``|y - x| < eps``."""

    kappa0: float
    eps: float


class MutationKernel:
    """Jump density ``m(x, y)``; subclasses implement the variants."""

    certificate: Certificate | None = None
    symmetric = False

    def density(self, x, y):
        raise NotImplementedError

    def cell_matrix(self, grid: Grid) -> np.ndarray:
        """``P[i, j]``: probability that a jump from ``x_i`` lands in cell ``j``."""
        x = grid.points
        return self.density(x[:, None], x[None, :]) * grid.dx

    def outside_mass(self, grid: Grid) -> np.ndarray:
        """Mass each row sends outside the grid's cells."""
        return np.clip(1.0 - self.cell_matrix(grid).sum(axis=1), 0.0, None)

    def sample(self, x, rng):
        raise NotImplementedError

    def sample_adjoint(self, x, rng):
        """Draw ``y`` with density ``y -> m(y, x)``."""
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianConvolution(MutationKernel):
    sigma: float
    certificate: Certificate | None = None
    symmetric = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigInvalid("kernel.sigma", "must be positive")

    def density(self, x, y):
        z = (np.asarray(y) - np.asarray(x)) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2.0 * math.pi))

    def cell_matrix(self, grid):
        x = grid.points
        e = grid.edges
        hi = ndtr((e[None, 1:] - x[:, None]) / self.sigma)
        lo = ndtr((e[None, :-1] - x[:, None]) / self.sigma)
        return hi - lo

    def sample(self, x, rng):
        x = np.asarray(x, dtype=float)
        return x + self.sigma * rng.standard_normal(x.shape)

    sample_adjoint = sample

    def to_dict(self):
        d = {"type": "gaussian", "sigma": self.sigma}
        if self.certificate:
            d["certificate"] = [self.certificate.kappa0, self.certificate.eps]
        return d


@dataclass(frozen=True)
class UniformWindow(MutationKernel):
    """Uniform jump on ``(x - eps, x + eps)``, density ``1 / (2 eps)``."""

    eps: float
    certificate: Certificate | None = None
    symmetric = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigInvalid("kernel.eps", "must be positive")
        if self.certificate is None:
            object.__setattr__(
                self, "certificate", Certificate(1.0 / (2.0 * self.eps), self.eps)
            )

    def density(self, x, y):
        inside = np.abs(np.asarray(y) - np.asarray(x)) < self.eps
        return np.where(inside, 1.0 / (2.0 * self.eps), 0.0)

    def cell_matrix(self, grid):
        # exact overlap of each cell with the window
        x = grid.points
        e = grid.edges
        lo = np.maximum(e[None, :-1], x[:, None] - self.eps)
        hi = np.minimum(e[None, 1:], x[:, None] + self.eps)
        return np.clip(hi - lo, 0.0, None) / (2.0 * self.eps)

    def sample(self, x, rng):
        x = np.asarray(x, dtype=float)
        return x + self.eps * rng.uniform(-1.0, 1.0, x.shape)

    sample_adjoint = sample

    def to_dict(self):
        return {"type": "uniform", "eps": self.eps}


@dataclass(frozen=True, eq=False)
class Tabulated(MutationKernel):
    """Kernel given on a grid; row ``i`` is the density of targets from ``x_i``."""

    grid: Grid
    values: np.ndarray
    certificate: Certificate | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n, self.grid.n):
            raise ConfigInvalid("kernel.values", f"expected a square {self.grid.n} table")
        if np.any(v < 0):
            raise ConfigInvalid("kernel.values", "densities must be nonnegative")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_kernel(cls, kernel: MutationKernel, grid: Grid):
        x = grid.points
        return cls(grid, kernel.density(x[:, None], x[None, :]), kernel.certificate)

    def density(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        n = self.grid.n
        fx = self.grid.locate(x)
        fy = self.grid.locate(y)
        inside = (fx >= 0) & (fx <= n - 1) & (fy >= 0) & (fy <= n - 1)
        i = np.clip(np.floor(fx).astype(int), 0, n - 2)
        j = np.clip(np.floor(fy).astype(int), 0, n - 2)
        s = np.clip(fx - i, 0.0, 1.0)
        t = np.clip(fy - j, 0.0, 1.0)
        v = self.values
        out = (
            (1 - s) * (1 - t) * v[i, j]
            + s * (1 - t) * v[i + 1, j]
            + (1 - s) * t * v[i, j + 1]
            + s * t * v[i + 1, j + 1]
        )
        return np.where(inside, out, 0.0)

    def outside_mass(self, grid):
        # mass of the table rows (own grid) not captured by ``grid``
        own = self.values.sum(axis=1) * self.grid.dx
        own_at = np.interp(grid.points, self.grid.points, own, left=0.0, right=0.0)
        return np.clip(own_at - self.cell_matrix(grid).sum(axis=1), 0.0, None)

    def _row_cdf_sample(self, table, x, rng):
        n = self.grid.n
        fx = np.clip(self.grid.locate(x), 0, n - 1)
        i = np.clip(np.floor(fx).astype(int), 0, n - 2)
        pick_upper = rng.random(fx.shape) < (fx - i)
        rows = np.where(pick_upper, i + 1, i)
        cdf = np.cumsum(table, axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(fx.shape)
        j = (cdf[rows.ravel()] < u.ravel()[:, None]).sum(axis=1)
        j = np.minimum(j, n - 1).reshape(fx.shape)
        offset = rng.uniform(-0.5, 0.5, fx.shape) * self.grid.dx
        return self.grid.points[j] + offset

    def sample(self, x, rng):
        return self._row_cdf_sample(self.values, np.asarray(x, dtype=float), rng)

    def sample_adjoint(self, x, rng):
        return self._row_cdf_sample(self.values.T, np.asarray(x, dtype=float), rng)

    def to_dict(self):
        return {"type": "tabulated", "grid": self.grid.to_dict()}


def kernel_density(kernel: MutationKernel, x, y):
    """Evaluate ``m(x, y)``."""
    return kernel.density(x, y)


def load_tabulated_csv(path, grid: Grid | None = None) -> Tabulated:
    """Read a kernel table with columns ``x, y, density``."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((float(rec["x"]), float(rec["y"]), float(rec["density"])))
    if not rows:
        raise ConfigInvalid("kernel.csv", f"{path} is empty")
    arr = np.array(rows)
    xs = np.unique(arr[:, 0])
    if grid is None:
        grid = Grid(float(xs[0]), float(xs[-1]), len(xs))
    table = np.zeros((grid.n, grid.n))
    i = np.rint(grid.locate(arr[:, 0])).astype(int)
    j = np.rint(grid.locate(arr[:, 1])).astype(int)
    table[i, j] = arr[:, 2]
    return Tabulated(grid, table)


# ------------------------------------------------------------ validation


@dataclass
class KernelReport:
    row_deviation: float
    column_deviation: float
    leak: float
    minorization_ok: bool | None
    moment_2q: float
    passed: bool = True


def validate_kernel(kernel, grid, q=1, tol=KERNEL_TOL, leak_tol=KERNEL_TOL):
    """Check row/column masses, leak, minorization and the centred jump moment.

    Only sources in the inner half of the grid are checked.
    """
    inner = grid.inner_half()
    P = kernel.cell_matrix(grid)
    leak = float(kernel.outside_mass(grid)[inner].max())
    if leak > leak_tol:
        raise MassLeak(f"kernel mass leaving the grid is {leak:.3g} > {leak_tol:.3g}")
    row_dev = float(np.abs(P[inner].sum(axis=1) - 1.0).max())
    col_dev = float(np.abs(P[:, inner].sum(axis=0) - 1.0).max())
    if row_dev > tol or col_dev > tol:
        raise DoubleStochasticityViolation(
            f"row deviation {row_dev:.3g}, column deviation {col_dev:.3g} (tol {tol:.3g})"
        )

    minor = None
    cert = kernel.certificate
    if cert is not None:
        x = grid.points[inner]
        offsets = np.linspace(-cert.eps, cert.eps, 41)[1:-1]
        vals = kernel.density(x[:, None], x[:, None] + offsets[None, :])
        minor = bool(np.all(vals >= cert.kappa0 * (1.0 - 1e-12)))

    x = grid.points
    dist = (x[None, :] - x[inner][:, None]) ** (2 * q)
    moment = float((P[inner] * dist).sum(axis=1).max())
    return KernelReport(row_dev, col_dev, leak, minor, moment, True)


# ----------------------------------------------------------------- rates


def _poly(coefs, name):
    c = np.atleast_1d(np.asarray(coefs, dtype=float))
    if c.ndim != 1 or c.size == 0 or not np.all(np.isfinite(c)):
        raise ConfigInvalid(name, "expected a nonempty list of finite coefficients")
    return Polynomial(c).trim() if np.any(c) else Polynomial([0.0])


def real_critical_points(p: Polynomial) -> np.ndarray:
    if p.degree() < 2:
        return np.empty(0)
    r = p.deriv().roots()
    return np.sort(r[np.abs(r.imag) < 1e-12].real)


def poly_sup(p: Polynomial, lo, hi) -> float:
    """Exact supremum of ``p`` on ``[lo, hi]``."""
    cands = [lo, hi] + [c for c in real_critical_points(p) if lo < c < hi]
    return float(max(p(c) for c in cands))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """All constants of the individual-based model.

    ``b`` and ``d`` are ascending coefficient lists (``[1]`` is the constant 1,
    ``[0, 0, 0.5]`` is ``x**2 / 2``).  ``strict=False`` admits the test-only
    families (constant ``h``, zero rates) that break the confinement
    assumptions.
    """

    b: Polynomial
    d: Polynomial
    gamma: float
    rho: float
    kernel: MutationKernel
    K: int = 1000
    q: float = 1.0
    c: float | None = None
    strict: bool = True

    def __post_init__(self):
        object.__setattr__(self, "b", _poly(self.b, "b") if not isinstance(self.b, Polynomial) else self.b)
        object.__setattr__(self, "d", _poly(self.d, "d") if not isinstance(self.d, Polynomial) else self.d)
        if self.gamma < 0:
            raise ConfigInvalid("gamma", "jump rate must be nonnegative")
        if not isinstance(self.K, (int, np.integer)) or self.K < 1:
            raise ConfigInvalid("K", f"must be a positive integer, got {self.K!r}")
        if self.q < 1:
            raise ConfigInvalid("q", "moment exponent must be >= 1")
        if self.c is None:
            object.__setattr__(self, "c", self._sup_h())
        if self.strict:
            check_assumptions(self)

    @property
    def h(self) -> Polynomial:
        return self.b - self.d

    def _sup_h(self) -> float:
        h = self.h
        if h.degree() == 0:
            return float(h.coef[0])
        lead = h.coef[-1]
        if h.degree() % 2 == 1 or lead > 0:
            return math.inf
        return float(max(h(c) for c in real_critical_points(h)))

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self):
        return {
            "b": self.b.coef.tolist(),
            "d": self.d.coef.tolist(),
            "gamma": self.gamma,
            "rho": self.rho,
            "kernel": self.kernel.to_dict(),
            "K": int(self.K),
            "q": self.q,
            "c": self.c,
            "strict": self.strict,
        }


def growth_rate(params: ModelParams, x):
    return params.h(np.asarray(x, dtype=float))


def h_lambda(params: ModelParams, lam, x):
    return growth_rate(params, x) - lam


@dataclass
class AssumptionReport:
    h0: float
    c: float
    confining: bool
    q_max: int
    x0: float
    q_ok: bool


def _hc_threshold(h: Polynomial, q: int) -> float:
    """Smallest ``x0 >= 0`` with ``h(x) <= -|x|**q`` for all ``|x| >= x0``."""
    x0 = 0.0
    for sign in (1.0, -1.0):
        g = Polynomial(h.coef * sign ** np.arange(h.coef.size)) + Polynomial([0] * q + [1])
        r = g.roots()
        r = r[(np.abs(r.imag) < 1e-9) & (r.real > 0)].real
        if r.size:
            x0 = max(x0, float(r.max()))
    return x0


def check_assumptions(params: ModelParams) -> AssumptionReport:
    """Verify the growth-rate assumptions and find the largest usable ``q``.

    Raises ``AssumptionViolation`` if ``h(0) <= 0``, ``h`` is not bounded by
    ``c`` or ``h`` does not go to minus infinity.
    """
    h = params.h
    for name, p in (("b", params.b), ("d", params.d)):
        lead = p.coef[-1]
        if p.degree() > 0 and (p.degree() % 2 == 1 or lead < 0):
            raise AssumptionViolation(f"{name} is not bounded below by 0 at infinity")
        if p.degree() > 0 and min(p(c) for c in real_critical_points(p)) < -1e-12:
            raise AssumptionViolation(f"{name} takes negative values")
        if p.degree() == 0 and p.coef[0] < 0:
            raise AssumptionViolation(f"{name} is negative")
    h0 = float(h(0.0))
    if not h0 > 0:
        raise AssumptionViolation(f"h(0) = {h0} must be positive")
    confining = h.degree() >= 2 and h.degree() % 2 == 0 and h.coef[-1] < 0
    if not confining:
        raise AssumptionViolation("h must tend to -inf in both directions")
    sup_h = params._sup_h()
    if sup_h > params.c + 1e-12:
        raise AssumptionViolation(f"sup h = {sup_h} exceeds c = {params.c}")
    deg = h.degree()
    lead = -h.coef[-1]
    q_max = deg if lead > 1 else deg - 1
    if q_max < 1:
        raise AssumptionViolation("no q >= 1 satisfies h(x) <= -|x|^q at infinity")
    x0 = _hc_threshold(h, q_max)
    return AssumptionReport(h0, params.c, confining, q_max, x0, params.q <= q_max)


def validate_params(params: ModelParams, grid: Grid):
    """Grid-dependent checks: ``h`` negative at both grid ends."""
    if params.strict:
        hl, hr = growth_rate(params, [grid.x_min, grid.x_max])
        if not (hl < 0 and hr < 0):
            raise AssumptionViolation(
                f"h must be negative at the grid ends, got h({grid.x_min})={hl}, h({grid.x_max})={hr}"
            )
    return validate_kernel(params.kernel, grid, q=int(math.ceil(params.q)))


# ---------------------------------------------------------------- config


def example_params(gamma=0.4, rho=0.001, eps=0.3, K=1000) -> ModelParams:
    """Birth 1, death ``x**2 / 2``, uniform jumps on ``(x - eps, x + eps)``."""
    return ModelParams(b=[1.0], d=[0.0, 0.0, 0.5], gamma=gamma, rho=rho,
                       kernel=UniformWindow(eps), K=K, q=1.0)


def example_grid(n=400) -> Grid:
    return Grid(-4.0, 4.0, n)


def kernel_from_dict(doc, base_dir=None) -> MutationKernel:
    if not isinstance(doc, dict) or "type" not in doc:
        raise ConfigInvalid("kernel", "expected an object with a 'type' field")
    cert = doc.get("certificate")
    cert = Certificate(*map(float, cert)) if cert is not None else None
    kind = doc["type"]
    try:
        if kind == "gaussian":
            return GaussianConvolution(float(doc["sigma"]), cert)
        if kind == "uniform":
            return UniformWindow(float(doc["eps"]), cert)
        if kind == "tabulated":
            path = Path(doc["csv"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if not path.exists():
                raise ConfigInvalid("kernel.csv", f"file not found: {path}")
            tab = load_tabulated_csv(path)
            return Tabulated(tab.grid, tab.values, cert)
    except KeyError as exc:
        raise ConfigInvalid(f"kernel.{exc.args[0]}", "missing") from None
    raise ConfigInvalid("kernel.type", f"unknown kernel variant {kind!r}")


def params_from_dict(doc, base_dir=None) -> ModelParams:
    required = ("b", "d", "gamma", "rho", "kernel")
    for key in required:
        if key not in doc:
            raise ConfigInvalid(key, "missing")
    K = doc.get("K", 1000)
    if isinstance(K, float) and K.is_integer():
        K = int(K)
    if not isinstance(K, int) or isinstance(K, bool) or K < 1:
        raise ConfigInvalid("K", f"must be a positive integer, got {K!r}")
    try:
        return ModelParams(
            b=doc["b"],
            d=doc["d"],
            gamma=float(doc["gamma"]),
            rho=float(doc["rho"]),
            kernel=kernel_from_dict(doc["kernel"], base_dir),
            K=K,
            q=float(doc.get("q", 1.0)),
            c=None if doc.get("c") is None else float(doc["c"]),
            strict=bool(doc.get("strict", True)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid("model", str(exc)) from None


def load_params(path) -> ModelParams:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return params_from_dict(doc.get("model", doc), base_dir=path.parent)
