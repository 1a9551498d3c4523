"""Command-line entry point: ``ancestral {simulate,stationary,spine,validate,duality}``.

Every run writes its outputs, the resolved configuration and a
``manifest.json`` listing each file with its SHA-256 digest into ``--out``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import errors
from .model import Grid, example_params, params_from_dict, validate_params
from .operators import Operators, duality_residual, fk_duality_residual
from .pde import moment_2q, solve_stationary
from .stats import LINEAGE_SALT

log = logging.getLogger("ancestral")

KINDS = ("simulate", "stationary", "spine", "validate", "duality")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STAT = 0, 2, 3, 4


DEFAULTS = {
    "grid": {"x_min": -4.0, "x_max": 4.0, "n": 400},
    "stationary": {"tol": 1e-12, "macro": 1.0, "max_iter": 20000},
    "simulate": {"T": 10.0, "mode": "nonlinear", "n_lineages": 20, "window": 0.1, "svg": True},
    "spine": {"direction": "forward", "n_paths": 1000, "T": 2.0, "x0": None, "n_times": 101},
    "validate": {"T": 10.0, "replicates": 500, "checkpoints": [2.5, 5.0, 7.5], "n_spine": 10000,
                 "tolerance": 0.1, "min_survivors": 20, "mode": "nonlinear"},
    "duality": {"pairs": 100, "t": 1.0},
}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    out: Path
    params: object
    grid: Grid
    options: dict
    resolved: dict = field(default_factory=dict)
    jobs: int = 1


# ----------------------------------------------------------------- config


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(kind, doc=None, seed=None, out=".", jobs=1, base_dir=None, overrides=None):
    """Validate a configuration document and expand defaults."""
    if kind not in KINDS:
        raise errors.ConfigInvalid("kind", f"must be one of {KINDS}")
    doc = dict(doc or {})
    model_doc = doc.get("model")
    if model_doc is None:
        model_doc = example_params().to_dict()
    if not isinstance(model_doc, dict):
        raise errors.ConfigInvalid("model", "expected an object")
    params = params_from_dict(model_doc, base_dir=base_dir)
    g = _merge(DEFAULTS["grid"], doc.get("grid"))
    try:
        grid = Grid(float(g["x_min"]), float(g["x_max"]), int(g["n"]))
    except (TypeError, ValueError, KeyError) as exc:
        raise errors.ConfigInvalid("grid", str(exc)) from None
    seed = doc.get("seed") if seed is None else seed
    if seed is None:
        raise errors.ConfigInvalid("seed", "a seed is mandatory (config 'seed' or --seed)")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise errors.ConfigInvalid("seed", f"must be a nonnegative integer, got {seed!r}")
    opts = _merge(DEFAULTS[kind], doc.get(kind))
    opts = _merge(opts, {k: v for k, v in (overrides or {}).items() if v is not None})
    if kind == "simulate" and opts["mode"] not in ("nonlinear", "frozen"):
        raise errors.ConfigInvalid("simulate.mode", "must be 'nonlinear' or 'frozen'")
    if kind == "spine" and opts["direction"] not in ("forward", "reversed"):
        raise errors.ConfigInvalid("spine.direction", "must be 'forward' or 'reversed'")
    for key in ("T", "t"):
        if key in opts and not float(opts[key]) > 0:
            raise errors.ConfigInvalid(f"{kind}.{key}", "must be positive")
    resolved = {"kind": kind, "seed": seed, "model": params.to_dict(), "grid": grid.to_dict(),
                kind: opts}
    if "csv" in model_doc.get("kernel", {}):
        resolved["model"]["kernel"]["csv"] = model_doc["kernel"]["csv"]
    return ExperimentConfig(kind, seed, Path(out), params, grid, opts, resolved, int(jobs))


def load_config(path):
    if path is None:
        return {}, None
    path = Path(path)
    if not path.exists():
        raise errors.ConfigInvalid("config", f"file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh), path.parent
    except json.JSONDecodeError as exc:
        raise errors.ConfigInvalid("config", f"invalid JSON: {exc}") from None


# ---------------------------------------------------------------- writers


class Outputs:
    def __init__(self, root: Path):
        self.root = root
        self.files = []
        root.mkdir(parents=True, exist_ok=True)

    def csv(self, name, header, rows):
        with open(self.root / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self.files.append(name)

    def json(self, name, obj):
        with open(self.root / name, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        self.files.append(name)

    def text(self, name, text):
        (self.root / name).write_text(text, encoding="utf-8")
        self.files.append(name)

    def manifest(self, extra=None):
        entries = []
        for name in self.files:
            digest = hashlib.sha256((self.root / name).read_bytes()).hexdigest()
            entries.append({"file": name, "sha256": digest})
        doc = {"files": entries}
        doc.update(extra or {})
        with open(self.root / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        return doc


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def svg_lines(series, title, width=640, height=400):
    """Minimal SVG line chart; ``series`` is a list of ``(xs, ys)``."""
    xs = np.concatenate([np.asarray(s[0], float) for s in series])
    ys = np.concatenate([np.asarray(s[1], float) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pad = 40

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{pad}" y="{pad // 2}" font-size="14">{title}</text>',
           f'<text x="{pad}" y="{height - 8}" font-size="11">t in [{x0:.3g}, {x1:.3g}]</text>',
           f'<text x="4" y="{pad}" font-size="11">{y1:.3g}</text>',
           f'<text x="4" y="{height - pad}" font-size="11">{y0:.3g}</text>']
    for a, b in series:
        pts = " ".join(f"{sx(u):.2f},{sy(v):.2f}" for u, v in zip(a, b))
        out.append(f'<polyline fill="none" stroke="black" stroke-opacity="0.5" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _vertices(path):
    """Corner points of a cadlag path: segment starts, pre-jump values, end."""
    ts, vs = [path.t0], [path.x0]
    for t, v in zip(path.jump_times, path.jump_values):
        ts += [float(t), float(t)]
        vs += [float(path.left_limit(t)), float(v)]
    ts.append(path.t1)
    vs.append(float(path.evaluate(path.t1)))
    return ts, vs


def _replicate_seed(seed, r):
    from .ibm.rng import mix64
    return mix64((seed << 20) + r + 1) >> 1


# -------------------------------------------------------------- commands


def cmd_stationary(cfg, out: Outputs):
    o = cfg.options
    eig = solve_stationary(cfg.params, cfg.grid, tol=o["tol"], macro=o["macro"], max_iter=o["max_iter"])
    out.csv("F.csv", ["x", "F"], zip(cfg.grid.points.tolist(), eig.F.values.tolist()))
    _, frac = moment_2q(eig.F, 1)
    summary = {"lambda": eig.lam, "residual": eig.residual, "iterations": eig.iterations,
               "outer_mass_fraction": float(eig.F.values[_outer(cfg.grid)].sum() * cfg.grid.dx / eig.lam),
               "outer_moment_fraction": frac}
    out.json("summary.json", summary)
    return summary


def _outer(grid):
    x = grid.points
    c = 0.5 * (grid.x_min + grid.x_max)
    return np.abs(x - c) >= 0.45 * (grid.x_max - grid.x_min)


def cmd_simulate(cfg, out: Outputs):
    from .ibm import extract_lineage, init_population, simulate, snapshot

    o = cfg.options
    T = float(o["T"])
    eig = solve_stationary(cfg.params, cfg.grid)
    state = init_population(cfg.params, eig.F, cfg.seed)
    hist = simulate(cfg.params, state, T, mode=o["mode"], lam=eig.lam, window=o["window"])
    out.csv("events.csv", ["time", "kind", "id", "parent", "trait"], hist.event_rows())
    snap = snapshot(hist, T)
    out.csv("snapshot_T.csv", ["x", "weight"], zip(snap.values.tolist(), snap.weights.tolist()))
    alive = hist.alive_at(T)
    rng = np.random.default_rng([cfg.seed, LINEAGE_SALT])
    chosen = np.sort(rng.choice(alive, size=min(int(o["n_lineages"]), alive.size), replace=False)) \
        if alive.size else np.empty(0, dtype=int)
    rows, series = [], []
    for k, i in enumerate(chosen):
        ts, vs = _vertices(extract_lineage(hist, int(i), T))
        rows += [(k, t, v) for t, v in zip(ts, vs)]
        series.append((ts, vs))
    out.csv("lineages.csv", ["lineage_id", "t", "value"], rows)
    if o.get("svg") and series:
        out.text("lineages.svg", svg_lines(series, "Ancestral lineages of sampled living individuals"))
    summary = {"lambda": eig.lam, "N0": state.N, "N_T": hist.N_final, "individuals": hist.n,
               "events": int(hist.ev_time.size), "extinct": bool(hist.extinct), "mode": o["mode"],
               "backend_stats": hist.stats, "mass_T": snap.mass}
    out.json("run.json", summary)
    return summary


def cmd_spine(cfg, out: Outputs):
    from .spine import SpineContext, sample_reversed, sample_spine_forward

    o = cfg.options
    T = float(o["T"])
    eig = solve_stationary(cfg.params, cfg.grid)
    ctx = SpineContext(cfg.params, eig, T_max=T)
    rng = np.random.default_rng(cfg.seed)
    n = int(o["n_paths"])
    stats = {"direction": o["direction"], "T": T, "lambda": eig.lam}
    if o["direction"] == "forward":
        init = "biased" if o["x0"] is None else float(o["x0"])
        res = sample_spine_forward(init, T, ctx, rng, n_accept=n)
        paths = res.paths
        stats.update(acceptance_rate=res.rate, acceptance_se=res.rate_se, trials=res.trials, C=res.C)
    else:
        res = sample_reversed(T, ctx, rng, n, x0=o["x0"])
        paths = res.paths
        stats.update(floor_exits=res.floor_exits, attempts=res.attempts, phantoms=res.phantoms)
    times = np.linspace(0.0, T, int(o["n_times"]))
    out.csv("paths.csv", ["path_id", "t", "value"], paths.rows(times))
    marg = []
    for t in np.linspace(0.0, T, 5):
        v = paths.evaluate(t)
        marg.append({"t": float(t), "mean": float(v.mean()), "sd": float(v.std()),
                     "q05": float(np.quantile(v, 0.05)), "q95": float(np.quantile(v, 0.95))})
    stats["marginals"] = marg
    out.json("stats.json", stats)
    return stats


def _lineage_worker(args):
    from .errors import Extinct
    from .ibm import sample_uniform_lineage, simulate

    params, F, T, seed, mode, lam = args
    h = simulate(params, F, T, seed=seed, mode=mode, lam=lam)
    try:
        return sample_uniform_lineage(h, T, np.random.default_rng([h.seed, LINEAGE_SALT]))
    except Extinct:
        return None


def cmd_validate(cfg, out: Outputs):
    from .spine import SpineContext
    from .stats import compare_lineages

    o = cfg.options
    T = float(o["T"])
    eig = solve_stationary(cfg.params, cfg.grid)
    ctx = SpineContext(cfg.params, eig, T_max=1.0)
    tasks = [(cfg.params, eig.F, T, _replicate_seed(cfg.seed, r), o["mode"], eig.lam)
             for r in range(int(o["replicates"]))]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            lineages = list(ex.map(_lineage_worker, tasks, chunksize=4))
    else:
        lineages = [_lineage_worker(t) for t in tasks]
    report = compare_lineages(
        [p for p in lineages if p is not None], sum(p is None for p in lineages), ctx, T,
        o["checkpoints"], int(o["n_spine"]), np.random.default_rng(cfg.seed),
        tolerance=float(o["tolerance"]), min_survivors=int(o["min_survivors"]))
    out.csv("comparison.csv", ["checkpoint", "w1", "ks", "tolerance", "calibration", "passed"],
            [(c.t, c.w1, c.ks, c.tolerance, c.calibration, int(c.passed)) for c in report.checkpoints])
    doc = report.to_dict()
    doc["lambda"] = eig.lam
    out.json("report.json", doc)
    if not report.passed:
        raise errors.StatisticalFailure("lineage comparison exceeded its tolerance")
    return doc


def cmd_duality(cfg, out: Outputs):
    o = cfg.options
    params, grid = cfg.params, cfg.grid
    ops = Operators(params, grid)
    rng = np.random.default_rng(cfg.seed)
    eig = solve_stationary(params, grid, ops=ops)
    t = float(o["t"])
    growth = math.exp(params.c * t) + 1.0 if math.isfinite(params.c) else math.inf
    rows = []
    worst_g = worst_s = 0.0
    for k in range(int(o["pairs"])):
        f, g = random_pair(grid, rng)
        scale = np.abs(f).max() * np.abs(g).sum() * grid.dx
        rg = abs(duality_residual(f, g, params, grid, ops)) / scale
        rs = abs(fk_duality_residual(f, g, t, params, eig.lam, ops=ops)) / (growth * scale)
        worst_g, worst_s = max(worst_g, rg), max(worst_s, rs)
        rows.append((k, rg, rs))
    out.csv("duality.csv", ["pair", "generator_residual", "semigroup_residual"], rows)
    summary = {"pairs": len(rows), "max_generator_residual": worst_g,
               "max_semigroup_residual": worst_s, "t": t, "lambda": eig.lam,
               "passed": bool(worst_g <= 1e-8 and worst_s <= 1e-6)}
    out.json("summary.json", summary)
    return summary


def random_pair(grid, rng):
    """Smooth random functions supported in the inner half of the grid."""
    x = grid.points
    c = 0.5 * (grid.x_min + grid.x_max)
    half = 0.25 * (grid.x_max - grid.x_min)
    out = []
    for _ in range(2):
        w = rng.uniform(0.1, 1.0) * half
        mid = rng.uniform(c - half + w, c + half - w)
        a, b = mid - w, mid + w
        v = np.zeros_like(x)
        inside = (x > a) & (x < b)
        u = (x[inside] - a) / (b - a)
        v[inside] = (np.sin(np.pi * u) ** 2) * (1 + rng.uniform(-0.5, 0.5) * np.cos(rng.uniform(1, 8) * x[inside]))
        out.append(v * rng.uniform(0.5, 2.0))
    return out


COMMANDS = {"simulate": cmd_simulate, "stationary": cmd_stationary, "spine": cmd_spine,
            "validate": cmd_validate, "duality": cmd_duality}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one experiment and write its manifest; module errors are recorded then re-raised."""
    out = Outputs(cfg.out)
    out.json("resolved_config.json", cfg.resolved)
    if cfg.kind in ("stationary", "simulate", "validate"):
        validate_params(cfg.params, cfg.grid)
    try:
        summary = COMMANDS[cfg.kind](cfg, out)
    except errors.AncestralError as exc:
        out.manifest({"kind": cfg.kind, "status": "error",
                      "error": {"type": type(exc).__name__, "message": str(exc)}})
        raise
    return out.manifest({"kind": cfg.kind, "status": "ok"}) | {"summary": summary}


def exit_code(exc) -> int:
    if isinstance(exc, errors.NumericalFailure):
        return EXIT_NUMERIC
    if isinstance(exc, (errors.StatisticalFailure, errors.Extinct)):
        return EXIT_STAT
    return EXIT_CONFIG


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration document")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for replicates")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="ancestral", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="kind", required=True)
    p = sub.add_parser("simulate", parents=[common], help="run the individual-based model")
    p.add_argument("--T", type=float)
    p.add_argument("--mode", choices=["nonlinear", "frozen"])
    p.add_argument("--n-lineages", dest="n_lineages", type=int)
    sub.add_parser("stationary", parents=[common], help="stationary density and eigenvalue")
    p = sub.add_parser("spine", parents=[common], help="sample spinal paths")
    p.add_argument("--direction", choices=["forward", "reversed"])
    p.add_argument("--n-paths", dest="n_paths", type=int)
    p.add_argument("--T", type=float)
    p.add_argument("--x0", type=float)
    p = sub.add_parser("validate", parents=[common], help="reversed lineages against the reversed spine")
    p.add_argument("--T", type=float)
    p.add_argument("--replicates", type=int)
    p.add_argument("--n-spine", dest="n_spine", type=int)
    p.add_argument("--mode", choices=["nonlinear", "frozen"])
    p = sub.add_parser("duality", parents=[common], help="generator and semigroup duality residuals")
    p.add_argument("--pairs", type=int)
    p.add_argument("--t", type=float)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    skip = {"kind", "config", "seed", "out", "jobs", "verbose"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    try:
        doc, base = load_config(args.config)
        cfg = build_config(args.kind, doc, args.seed, args.out, args.jobs, base, overrides)
        manifest = run_experiment(cfg)
    except errors.AncestralError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    print(json.dumps(manifest["summary"], indent=2, sort_keys=True, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
