"""Wall-clock comparison of the compiled and pure-Python event loops.

    python3 benchmarks/bench_ibm.py --K 1000 --T 10 --repeats 3
"""

import argparse
import time

import numpy as np

from ancestral import ibm
from ancestral.model import example_grid, example_params
from ancestral.pde import solve_stationary


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--K", type=int, default=1000)
    ap.add_argument("--T", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--mode", choices=["nonlinear", "frozen"], default="nonlinear")
    args = ap.parse_args(argv)

    params = example_params(K=args.K)
    eig = solve_stationary(params, example_grid())
    state = ibm.init_population(params, eig.F, args.seed)

    def run(backend):
        return ibm.simulate(params, state, args.T, mode=args.mode, lam=eig.lam, backend=backend)

    backends = ["python"] + (["compiled"] if ibm._core is not None else [])
    results = {}
    for name in backends:
        results[name] = best_of(lambda: run(name), args.repeats)
        secs, h = results[name]
        print(f"{name:>9}: {secs:8.3f} s  events={h.ev_time.size}  N_T={h.N_final}")
    if "compiled" in results:
        a, b = results["python"][1], results["compiled"][1]
        same = all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("ev_time", "ev_kind", "ev_id", "ev_trait"))
        print(f"  speedup: {results['python'][0] / results['compiled'][0]:.1f}x  identical histories: {same}")
    else:
        print("compiled core not built; only the fallback was timed")


if __name__ == "__main__":
    main()
