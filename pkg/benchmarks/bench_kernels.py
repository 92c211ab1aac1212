"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --impulses 64 --repeat 5

Every kernel is checked for agreement between the two backends before it is
timed.  With ``--sim`` a short PAM simulation is also run under each backend
in a subprocess, since the backend is fixed at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from prunesim import _pykernels

try:
    from prunesim import _ckernels
except ImportError:
    _ckernels = None


def random_pmf(rng, n, t_min, t_max):
    t = np.sort(rng.choice(np.arange(t_min, t_max), size=n, replace=False)).astype(np.int64)
    p = rng.random(n) + 1e-3
    return t, p / p.sum()


def flatten(pmfs):
    t = np.concatenate([a for a, _ in pmfs])
    p = np.concatenate([b for _, b in pmfs])
    off = np.zeros(len(pmfs) + 1, dtype=np.int64)
    off[1:] = np.cumsum([len(a) for a, _ in pmfs])
    return t, p, off


def cases(n, seed):
    """Argument tuples per kernel, sized by ``n`` impulses per PMF."""
    rng = np.random.default_rng(seed)
    at, ap = random_pmf(rng, n, 0, 20 * n)
    bt, bp = random_pmf(rng, n, 1, 10 * n)
    dl = int(at[n // 2] + bt[n // 2])
    pets = [random_pmf(rng, n, 1, 10 * n) for _ in range(96)]
    tails = [random_pmf(rng, 2 * n, 0, 20 * n) for _ in range(8)]
    pt, pp, poff = flatten(pets)
    tt, tp, toff = flatten(tails)
    entry = rng.integers(0, 96, size=(40, 8)).astype(np.int64)
    dls = rng.integers(5 * n, 25 * n, size=40).astype(np.int64)
    free = rng.random(8) * 10
    execs = rng.random(200) * 5
    big_t, big_p = random_pmf(rng, 16 * n, 0, 400 * n)
    return {
        "conv_nodrop": (at, ap, bt, bp),
        "conv_drop": (at, ap, bt, bp, dl, True),
        "chance_fast": (bt, bp, at, ap, dl),
        "chance_matrix": (pt, pp, poff, entry, tt, tp, toff, dls),
        "compact": (big_t, big_p, 50, 0, 300 * n),
        "list_schedule": (free, execs),
        "insertion_completions": (free, execs, 3.0),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.shape == np.shape(b) and np.allclose(a, b, rtol=0, atol=1e-12)
    return abs(a - b) <= 1e-12


def best_time(fn, args, repeat, number):
    return min(timeit.repeat(lambda: fn(*args), repeat=repeat, number=number)) / number


def bench(n, repeat, seed):
    rows = []
    for name, args in cases(n, seed).items():
        py = getattr(_pykernels, name)
        t_py = best_time(py, args, repeat, 5)
        row = {"kernel": name, "python_us": t_py * 1e6}
        if _ckernels is not None:
            cy = getattr(_ckernels, name)
            if not same(py(*args), cy(*args)):
                raise SystemExit(f"{name}: backends disagree")
            t_cy = best_time(cy, args, repeat, 5)
            row.update(cython_us=t_cy * 1e6, speedup=t_py / t_cy)
        rows.append(row)
    return rows


SIM_SNIPPET = """
import time
from prunesim import kernels
from prunesim.engine import SimConfig, Simulator
from prunesim.pruner import PrunerConfig
from prunesim.workload import ArrivalConfig, default_means, generate_pet, generate_trace
tt, mt, means = default_means()
pet = generate_pet(means, tt, mt, seed=1)
trace = generate_trace(ArrivalConfig.spiky(total_tasks=600, span=3000, seed=0), pet)
t0 = time.perf_counter()
rep = Simulator(SimConfig(heuristic="pam", pruning=PrunerConfig()), trace, pet).run()
print(kernels.BACKEND, time.perf_counter() - t0, rep.robustness)
"""


def bench_sim():
    out = {}
    for pure in ("", "1"):
        env = dict(os.environ, PRUNESIM_PURE_PYTHON=pure)
        text = subprocess.run([sys.executable, "-c", SIM_SNIPPET], env=env, capture_output=True, text=True, check=True).stdout
        backend, secs, rob = text.split()
        out[backend] = {"seconds": float(secs), "robustness": float(rob)}
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--impulses", type=int, nargs="+", default=[16, 64, 256])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sim", action="store_true", help="also time a 600-task PAM run per backend")
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args(argv)

    results = {n: bench(n, args.repeat, args.seed) for n in args.impulses}
    sim = bench_sim() if args.sim else None
    if args.json:
        print(json.dumps({"kernels": results, "simulation": sim}, indent=2))
        return
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'impulses':>8}  {'kernel':<22} {'python us':>12} {'cython us':>12} {'speedup':>8}")
    for n, rows in results.items():
        for r in rows:
            cy = f"{r['cython_us']:12.1f} {r['speedup']:7.1f}x" if "cython_us" in r else ""
            print(f"{n:>8}  {r['kernel']:<22} {r['python_us']:12.1f} {cy}")
    if sim:
        for backend, s in sim.items():
            print(f"PAM 600 tasks, {backend}: {s['seconds']:.2f}s, robustness {s['robustness']:.4f}")


if __name__ == "__main__":
    main()
