"""Independent reference computations used by the tests.

Nothing here imports the package under test; everything works on plain
``{time: prob}`` dicts with nested loops.
"""

from collections import defaultdict


def brute_convolve(a, b):
    out = defaultdict(float)
    for ta, pa in a.items():
        for tb, pb in b.items():
            out[ta + tb] += pa * pb
    return dict(out)


def enumerate_drop(prev, pet, deadline, evict):
    """Enumerate every (predecessor outcome, execution outcome) pair.

    The new task is dropped when the predecessor finishes at or after the
    deadline (machine free time = predecessor time).  With eviction it is also
    cut off at the deadline if still running.
    """
    out = defaultdict(float)
    for ta, pa in prev.items():
        for tb, pb in pet.items():
            if ta >= deadline:
                t = ta
            else:
                t = ta + tb
                if evict and t > deadline:
                    t = deadline
            out[t] += pa * pb
    return dict(out)


def naive_chance(pct, deadline):
    return sum(p for t, p in pct.items() if t <= deadline)


def dict_close(a, b, tol):
    keys = set(a) | set(b)
    return all(abs(a.get(k, 0.0) - b.get(k, 0.0)) <= tol for k in keys)


def random_pmf(rng, n, t_max, t_min=0):
    times = rng.choice(range(t_min, t_max + 1), size=n, replace=False)
    w = rng.random(n) + 1e-3
    w = w / w.sum()
    return {int(t): float(p) for t, p in zip(times, w)}


def moment_skew(d):
    tot = sum(d.values())
    mu = sum(t * p for t, p in d.items()) / tot
    var = sum((t - mu) ** 2 * p for t, p in d.items()) / tot
    m3 = sum((t - mu) ** 3 * p for t, p in d.items()) / tot
    return m3 / var ** 1.5
