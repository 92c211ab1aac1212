"""Pure-Python (numpy) implementations of the numerical kernels.

Every function here has an identically named counterpart in the compiled
``_ckernels`` extension.  Both operate on sparse impulse arrays: ``times`` is a
strictly increasing ``int64`` array and ``probs`` a ``float64`` array of the
same length.
"""

import numpy as np

PRUNE_EPS = 1e-15

# Above this many slots per pair the dense accumulation buffer is wasteful and
# the sort-and-reduce path is used instead.
_DENSE_FACTOR = 8


def _finish(times, probs):
    keep = probs > PRUNE_EPS
    return np.ascontiguousarray(times[keep], dtype=np.int64), np.ascontiguousarray(
        probs[keep], dtype=np.float64
    )


def _reduce_pairs(times, probs):
    order = np.argsort(times, kind="stable")
    times = times[order]
    probs = probs[order]
    uniq, start = np.unique(times, return_index=True)
    sums = np.add.reduceat(probs, start) if len(probs) else probs
    return _finish(uniq, sums)


def conv_nodrop(at, ap, bt, bp):
    if len(at) == 0 or len(bt) == 0:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    lo = at[0] + bt[0]
    span = int(at[-1] + bt[-1] - lo + 1)
    if span <= _DENSE_FACTOR * len(at) * len(bt) + 1024:
        da = np.zeros(at[-1] - at[0] + 1)
        da[at - at[0]] = ap
        db = np.zeros(bt[-1] - bt[0] + 1)
        db[bt - bt[0]] = bp
        out = np.convolve(da, db)
        nz = np.nonzero(out > PRUNE_EPS)[0]
        return (nz + lo).astype(np.int64), out[nz]
    times = (at[:, None] + bt[None, :]).ravel()
    probs = (ap[:, None] * bp[None, :]).ravel()
    return _reduce_pairs(times, probs)


def conv_drop(at, ap, bt, bp, deadline, evict):
    """Convolution where the new task is dropped when it cannot start before
    ``deadline`` and, when ``evict`` is set, also evicted at ``deadline`` if it
    is still running."""
    if len(at) == 0 or len(bt) == 0:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    mass_b = float(bp.sum())
    early = at < deadline
    parts_t = [at[~early]]
    parts_p = [ap[~early] * mass_b]
    if early.any():
        et = at[early]
        ep = ap[early]
        t = (et[:, None] + bt[None, :]).ravel()
        p = (ep[:, None] * bp[None, :]).ravel()
        if evict:
            t = np.minimum(t, deadline)
        parts_t.append(t)
        parts_p.append(p)
    return _reduce_pairs(np.concatenate(parts_t), np.concatenate(parts_p))


def chance_fast(et, ep, ct, cp, deadline):
    """Probability that (E convolved with C) lands at or before ``deadline``.

    Two-pointer walk: E is visited from its last useful impulse backwards
    while C is consumed forwards exactly once, so the running prefix mass of
    C is carried across iterations.
    """
    p = len(et)
    r = len(ct)
    if p == 0 or r == 0:
        return 0.0
    c0 = ct[0]
    k = -1
    while k + 1 < p and et[k + 1] + c0 <= deadline:
        k += 1
    j = 0
    memo = 0.0
    total = 0.0
    while k >= 0:
        ek = et[k]
        while j < r and ct[j] + ek <= deadline:
            memo += cp[j]
            j += 1
        total += memo * ep[k]
        k -= 1
    return total


def chance_matrix(pet_t, pet_p, pet_off, entry, tail_t, tail_p, tail_off, deadlines):
    """Success chance for every (task, machine) pair.

    ``entry[b, m]`` indexes the PET of task ``b`` on machine ``m`` inside the
    flattened ``pet_t``/``pet_p`` arrays (bounds in ``pet_off``); machine tails
    are flattened the same way through ``tail_off``.
    """
    nb, nm = entry.shape
    out = np.zeros((nb, nm))
    for m in range(nm):
        ct = tail_t[tail_off[m] : tail_off[m + 1]]
        cp = tail_p[tail_off[m] : tail_off[m + 1]]
        if len(ct) == 0:
            continue
        cdf = np.cumsum(cp)
        for b in range(nb):
            e = entry[b, m]
            et = pet_t[pet_off[e] : pet_off[e + 1]]
            ep = pet_p[pet_off[e] : pet_off[e + 1]]
            idx = np.searchsorted(ct, deadlines[b] - et, side="right")
            ok = idx > 0
            if ok.any():
                out[b, m] = float(np.dot(ep[ok], cdf[idx[ok] - 1]))
    return out


def compact(times, probs, bucket, min_t, max_t):
    if len(times) == 0:
        return times.copy(), probs.copy()
    t = np.asarray(times, dtype=np.int64)
    upper = min_t + ((t - min_t) // bucket + 1) * bucket - 1
    new_t = np.where(t < min_t, min_t, np.where(t > max_t, max_t, np.minimum(upper, max_t)))
    return _reduce_pairs(new_t.astype(np.int64), np.asarray(probs, dtype=np.float64))


def list_schedule(free, execs):
    """Greedy list scheduling of ``execs`` (in order) onto machines that become
    free at ``free``; returns each task's completion time."""
    free = np.array(free, dtype=np.float64)
    out = np.empty(len(execs))
    for i, e in enumerate(execs):
        m = int(np.argmin(free))
        free[m] += e
        out[i] = free[m]
    return out


def insertion_completions(free, execs, extra):
    """Completion time of a task of duration ``extra`` inserted before each
    position ``0..n`` of an ordered list scheduled on ``free`` machines."""
    free = np.array(free, dtype=np.float64)
    n = len(execs)
    out = np.empty(n + 1)
    for i in range(n + 1):
        out[i] = free.min() + extra
        if i < n:
            m = int(np.argmin(free))
            free[m] += execs[i]
    return out
