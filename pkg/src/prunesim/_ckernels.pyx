# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical kernels; see ``_pykernels`` for the reference versions."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64
ctypedef cnp.float64_t f64

cdef double PRUNE_EPS = 1e-15
cdef long DENSE_FACTOR = 8


cdef tuple _extract(double[::1] buf, i64 lo):
    cdef Py_ssize_t n = buf.shape[0], i, k = 0
    for i in range(n):
        if buf[i] > PRUNE_EPS:
            k += 1
    out_t = np.empty(k, dtype=np.int64)
    out_p = np.empty(k, dtype=np.float64)
    cdef i64[::1] ot = out_t
    cdef double[::1] op = out_p
    k = 0
    for i in range(n):
        if buf[i] > PRUNE_EPS:
            ot[k] = lo + i
            op[k] = buf[i]
            k += 1
    return out_t, out_p


def _sparse_reduce(times, probs):
    order = np.argsort(times, kind="stable")
    times = times[order]
    probs = probs[order]
    uniq, start = np.unique(times, return_index=True)
    sums = np.add.reduceat(probs, start)
    keep = sums > PRUNE_EPS
    return np.ascontiguousarray(uniq[keep], dtype=np.int64), np.ascontiguousarray(sums[keep])


def conv_nodrop(const i64[::1] at, const double[::1] ap, const i64[::1] bt, const double[::1] bp):
    cdef Py_ssize_t na = at.shape[0], nb = bt.shape[0], i, j
    if na == 0 or nb == 0:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    cdef i64 lo = at[0] + bt[0]
    cdef i64 span = at[na - 1] + bt[nb - 1] - lo + 1
    if span > DENSE_FACTOR * na * nb + 1024:
        t = (np.asarray(at)[:, None] + np.asarray(bt)[None, :]).ravel()
        p = (np.asarray(ap)[:, None] * np.asarray(bp)[None, :]).ravel()
        return _sparse_reduce(t, p)
    buf_arr = np.zeros(span, dtype=np.float64)
    cdef double[::1] buf = buf_arr
    cdef i64 off
    cdef double pa
    for i in range(na):
        off = at[i] - lo
        pa = ap[i]
        for j in range(nb):
            buf[off + bt[j]] += pa * bp[j]
    return _extract(buf, lo)


def conv_drop(const i64[::1] at, const double[::1] ap, const i64[::1] bt, const double[::1] bp,
              i64 deadline, bint evict):
    cdef Py_ssize_t na = at.shape[0], nb = bt.shape[0], i, j
    if na == 0 or nb == 0:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    cdef double mass_b = 0.0
    for j in range(nb):
        mass_b += bp[j]
    cdef i64 lo = at[0] + bt[0]
    if at[0] < lo:
        lo = at[0]
    cdef i64 hi = lo, v
    if at[na - 1] >= deadline:
        hi = at[na - 1]
    # latest early predecessor plus the longest execution, capped when evicting
    for i in range(na - 1, -1, -1):
        if at[i] < deadline:
            v = at[i] + bt[nb - 1]
            if evict and v > deadline:
                v = deadline
            if v > hi:
                hi = v
            break
    cdef i64 span = hi - lo + 1
    if span > DENSE_FACTOR * na * nb + 1024:
        import prunesim._pykernels as pk
        return pk.conv_drop(np.asarray(at), np.asarray(ap), np.asarray(bt), np.asarray(bp),
                            deadline, evict)
    buf_arr = np.zeros(span, dtype=np.float64)
    cdef double[::1] buf = buf_arr
    cdef double pa
    cdef i64 t
    for i in range(na):
        pa = ap[i]
        if at[i] >= deadline:
            buf[at[i] - lo] += pa * mass_b
            continue
        for j in range(nb):
            t = at[i] + bt[j]
            if evict and t > deadline:
                t = deadline
            buf[t - lo] += pa * bp[j]
    return _extract(buf, lo)


cdef double _chance(const i64[::1] et, const double[::1] ep, Py_ssize_t e0, Py_ssize_t e1,
                    const i64[::1] ct, const double[::1] cp, Py_ssize_t c0, Py_ssize_t c1,
                    i64 deadline) nogil:
    if e1 <= e0 or c1 <= c0:
        return 0.0
    cdef i64 cfirst = ct[c0]
    cdef Py_ssize_t k = e0 - 1
    while k + 1 < e1 and et[k + 1] + cfirst <= deadline:
        k += 1
    cdef Py_ssize_t j = c0
    cdef double memo = 0.0, total = 0.0
    cdef i64 ek
    while k >= e0:
        ek = et[k]
        while j < c1 and ct[j] + ek <= deadline:
            memo += cp[j]
            j += 1
        total += memo * ep[k]
        k -= 1
    return total


def chance_fast(const i64[::1] et, const double[::1] ep, const i64[::1] ct, const double[::1] cp,
                i64 deadline):
    return _chance(et, ep, 0, et.shape[0], ct, cp, 0, ct.shape[0], deadline)


def chance_matrix(const i64[::1] pet_t, const double[::1] pet_p, const i64[::1] pet_off,
                  const i64[:, ::1] entry, const i64[::1] tail_t, const double[::1] tail_p,
                  const i64[::1] tail_off, const i64[::1] deadlines):
    cdef Py_ssize_t nb = entry.shape[0], nm = entry.shape[1], b, m
    out_arr = np.zeros((nb, nm), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef i64 e
    with nogil:
        for b in range(nb):
            for m in range(nm):
                e = entry[b, m]
                out[b, m] = _chance(pet_t, pet_p, pet_off[e], pet_off[e + 1],
                                    tail_t, tail_p, tail_off[m], tail_off[m + 1], deadlines[b])
    return out_arr


def compact(const i64[::1] times, const double[::1] probs, i64 bucket, i64 min_t, i64 max_t):
    cdef Py_ssize_t n = times.shape[0], i, k = -1
    out_t = np.empty(n, dtype=np.int64)
    out_p = np.empty(n, dtype=np.float64)
    cdef i64[::1] ot = out_t
    cdef double[::1] op = out_p
    cdef i64 t, nt
    # input is sorted and the mapping is monotone, so equal targets are adjacent
    for i in range(n):
        t = times[i]
        if t < min_t:
            nt = min_t
        elif t > max_t:
            nt = max_t
        else:
            nt = min_t + ((t - min_t) // bucket + 1) * bucket - 1
            if nt > max_t:
                nt = max_t
        if k >= 0 and ot[k] == nt:
            op[k] += probs[i]
        else:
            k += 1
            ot[k] = nt
            op[k] = probs[i]
    return out_t[:k + 1].copy(), out_p[:k + 1].copy()


def list_schedule(free_in, const double[::1] execs):
    free_arr = np.array(free_in, dtype=np.float64)
    cdef double[::1] free = free_arr
    cdef Py_ssize_t n = execs.shape[0], m = free.shape[0], i, j, best
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        best = 0
        for j in range(1, m):
            if free[j] < free[best]:
                best = j
        free[best] += execs[i]
        out[i] = free[best]
    return out_arr


def insertion_completions(free_in, const double[::1] execs, double extra):
    free_arr = np.array(free_in, dtype=np.float64)
    cdef double[::1] free = free_arr
    cdef Py_ssize_t n = execs.shape[0], m = free.shape[0], i, j, best
    out_arr = np.empty(n + 1, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n + 1):
        best = 0
        for j in range(1, m):
            if free[j] < free[best]:
                best = j
        out[i] = free[best] + extra
        if i < n:
            free[best] += execs[i]
    return out_arr
