"""Discrete probability mass functions over integer time.

A :class:`Pmf` is an immutable, sorted set of impulses ``(time, prob)``.  It is
the representation of both execution-time distributions (PETs) and
completion-time distributions (PCTs).  Times are non-negative integers in
simulation time units (1 unit = 1 ms).

All operations are pure functions returning new PMFs; the heavy loops run in
:mod:`prunesim.kernels`.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping

import numpy as np

from . import kernels

TOL = 1e-12
MASS_SLACK = 1e-9

__all__ = [
    "Pmf",
    "compact",
    "convolve",
    "convolve_evict_drop",
    "convolve_no_drop",
    "convolve_pending_drop",
    "fast_success_chance",
    "shift",
    "skewness",
    "success_chance",
]


class PmfError(ValueError):
    """Raised for impulse sets that violate the PMF invariants."""


class Pmf:
    """Immutable discrete PMF backed by two read-only numpy arrays."""

    __slots__ = ("times", "probs", "_mean", "_std")

    def __init__(self, times, probs, *, validate: bool = True):
        t = np.ascontiguousarray(times, dtype=np.int64)
        p = np.ascontiguousarray(probs, dtype=np.float64)
        if validate:
            _check(t, p)
        t.flags.writeable = False
        p.flags.writeable = False
        self.times = t
        self.probs = p
        self._mean = None
        self._std = None

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "Pmf":
        """Build from ``(time, prob)`` pairs; duplicate times are summed and
        zero-probability pairs discarded."""
        acc: dict[int, float] = {}
        for t, p in pairs:
            if int(t) != t:
                raise PmfError(f"impulse time {t!r} is not an integer")
            acc[int(t)] = acc.get(int(t), 0.0) + float(p)
        items = sorted((t, p) for t, p in acc.items() if p != 0.0)
        return cls([t for t, _ in items], [p for _, p in items])

    @classmethod
    def from_dict(cls, mapping: Mapping[int, float]) -> "Pmf":
        return cls.from_pairs(mapping.items())

    @classmethod
    def delta(cls, time: int) -> "Pmf":
        return cls([int(time)], [1.0], validate=False)

    @classmethod
    def from_samples(cls, samples, *, bin_width: int = 1) -> "Pmf":
        """Histogram integer-rounded samples into a normalized PMF.

        Samples are rounded half-up and clipped to at least one time unit.
        """
        s = np.floor(np.asarray(samples, dtype=np.float64) + 0.5).astype(np.int64)
        s = np.maximum(s, 1)
        if bin_width > 1:
            s = (s + bin_width - 1) // bin_width * bin_width
        t, counts = np.unique(s, return_counts=True)
        return cls(t, counts / counts.sum(), validate=False)

    # -- accessors -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        return zip(self.times.tolist(), self.probs.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pmf):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(
            self.probs, other.probs
        )

    def __hash__(self):
        return hash((self.times.tobytes(), self.probs.tobytes()))

    def __repr__(self) -> str:
        if len(self) <= 6:
            body = ", ".join(f"{t}: {p:.6g}" for t, p in self)
        else:
            body = f"{len(self)} impulses over [{self.times[0]}, {self.times[-1]}]"
        return f"Pmf({{{body}}})"

    def to_dict(self) -> dict[int, float]:
        return dict(self)

    def to_pairs(self) -> list[list]:
        return [[t, p] for t, p in self]

    @property
    def mass(self) -> float:
        return float(self.probs.sum())

    @property
    def first(self) -> int:
        return int(self.times[0])

    @property
    def last(self) -> int:
        return int(self.times[-1])

    def mean(self) -> float:
        if self._mean is None:
            self._mean = float(np.dot(self.times, self.probs) / self.probs.sum())
        return self._mean

    def std(self) -> float:
        if self._std is None:
            mu = self.mean()
            var = float(np.dot((self.times - mu) ** 2, self.probs) / self.probs.sum())
            self._std = math.sqrt(max(var, 0.0))
        return self._std

    def cdf(self, t: int) -> float:
        """Mass at times ``<= t``."""
        i = int(np.searchsorted(self.times, t, side="right"))
        return float(self.probs[:i].sum())

    def quantile(self, u: float) -> int:
        """Smallest time whose cumulative (normalized) mass reaches ``u``."""
        c = np.cumsum(self.probs)
        c /= c[-1]
        i = int(np.searchsorted(c, u, side="left"))
        return int(self.times[min(i, len(c) - 1)])

    def condition_after(self, elapsed: int) -> "Pmf | None":
        """Distribution of the duration given it exceeds ``elapsed``;
        ``None`` when no mass remains."""
        i = int(np.searchsorted(self.times, elapsed, side="right"))
        if i >= len(self.times):
            return None
        p = self.probs[i:]
        return Pmf(self.times[i:], p / p.sum(), validate=False)

    def normalized(self) -> "Pmf":
        return Pmf(self.times, self.probs / self.probs.sum(), validate=False)


def _check(t: np.ndarray, p: np.ndarray) -> None:
    if t.ndim != 1 or p.ndim != 1 or len(t) != len(p):
        raise PmfError("times and probs must be 1-d arrays of equal length")
    if len(t) == 0:
        raise PmfError("a PMF needs at least one impulse")
    if t[0] < 0:
        raise PmfError("impulse times must be non-negative")
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        raise PmfError("impulse times must be strictly increasing")
    if not np.all((p > 0) & (p <= 1.0 + MASS_SLACK)):
        raise PmfError("impulse probabilities must lie in (0, 1]")
    if p.sum() > 1.0 + MASS_SLACK:
        raise PmfError(f"total mass {p.sum():.12g} exceeds 1")


def _wrap(tp) -> Pmf:
    return Pmf(tp[0], tp[1], validate=False)


def shift(p: Pmf, offset: int) -> Pmf:
    """Delay every impulse by ``offset`` time units."""
    if offset < 0:
        raise ValueError("offset must be non-negative")
    if offset == 0:
        return p
    return Pmf(p.times + int(offset), p.probs, validate=False)


def convolve_no_drop(prev: Pmf, pet: Pmf) -> Pmf:
    """Completion PMF of a task queued behind ``prev`` when nothing is dropped."""
    return _wrap(kernels.conv_nodrop(prev.times, prev.probs, pet.times, pet.probs))


def convolve_pending_drop(prev: Pmf, pet: Pmf, deadline: int) -> Pmf:
    """Machine-free-time PMF after the new task when a task that has not
    started by its deadline is dropped.

    Predecessor outcomes at or after ``deadline`` are carried over unchanged
    (the new task never runs); earlier outcomes are convolved with ``pet``.
    """
    if deadline <= 0:
        raise ValueError("deadline must be positive")
    return _wrap(
        kernels.conv_drop(prev.times, prev.probs, pet.times, pet.probs, int(deadline), False)
    )


def convolve_evict_drop(prev: Pmf, pet: Pmf, deadline: int) -> Pmf:
    """As :func:`convolve_pending_drop`, but a running task is also evicted at
    its deadline, so every late outcome of the new task collapses onto
    ``deadline``."""
    if deadline <= 0:
        raise ValueError("deadline must be positive")
    return _wrap(
        kernels.conv_drop(prev.times, prev.probs, pet.times, pet.probs, int(deadline), True)
    )


def convolve(prev: Pmf, pet: Pmf, deadline: int, regime: str) -> Pmf:
    """Dispatch on the dropping regime name (``none``, ``pending``, ``evict``)."""
    if regime == "none":
        return convolve_no_drop(prev, pet)
    if regime == "pending":
        return convolve_pending_drop(prev, pet, deadline)
    if regime == "evict":
        return convolve_evict_drop(prev, pet, deadline)
    raise ValueError(f"unknown dropping regime {regime!r}")


def success_chance(pct: Pmf, deadline: int) -> float:
    """Probability of completing at or before ``deadline``."""
    return min(1.0, max(0.0, pct.cdf(int(deadline))))


def fast_success_chance(pet: Pmf, tail_pct: Pmf, deadline: int) -> float:
    """``success_chance(convolve_no_drop(tail_pct, pet), deadline)`` computed
    without building the convolution."""
    v = kernels.chance_fast(pet.times, pet.probs, tail_pct.times, tail_pct.probs, int(deadline))
    return min(1.0, max(0.0, v))


def skewness(p: Pmf) -> float:
    """Moment skewness of ``p`` bounded to ``[-1, 1]``; 0 for a point mass."""
    w = p.probs / p.probs.sum()
    mu = float(np.dot(p.times, w))
    d = p.times - mu
    var = float(np.dot(d * d, w))
    if var <= 0.0 or len(p) < 2:
        return 0.0
    m3 = float(np.dot(d * d * d, w))
    s = m3 / var**1.5
    return max(-1.0, min(1.0, s))


def compact(p: Pmf, bucket: int, min_t: int, max_t: int) -> Pmf:
    """Merge impulses into ``bucket``-wide intervals inside ``[min_t, max_t]``.

    Each interval's mass is placed at its upper edge (capped at ``max_t``);
    everything below ``min_t`` collapses onto ``min_t`` and everything above
    ``max_t`` onto ``max_t``.
    """
    if bucket < 1:
        raise ValueError("bucket must be >= 1")
    if min_t > max_t:
        raise ValueError("min_t must not exceed max_t")
    if bucket == 1 and p.first >= min_t and p.last <= max_t:
        return p
    return _wrap(kernels.compact(p.times, p.probs, int(bucket), int(min_t), int(max_t)))


def compact_to(p: Pmf, max_impulses: int, max_t: int | None = None) -> Pmf:
    """Compact ``p`` to at most ``max_impulses`` impulses, cropping above
    ``max_t`` when given."""
    hi = p.last if max_t is None else max(p.first, min(p.last, int(max_t)))
    lo = p.first
    if len(p) <= max_impulses and hi == p.last:
        return p
    slots = max(1, max_impulses - 2)
    bucket = max(1, -(-(hi - lo) // slots))
    return compact(p, bucket, lo, hi)
