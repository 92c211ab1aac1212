"""Probabilistic task pruning: dropping mapped tasks and deferring unmapped ones.

The pure formulas are module functions; :class:`PrunerState` carries the
per-run adaptive quantities (oversubscription level, dropping toggle and the
deferring threshold).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

REGIMES = ("none", "pending", "evict")


@dataclass
class PrunerConfig:
    drop_threshold: float = 0.5
    defer_threshold: float = 0.5
    # "dynamic" adapts the deferring threshold every mapping event
    defer_mode: str = "dynamic"
    rho: float = 0.2
    lam: float = 0.9
    theta: float = 0.05
    schmitt: bool = True
    on_level: float = 1.0
    off_ratio: float = 0.8
    regime: str = "evict"
    # dropping toggle: "reactive" follows the oversubscription trigger,
    # "always" and "never" pin it
    toggle: str = "reactive"
    fairness: float = 0.0

    def __post_init__(self):
        for name in ("drop_threshold", "defer_threshold", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"pruner.{name} must lie in [0, 1], got {v}")
        if self.regime not in REGIMES:
            raise ValueError(f"pruner.regime must be one of {REGIMES}")
        if self.defer_mode not in ("dynamic", "static"):
            raise ValueError("pruner.defer_mode must be 'dynamic' or 'static'")
        if self.toggle not in ("reactive", "always", "never"):
            raise ValueError("pruner.toggle must be 'reactive', 'always' or 'never'")
        if not 0.0 < self.off_ratio < 1.0:
            raise ValueError("pruner.off_ratio must lie in (0, 1)")
        if self.on_level <= 0:
            raise ValueError("pruner.on_level must be positive")
        if self.theta < 0 or self.rho < 0 or self.fairness < 0:
            raise ValueError("pruner.theta, rho and fairness must be non-negative")

    @property
    def off_level(self) -> float:
        return self.on_level * self.off_ratio

    @property
    def drops(self) -> bool:
        return self.regime != "none" and self.toggle != "never"


@dataclass
class PrunerState:
    defer_threshold: float = 0.5
    d: float = 0.0
    dropping_active: bool = False
    misses: int = 0  # expirations since the previous mapping event
    toggles: int = 0

    @classmethod
    def from_config(cls, cfg: PrunerConfig) -> "PrunerState":
        return cls(defer_threshold=cfg.defer_threshold, dropping_active=cfg.toggle == "always")


def update_oversubscription(d_prev: float, misses: float, lam: float) -> float:
    """Exponentially weighted moving average of deadline misses."""
    if misses < 0:
        raise ValueError("miss count must be non-negative")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return misses * lam + d_prev * (1.0 - lam)


def toggle_dropping(active: bool, d: float, on_level: float, off_level: float, schmitt: bool = True) -> bool:
    """Two-level hysteresis switch; a plain threshold when ``schmitt`` is off."""
    if not schmitt:
        return d >= on_level
    if not active and d >= on_level:
        return True
    if active and d <= off_level:
        return False
    return active


def adjusted_drop_threshold(base: float, skew: float, position: int, rho: float) -> float:
    """Base threshold shifted by ``-skew * rho / (position + 1)``, clamped to [0, 1].

    Negatively skewed completion PMFs (long left tail, mass bunched late) and
    tasks near the head receive the largest adjustments.
    """
    if position < 0:
        raise ValueError("queue position must be non-negative")
    phi = (-skew * rho) / (position + 1)
    return min(1.0, max(0.0, base + phi))


def selective_factor(batch_len: int, free_slots: int) -> float:
    """Batch-queue length over free machine-queue slots; infinite when saturated."""
    if free_slots <= 0:
        return math.inf
    return batch_len / free_slots


def competency_level(max_chances: Sequence[float], threshold: float) -> float:
    """Fraction of batch tasks whose best success chance clears ``threshold``."""
    if len(max_chances) == 0:
        return 0.0
    return sum(1 for c in max_chances if c >= threshold) / len(max_chances)


def instantaneous_robustness(queue_chances: Sequence[Sequence[float]], capacity: int) -> float:
    """Mean success chance over every machine-queue slot, empty slots counting 0."""
    if not queue_chances or capacity <= 0:
        return 0.0
    total = sum(sum(q) for q in queue_chances)
    return total / (len(queue_chances) * capacity)


def update_defer_threshold(current: float, delta: float, gamma: float, psi: float, theta: float) -> float:
    if delta < 1.0:
        nxt = current - theta
    elif gamma != 0.0:
        nxt = psi - theta
    else:
        nxt = current - theta
    return min(1.0, max(0.0, nxt))


def defer_pass(tasks: Sequence, max_chances: Sequence[float], thresholds: Sequence[float]):
    """Split ``tasks`` into (eligible, deferred) by comparing each task's best
    success chance with its own threshold."""
    eligible, deferred = [], []
    for t, c, th in zip(tasks, max_chances, thresholds):
        (deferred if c < th else eligible).append(t)
    return eligible, deferred


def drop_pass(
    queues: list[list],
    evaluate: Callable[[int, list], list[tuple[float, float]]],
    threshold: Callable[[object, float, int], float],
    allow_executing: bool,
    executing: Callable[[int], bool] = lambda m: True,
) -> list[tuple[int, object]]:
    """Walk each queue from the head and drop tasks whose success chance is at
    or below their adjusted threshold.

    ``evaluate(m, queue)`` returns ``(chance, skew)`` per queue position and is
    re-invoked after every drop so downstream chances reflect the removal.
    ``threshold(task, skew, position)`` yields the task's threshold.  The head
    of a queue is only considered when ``allow_executing`` is set or the
    machine is not executing it.  Queues are modified in place.
    """
    dropped = []
    for m, q in enumerate(queues):
        pos = 0
        stats = evaluate(m, q) if q else []
        while pos < len(q):
            if pos == 0 and executing(m) and not allow_executing:
                pos += 1
                continue
            chance, skew = stats[pos]
            if chance <= threshold(q[pos], skew, pos):
                dropped.append((m, q.pop(pos)))
                stats = evaluate(m, q) if q else []
                continue
            pos += 1
    return dropped


@dataclass
class SufferageMap:
    """Per-task-type fairness relaxation, bounded to [0, 1]."""

    step: float
    values: dict[int, float] = field(default_factory=dict)

    def get(self, task_type: int) -> float:
        return self.values.get(task_type, 0.0)

    def record(self, task_type: int, success: bool) -> float:
        v = self.get(task_type) + (-self.step if success else self.step)
        v = min(1.0, max(0.0, v))
        self.values[task_type] = v
        return v
