"""Robustness, fairness, makespan, cost and energy accounting."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .workload import DATA_DIR

ONTIME, LATE, DROPPED = "ontime", "late", "dropped"

EXCLUDE = 100
SMALL_TRACE = 400
SMALL_FRACTION = 0.05


@dataclass(frozen=True)
class TaskRecord:
    id: int
    type: int
    arrival: int
    deadline: int
    end: int
    outcome: str


@dataclass
class MachineRates:
    """Per machine type price and rated power; one time unit is one second."""

    price_per_sec: dict[str, float]
    power_w: dict[str, float]
    active_fraction: float = 0.70
    idle_fraction: float = 0.25

    def __post_init__(self):
        if any(v <= 0 for v in self.price_per_sec.values()) or any(v <= 0 for v in self.power_w.values()):
            raise ValueError("machine rates must be positive")

    @classmethod
    def load(cls, path=None) -> "MachineRates":
        doc = json.loads(Path(path or DATA_DIR / "rates.json").read_text())
        mt = doc["machine_types"]
        return cls(
            {k: float(v["price_per_sec"]) for k, v in mt.items()},
            {k: float(v["power_w"]) for k, v in mt.items()},
            float(doc.get("active_fraction", 0.70)),
            float(doc.get("idle_fraction", 0.25)),
        )


@dataclass
class MetricsReport:
    total_tasks: int = 0
    measured_tasks: int = 0
    robustness: float = 0.0
    deadline_miss_rate: float = 0.0
    late_fraction: float = 0.0
    dropped_fraction: float = 0.0
    makespan: int = 0
    ontime: int = 0
    late: int = 0
    dropped: int = 0
    per_type_ontime: dict[int, float] = field(default_factory=dict)
    fairness_std: float = 0.0
    busy_time: list[int] = field(default_factory=list)
    idle_time: list[int] = field(default_factory=list)
    cost: float = 0.0
    energy: float = 0.0
    cost_per_ontime: float = math.inf
    energy_per_ontime: float = math.inf
    counters: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_type_ontime"] = {str(k): v for k, v in self.per_type_ontime.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=_json_default)

    def flat(self) -> dict[str, float]:
        """Scalar fields plus counters, for one CSV row."""
        out = {}
        for k, v in self.to_dict().items():
            if isinstance(v, (int, float)):
                out[k] = v
        for k, v in self.counters.items():
            out[f"n_{k}"] = v
        return out


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def exclusion_window(n: int) -> int:
    """Number of tasks trimmed from each end of the terminal-order sequence."""
    if n >= SMALL_TRACE:
        return EXCLUDE
    return int(math.floor(n * SMALL_FRACTION))


def fairness_std(fractions) -> float:
    """Population standard deviation of per-type on-time fractions."""
    vals = list(fractions.values()) if isinstance(fractions, dict) else list(fractions)
    if len(vals) < 2:
        return 0.0
    # exact rational arithmetic, so identical fractions give exactly zero
    return float(statistics.pstdev(float(v) for v in vals))


def finalize(
    records: list[TaskRecord],
    busy: list[int],
    machine_types: list[str],
    rates: MachineRates | None,
    counters: dict | None = None,
    span: tuple[int, int] | None = None,
) -> MetricsReport:
    """Assemble a report from terminal task records and machine usage.

    Robustness and the miss rate use the terminal-order window with the
    first and last tasks trimmed; makespan, cost and energy use every task.
    """
    rep = MetricsReport(total_tasks=len(records), counters=dict(counters or {}))
    if span is None:
        span = (min((r.arrival for r in records), default=0), max((r.end for r in records), default=0))
    length = max(0, span[1] - span[0])
    rep.makespan = length
    rep.busy_time = [int(b) for b in busy]
    rep.idle_time = [max(0, length - int(b)) for b in busy]

    order = sorted(records, key=lambda r: (r.end, r.id))
    k = exclusion_window(len(order))
    window = order[k : len(order) - k] if k else order
    n = len(window)
    rep.measured_tasks = n
    if n:
        rep.ontime = sum(r.outcome == ONTIME for r in window)
        rep.late = sum(r.outcome == LATE for r in window)
        rep.dropped = n - rep.ontime - rep.late
        rep.robustness = rep.ontime / n
        rep.late_fraction = rep.late / n
        rep.dropped_fraction = rep.dropped / n
        rep.deadline_miss_rate = 1.0 - rep.robustness
        by_type: dict[int, list[int]] = {}
        for r in window:
            by_type.setdefault(r.type, []).append(r.outcome == ONTIME)
        rep.per_type_ontime = {t: sum(v) / len(v) for t, v in sorted(by_type.items())}
        rep.fairness_std = fairness_std(rep.per_type_ontime)

    if rates is not None:
        cost = 0.0
        energy = 0.0
        for b, idle, mt in zip(rep.busy_time, rep.idle_time, machine_types):
            cost += b * rates.price_per_sec[mt]
            energy += (b * rates.active_fraction + idle * rates.idle_fraction) * rates.power_w[mt]
        rep.cost = cost
        rep.energy = energy
        frac = rep.robustness
        rep.cost_per_ontime = cost / frac if frac > 0 else math.inf
        rep.energy_per_ontime = energy / frac if frac > 0 else math.inf
    return rep


def reports_to_csv(rows: list[dict]) -> str:
    """One CSV row per dict; the header is the union of keys in first-seen order."""
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in cols})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def mean_ci(values, confidence: float = 0.95) -> tuple[float, float, float]:
    """Mean with a two-sided t-distribution confidence interval.

    With a single value the interval collapses to the mean itself.
    """
    from scipy import stats

    x = np.asarray(values, dtype=np.float64)
    m = float(x.mean()) if x.size else math.nan
    if x.size < 2 or not np.all(np.isfinite(x)):
        return m, m, m
    se = float(x.std(ddof=1) / math.sqrt(x.size))
    if se == 0.0:
        return m, m, m
    h = se * float(stats.t.ppf(0.5 + confidence / 2, x.size - 1))
    return m, m - h, m + h


def paired_one_sided(a, b, margin: float = 0.0, confidence: float = 0.95) -> tuple[float, float, bool]:
    """One-sided paired test that mean(a - b) exceeds ``margin``.

    Returns the mean difference, the lower confidence bound, and whether the
    bound clears the margin.
    """
    from scipy import stats

    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    m = float(d.mean())
    if d.size < 2:
        return m, m, m > margin
    se = float(d.std(ddof=1) / math.sqrt(d.size))
    lower = m - se * float(stats.t.ppf(confidence, d.size - 1)) if se > 0 else m
    return m, lower, lower > margin
