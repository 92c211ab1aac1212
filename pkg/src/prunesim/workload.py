"""PET matrices, synthetic workload traces and their file formats."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .pmf import Pmf, compact_to

DATA_DIR = Path(__file__).parent / "data"

TRACE_COLUMNS = ("id", "type", "arrival", "deadline", "data_id", "operation", "params", "priority")

PATTERNS = ("constant", "spiky", "basehigh")


class WorkloadError(ValueError):
    """Malformed workload input (means, PET or trace files)."""


@dataclass(frozen=True)
class TaskType:
    id: int
    name: str
    mean_exec: dict[str, float]

    def __post_init__(self):
        if not self.mean_exec:
            raise WorkloadError(f"task type {self.name!r} has no execution means")
        if any(m <= 0 for m in self.mean_exec.values()):
            raise WorkloadError(f"task type {self.name!r} has a non-positive mean")

    @property
    def operation(self) -> str:
        return self.name.split(":", 1)[0]

    @property
    def params(self) -> str:
        return self.name.split(":", 1)[1] if ":" in self.name else "default"


@dataclass(frozen=True, slots=True)
class TaskSpec:
    id: int
    type: int
    arrival: int
    deadline: int
    data_id: str = ""
    operation: str = ""
    params: str = ""
    priority: int = 0

    def __post_init__(self):
        if self.deadline <= self.arrival:
            raise WorkloadError(f"task {self.id}: deadline must be after arrival")

    @property
    def signature(self) -> tuple[str, str, str]:
        return (self.data_id, self.operation, self.params)


class PetMatrix:
    """Task-type x machine-type matrix of execution-time PMFs."""

    def __init__(self, task_types: list[str], machine_types: list[str], pmfs: list[list[Pmf]]):
        if len(pmfs) != len(task_types) or any(len(r) != len(machine_types) for r in pmfs):
            raise WorkloadError("PET matrix shape does not match the declared types")
        self.task_types = list(task_types)
        self.machine_types = list(machine_types)
        self.pmfs = [list(r) for r in pmfs]

    def __getitem__(self, key: tuple[int, int]) -> Pmf:
        return self.pmfs[key[0]][key[1]]

    def __eq__(self, other):
        return (
            isinstance(other, PetMatrix)
            and self.task_types == other.task_types
            and self.machine_types == other.machine_types
            and all(a == b for ra, rb in zip(self.pmfs, other.pmfs) for a, b in zip(ra, rb))
        )

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.task_types), len(self.machine_types)

    @cached_property
    def means(self) -> np.ndarray:
        return np.array([[p.mean() for p in row] for row in self.pmfs])

    @cached_property
    def stds(self) -> np.ndarray:
        return np.array([[p.std() for p in row] for row in self.pmfs])

    def type_means(self) -> np.ndarray:
        """Mean execution time of each task type averaged over machine types."""
        return self.means.mean(axis=1)

    def task_type_objs(self) -> list[TaskType]:
        return [
            TaskType(i, name, dict(zip(self.machine_types, self.means[i].tolist())))
            for i, name in enumerate(self.task_types)
        ]

    def compacted(self, max_impulses: int) -> "PetMatrix":
        return PetMatrix(
            self.task_types,
            self.machine_types,
            [[compact_to(p, max_impulses) for p in row] for row in self.pmfs],
        )

    def flat(self):
        """Concatenated impulse arrays plus offsets, entry index = t * M + m."""
        cached = getattr(self, "_flat", None)
        if cached is None:
            entries = [p for row in self.pmfs for p in row]
            off = np.zeros(len(entries) + 1, dtype=np.int64)
            off[1:] = np.cumsum([len(p) for p in entries])
            t = np.concatenate([p.times for p in entries]).astype(np.int64)
            pr = np.concatenate([p.probs for p in entries]).astype(np.float64)
            cached = self._flat = (t, pr, off)
        return cached

    def quantile_table(self):
        """Per entry (times, normalized cdf) for inverse-CDF sampling."""
        cached = getattr(self, "_qt", None)
        if cached is None:
            cached = self._qt = [
                [(p.times, np.cumsum(p.probs) / p.probs.sum()) for p in row] for row in self.pmfs
            ]
        return cached

    def sample(self, task_type: int, machine_type: int, u: float) -> int:
        t, c = self.quantile_table()[task_type][machine_type]
        i = int(np.searchsorted(c, u, side="left"))
        return int(t[min(i, len(t) - 1)])


# -- generation -----------------------------------------------------------------


def generate_pet(
    means,
    task_types: list[str] | None = None,
    machine_types: list[str] | None = None,
    shape_range: tuple[float, float] = (1.0, 20.0),
    samples: int = 500,
    seed: int = 0,
) -> PetMatrix:
    """Histogram gamma samples into one PMF per (task type, machine type).

    For every entry a shape is drawn uniformly from ``shape_range`` and
    ``samples`` gamma variates with the entry's mean are binned at one time
    unit.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.size == 0:
        raise WorkloadError("means must be a non-empty task x machine matrix")
    if np.any(~np.isfinite(means)) or np.any(means <= 0):
        raise WorkloadError("execution means must be positive")
    nt, nm = means.shape
    task_types = task_types or [f"t{i}" for i in range(nt)]
    machine_types = machine_types or [f"m{j}" for j in range(nm)]
    rng = np.random.default_rng(seed)
    lo, hi = shape_range
    rows = []
    for i in range(nt):
        row = []
        for j in range(nm):
            shape = rng.uniform(lo, hi) if hi > lo else lo
            draws = rng.gamma(shape, means[i, j] / shape, size=samples)
            row.append(Pmf.from_samples(draws))
        rows.append(row)
    return PetMatrix(task_types, machine_types, rows)


def assign_deadline(arrival: int, avg_type: float, avg_all: float, beta: float) -> int:
    """Arrival plus the type's mean duration plus a slack of ``beta * avg_all``."""
    return int(arrival) + int(round(avg_type)) + int(math.floor(beta * avg_all))


@dataclass
class ArrivalConfig:
    total_tasks: int = 1200
    span: int = 6000
    pattern: str = "spiky"
    # burst rate multiplier and burst length as a fraction of the base period
    multiplier: float = 3.0
    burst_fraction: float = 1.0 / 3.0
    cycles: int = 10
    beta_range: tuple[float, float] = (0.8, 2.5)
    seed: int = 0
    # tasks arriving together with consecutive data segments
    group_size: int = 1
    data_pool_size: int = 200
    segments_per_item: int = 20
    zipf_exponent: float = 1.0
    type_weights: list[float] | None = field(default=None)

    def __post_init__(self):
        if self.total_tasks <= 0:
            raise WorkloadError("total_tasks must be positive")
        if self.span <= 0:
            raise WorkloadError("span must be positive")
        if self.pattern not in PATTERNS:
            raise WorkloadError(f"unknown arrival pattern {self.pattern!r}")
        if self.pattern != "constant" and self.multiplier <= 1:
            raise WorkloadError("burst multiplier must exceed 1")
        if self.group_size < 1:
            raise WorkloadError("group_size must be >= 1")
        if self.segments_per_item < self.group_size:
            raise WorkloadError("segments_per_item must be at least group_size")

    @classmethod
    def spiky(cls, **kw) -> "ArrivalConfig":
        kw.setdefault("multiplier", 3.0)
        kw.setdefault("burst_fraction", 1 / 3)
        return cls(pattern="spiky", **kw)

    @classmethod
    def base_high(cls, **kw) -> "ArrivalConfig":
        kw.setdefault("cycles", 15)
        kw.setdefault("multiplier", 2.0)
        kw.setdefault("burst_fraction", 1 / 4)
        return cls(pattern="basehigh", **kw)


def _split(total: int, weights) -> list[int]:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = w * total
    n = np.floor(raw).astype(int)
    rest = total - int(n.sum())
    order = np.argsort(-(raw - n), kind="stable")
    n[order[:rest]] += 1
    return n.tolist()


def _warp(op_times: np.ndarray, cfg: ArrivalConfig) -> np.ndarray:
    """Map evenly-loaded times onto the burst pattern, preserving totals.

    Each cycle is a base period followed by a burst whose arrival rate is
    ``multiplier`` times higher; the mapping is the inverse of the normalized
    cumulative arrival intensity.
    """
    if cfg.pattern == "constant":
        return op_times
    cycle = cfg.span / cfg.cycles
    base = cycle / (1.0 + cfg.burst_fraction)
    burst = cycle - base
    per_cycle = base + cfg.multiplier * burst
    scale = per_cycle / cycle  # intensity units per real time unit, on average
    n_cycles = int(np.ceil(max(op_times.max(initial=0.0), cfg.span) / cycle)) + 1
    real = [0.0]
    cum = [0.0]
    for k in range(n_cycles):
        real += [k * cycle + base, (k + 1) * cycle]
        cum += [k * per_cycle + base, (k + 1) * per_cycle]
    return np.interp(op_times * scale, np.array(cum), np.array(real))


def generate_trace(cfg: ArrivalConfig, pet: PetMatrix, types: list[TaskType] | None = None) -> list[TaskSpec]:
    """Sample a deadline-constrained trace, sorted by arrival then id."""
    types = types if types is not None else pet.task_type_objs()
    if not types:
        raise WorkloadError("at least one task type is required")
    rng = np.random.default_rng(cfg.seed)
    g = cfg.group_size
    n_groups = -(-cfg.total_tasks // g)
    weights = cfg.type_weights or [1.0] * len(types)
    per_type = _split(n_groups, weights)

    type_avg = pet.type_means()
    avg_all = float(type_avg.mean())

    rows = []  # (arrival, type, group index within type)
    for ti, n in enumerate(per_type):
        if n == 0:
            continue
        gap = cfg.span / n
        # gamma inter-arrivals: mean = gap, variance = 10% of the mean
        draws = rng.gamma(gap / 0.1, 0.1, size=n)
        start = rng.uniform(0.0, gap) - draws[0]
        op = start + np.cumsum(draws)
        op = np.maximum(op, 0.0)
        arr = np.floor(_warp(op, cfg) + 0.5).astype(np.int64)
        rows.extend((int(a), ti, k) for k, a in enumerate(arr))
    rows.sort()

    pool = cfg.data_pool_size
    ranks = np.arange(1, pool + 1, dtype=np.float64)
    pop = ranks ** (-cfg.zipf_exponent)
    pop /= pop.sum()

    specs = []
    made = 0
    lo, hi = cfg.beta_range
    for arrival, ti, _ in rows:
        item = int(rng.choice(pool, p=pop))
        seg0 = int(rng.integers(0, cfg.segments_per_item - g + 1))
        tt = types[ti]
        for s in range(g):
            if made >= cfg.total_tasks:
                break
            beta = rng.uniform(lo, hi)
            dl = assign_deadline(arrival, type_avg[tt.id], avg_all, beta)
            specs.append(
                TaskSpec(
                    id=made,
                    type=tt.id,
                    arrival=arrival,
                    deadline=dl,
                    data_id=f"d{item:04d}/s{seg0 + s:03d}",
                    operation=tt.operation,
                    params=tt.params,
                )
            )
            made += 1
    return specs


# -- files ------------------------------------------------------------------------


def load_means(path) -> tuple[list[str], list[str], np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise WorkloadError(f"{path}: cannot read means file: {exc}") from exc
    for key in ("task_types", "machine_types", "means"):
        if key not in doc:
            raise WorkloadError(f"{path}: missing field {key!r}")
    means = np.asarray(doc["means"], dtype=np.float64)
    if means.shape != (len(doc["task_types"]), len(doc["machine_types"])):
        raise WorkloadError(f"{path}: means shape {means.shape} does not match the type lists")
    return list(doc["task_types"]), list(doc["machine_types"]), means


def default_means(name: str = "default_means.json"):
    return load_means(DATA_DIR / name)


def pet_to_json(pet: PetMatrix) -> str:
    """JSON with ``pmfs`` listed task-major: entry ``t * n_machines + m``."""
    doc = {
        "task_types": pet.task_types,
        "machine_types": pet.machine_types,
        "pmfs": [p.to_pairs() for row in pet.pmfs for p in row],
    }
    return json.dumps(doc, separators=(",", ":"))


def save_pet(pet: PetMatrix, path) -> None:
    Path(path).write_text(pet_to_json(pet))


def load_pet(path) -> PetMatrix:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("task_types", "machine_types", "pmfs"):
        if key not in doc:
            raise WorkloadError(f"{path}: missing field {key!r}")
    nt, nm = len(doc["task_types"]), len(doc["machine_types"])
    flat = doc["pmfs"]
    if len(flat) != nt * nm:
        raise WorkloadError(f"{path}: expected {nt * nm} PMFs, found {len(flat)}")
    rows = []
    off = []
    for i in range(nt):
        row = []
        for j in range(nm):
            pairs = flat[i * nm + j]
            p = Pmf.from_pairs((t, pr) for t, pr in pairs)
            if abs(p.mass - 1.0) > 1e-6:
                off.append(f"({doc['task_types'][i]}, {doc['machine_types'][j]}) mass={p.mass:.6g}")
            row.append(p)
        rows.append(row)
    if off:
        warnings.warn(f"{path}: non-normalized PET entries: " + "; ".join(off), stacklevel=2)
    return PetMatrix(doc["task_types"], doc["machine_types"], rows)


def trace_to_csv(trace: list[TaskSpec]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for t in trace:
        w.writerow([t.id, t.type, t.arrival, t.deadline, t.data_id, t.operation, t.params, t.priority])
    return buf.getvalue()


def save_trace(trace: list[TaskSpec], path) -> None:
    Path(path).write_text(trace_to_csv(trace))


def load_trace(path, n_types: int | None = None) -> list[TaskSpec]:
    """Parse a trace CSV; ``n_types`` enables the task-type range check."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise WorkloadError(f"{path}: empty trace file") from None
        header = [h.strip() for h in header]
        missing = [c for c in TRACE_COLUMNS if c not in header]
        if missing:
            raise WorkloadError(f"{path}: missing column(s): {', '.join(missing)}")
        col = {c: header.index(c) for c in TRACE_COLUMNS}
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise WorkloadError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                spec = TaskSpec(
                    id=int(row[col["id"]]),
                    type=int(row[col["type"]]),
                    arrival=int(row[col["arrival"]]),
                    deadline=int(row[col["deadline"]]),
                    data_id=row[col["data_id"]],
                    operation=row[col["operation"]],
                    params=row[col["params"]],
                    priority=int(row[col["priority"]] or 0),
                )
            except ValueError as exc:
                raise WorkloadError(f"{path}:{lineno}: {exc}") from exc
            if n_types is not None and not 0 <= spec.type < n_types:
                raise WorkloadError(f"{path}:{lineno}: unknown task type id {spec.type}")
            out.append(spec)
    return out
