"""Admission-time task merging.

Arriving tasks are matched against batch-queue tasks at three similarity
levels through hash tables.  A candidate merge is evaluated on a virtual copy
of the queues and accepted according to the merging policy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .workload import DATA_DIR

TASK, DATA_OP, DATA = "task", "data-op", "data"
LEVELS = (TASK, DATA_OP, DATA)
# weaker levels share less work
_STRENGTH = {TASK: 2, DATA_OP: 1, DATA: 0}

POLICIES = ("conservative", "aggressive", "adaptive")
FINDERS = ("off", "logarithmic", "linear")
QUEUING = ("fcfs", "edf", "mu")

MAX_GROUP = 5


class TableConsistencyError(AssertionError):
    pass


@dataclass
class MergeConfig:
    policy: str = "adaptive"
    position_finder: str = "off"
    queuing: str = "fcfs"
    alpha: float = 2.0
    max_group: int = MAX_GROUP
    saving_table_path: str | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"merging.policy must be one of {POLICIES}")
        if self.position_finder not in FINDERS:
            raise ValueError(f"merging.position_finder must be one of {FINDERS}")
        if self.queuing not in QUEUING:
            raise ValueError(f"merging.queuing must be one of {QUEUING}")
        if self.position_finder != "off" and self.queuing != "fcfs":
            raise ValueError("a position finder needs the relaxable fcfs queue")
        if self.max_group < 2:
            raise ValueError("merging.max_group must be >= 2")


# -- similarity detection ----------------------------------------------------------


def level_keys(sig: tuple[str, str, str]) -> dict[str, tuple]:
    data_id, op, params = sig
    return {TASK: (data_id, op, params), DATA_OP: (data_id, op), DATA: (data_id,)}


class SimilarityTables:
    """One hash table per similarity level mapping a key to a live job."""

    def __init__(self):
        self.tables: dict[str, dict[tuple, object]] = {lv: {} for lv in LEVELS}
        self._owned: dict[int, list[tuple[str, tuple]]] = {}

    def __len__(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def find(self, sig) -> tuple[str, object] | None:
        """Probe the task level first, then data-and-operation, then data-only."""
        keys = level_keys(sig)
        for lv in LEVELS:
            ref = self.tables[lv].get(keys[lv])
            if ref is not None:
                return lv, ref
        return None

    def point(self, sig, ref) -> None:
        """Make every level's key of ``sig`` resolve to ``ref``."""
        owned = self._owned.setdefault(ref.id, [])
        for lv, k in level_keys(sig).items():
            self.tables[lv][k] = ref
            owned.append((lv, k))

    def remove(self, ref) -> int:
        """Delete every entry resolving to ``ref``; returns the count removed."""
        n = 0
        for lv, k in self._owned.pop(ref.id, []):
            if self.tables[lv].get(k) is ref:
                del self.tables[lv][k]
                n += 1
        return n

    def refs(self):
        for t in self.tables.values():
            yield from t.values()

    def dangling(self, live_ids: set[int]) -> list:
        return [r for r in self.refs() if r.id not in live_ids]

    def check(self, live_ids: set[int]) -> None:
        bad = self.dangling(live_ids)
        if bad:
            raise TableConsistencyError(f"{len(bad)} table entries point to non-live tasks")


def find_mergeable(sig, tables: SimilarityTables):
    return tables.find(sig)


def apply_table_update(event: str, tables: SimilarityTables, sig=None, task=None, merged=None, level=None) -> None:
    """Table maintenance for one admission or completion event.

    ``merged``: ``task`` was merged into ``merged`` at ``level``; task-level
    merges leave the tables untouched, other levels point the task's keys at
    the merged job.  ``declined``: the task's keys are redirected to the task.
    ``new``: the task's keys are inserted.  ``completed``: every entry
    pointing to ``task`` is removed.
    """
    if event == "merged":
        if level != TASK:
            tables.point(sig, merged)
    elif event in ("declined", "new"):
        tables.point(sig, task)
    elif event == "completed":
        tables.remove(task)
    else:
        raise ValueError(f"unknown table event {event!r}")


# -- execution model ------------------------------------------------------------------


@dataclass
class SavingModel:
    """Fractional execution-time saving by (similarity level, distinct group size)."""

    ratios: dict[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for (lv, g), r in self.ratios.items():
            if not 0.0 <= r < 1.0:
                raise ValueError(f"saving ratio for ({lv}, {g}) must lie in [0, 1)")

    @classmethod
    def load(cls, path=None) -> "SavingModel":
        path = Path(path or DATA_DIR / "saving.csv")
        ratios = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"level", "group_size", "ratio"} - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    ratios[(row["level"], int(row["group_size"]))] = float(row["ratio"])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return cls(ratios)

    def ratio(self, level: str, size: int) -> float:
        if level == TASK or size < 2:
            return 0.0
        sizes = [g for lv, g in self.ratios if lv == level]
        if not sizes:
            return 0.0
        g = min(size, max(sizes))
        while g >= 2 and (level, g) not in self.ratios:
            g -= 1
        return self.ratios.get((level, g), 0.0)


def weaker(a: str, b: str) -> str:
    return a if _STRENGTH[a] <= _STRENGTH[b] else b


def merged_exec_model(members: Sequence[tuple[float, float]], level: str, model: SavingModel) -> tuple[float, float]:
    """Mean and standard deviation of a merged job.

    ``members`` holds one ``(mean, std)`` per distinct signature.  A single
    signature (task-level duplicates) executes once; otherwise the summed
    work is reduced by the level's saving ratio.
    """
    if not members:
        raise ValueError("a merged job needs members")
    if len(members) == 1 or level == TASK:
        return float(members[0][0]), float(members[0][1])
    r = model.ratio(level, len(members))
    mu = (1.0 - r) * sum(m for m, _ in members)
    sigma = (1.0 - r) * math.sqrt(sum(s * s for _, s in members))
    return mu, sigma


def worst_case_exec(mu: float, sigma: float, alpha: float) -> float:
    return mu + alpha * sigma


def estimate_completion(now: float, exec_remaining: float, pending: Sequence[tuple[float, float]], task: tuple[float, float], alpha: float) -> float:
    """Now plus the executing task's remaining time, the worst-case estimates
    of everything pending ahead, and the task's own estimate."""
    ahead = sum(worst_case_exec(m, s, alpha) for m, s in pending)
    return now + exec_remaining + ahead + worst_case_exec(task[0], task[1], alpha)


def adapt_alpha(osl: float) -> float:
    return min(2.0, max(-2.0, 2.0 - 4.0 * osl))


def compute_osl(entries: Sequence[tuple[float, float, float, float]]) -> float:
    """Deadline-miss severity over queued tasks.

    Each entry is ``(completion, deadline, arrival, worst_case_exec)``.  A
    task contributes its lateness over its waitable time
    ``deadline - arrival - exec``; on-time and never-feasible tasks
    contribute zero.
    """
    if not entries:
        return 0.0
    total = 0.0
    for c, d, a, e in entries:
        w = d - a - e
        if w <= 0 or c <= d:
            continue
        total += (c - d) / w
    return total / len(entries)


# -- virtual queue ------------------------------------------------------------------


@dataclass(frozen=True)
class VItem:
    """A batch-queue entry as seen by the virtual queue."""

    key: int
    exec_est: float
    deadlines: tuple[int, ...]

    @property
    def deadline(self) -> int:
        return min(self.deadlines)


def schedule(ready: np.ndarray, items: Sequence[VItem]) -> np.ndarray:
    """List-schedule ``items`` in order onto machines free at ``ready``."""
    if not items:
        return np.empty(0)
    execs = np.fromiter((it.exec_est for it in items), dtype=np.float64, count=len(items))
    return kernels.list_schedule(np.asarray(ready, dtype=np.float64), execs)


def count_misses(items: Sequence[VItem], completions) -> list[int]:
    return [sum(1 for d in it.deadlines if c > d) for it, c in zip(items, completions)]


@dataclass(frozen=True)
class Impact:
    misses_with: int
    misses_without: int
    merged_meets_deadline: bool
    others_with: int = 0
    others_without: int = 0

    @property
    def harmless(self) -> bool:
        return self.misses_with <= self.misses_without


def evaluate_merge_impact(ready, without: Sequence[VItem], with_: Sequence[VItem], merged_key: int, member_keys=()) -> Impact:
    """Schedule both scenarios on a virtual queue and count deadline misses.

    ``member_keys`` identifies the items in ``without`` that become part of
    the merged job; every other item counts as an unrelated task.
    """
    c0 = schedule(ready, without)
    c1 = schedule(ready, with_)
    m0 = count_misses(without, c0)
    m1 = count_misses(with_, c1)
    related = set(member_keys) | {merged_key}
    o0 = sum(m for it, m in zip(without, m0) if it.key not in related)
    o1 = sum(m for it, m in zip(with_, m1) if it.key != merged_key)
    ok = True
    for it, c in zip(with_, c1):
        if it.key == merged_key:
            ok = c <= it.deadline
    return Impact(sum(m1), sum(m0), ok, o1, o0)


def decide_merge(policy: str, impact: Impact | None) -> bool:
    """Aggressive always merges; the other policies merge iff no extra misses."""
    if policy == "aggressive":
        return True
    if impact is None:
        raise ValueError(f"policy {policy!r} needs an impact evaluation")
    return impact.harmless


def position_logarithmic(n: int, probe: Callable[[int], tuple[bool, bool]]):
    """Binary probing over ``n`` positions, starting in the middle.

    ``probe(p)`` returns ``(merged_ok, others_ok)``.  Returns the accepted
    position (or ``None``) and the number of probes used.
    """
    lo, hi = 0, n - 1
    probes = 0
    while lo <= hi:
        p = (lo + hi) // 2
        probes += 1
        merged_ok, others_ok = probe(p)
        if merged_ok and others_ok:
            return p, probes
        if not merged_ok and not others_ok:
            return None, probes
        if not merged_ok:
            hi = p - 1
        else:
            lo = p + 1
    return None, probes


def position_linear(merged_completions: Sequence[float], deadline: float, harmless: Callable[[int], bool]):
    """Latest position at which the merged job meets ``deadline``, accepted
    only if the impact there adds no misses."""
    best = None
    for p, c in enumerate(merged_completions):
        if c <= deadline:
            best = p
    if best is None or not harmless(best):
        return None
    return best


# -- runtime state -------------------------------------------------------------------


class Merger:
    """Admission control over the batch queue for one simulation run.

    Jobs must expose ``id``, ``arrival``, ``members`` (task specs),
    ``mu``/``sigma`` (scheduler estimates), ``level`` and ``sigs``.  The engine
    supplies ``exec_model(spec) -> (mean, std)`` and
    ``ready(alpha) -> per-machine free-time estimates``.
    """

    def __init__(self, cfg: MergeConfig, saving: SavingModel | None = None):
        self.cfg = cfg
        self.saving = saving or SavingModel.load(cfg.saving_table_path)
        self.tables = SimilarityTables()
        self.alpha = cfg.alpha
        self.stats = {"merge_" + lv: 0 for lv in LEVELS}
        self.stats.update(merge_declined=0, merge_full=0)

    # ordering of the batch queue under the configured policy
    def order(self, batch: list) -> list:
        if self.cfg.queuing == "fcfs":
            return list(batch)
        if self.cfg.queuing == "edf":
            return sorted(batch, key=lambda j: (j.deadline, j.id))
        return sorted(batch, key=lambda j: (j.deadline - j.mu, j.id))

    def _vitem(self, job, alpha, mu=None, sigma=None, deadlines=None) -> VItem:
        mu = job.mu if mu is None else mu
        sigma = job.sigma if sigma is None else sigma
        dl = tuple(s.deadline for s in job.members) if deadlines is None else deadlines
        return VItem(job.id, worst_case_exec(mu, sigma, alpha), dl)

    def osl(self, now, batch, pending_entries, ready) -> float:
        """Severity over machine-pending entries plus the scheduled batch."""
        order = self.order(batch)
        items = [self._vitem(j, self.alpha) for j in order]
        comp = schedule(ready, items)
        entries = list(pending_entries)
        for j, it, c in zip(order, items, comp):
            for s in j.members:
                entries.append((c, s.deadline, s.arrival, it.exec_est))
        return compute_osl(entries)

    def admit(self, job, batch: list, now, ready_fn, exec_model, pending_fn=None):
        """Merge ``job`` into a batch job or insert it; returns the host job
        when merged, else ``None``.  ``batch`` is modified in place."""
        spec = job.members[0]
        sig = spec.signature
        hit = self.tables.find(sig)
        if hit is None:
            batch.append(job)
            apply_table_update("new", self.tables, sig, job)
            return None
        level, host = hit
        if len(host.members) >= self.cfg.max_group:
            self.stats["merge_full"] += 1
            batch.append(job)
            apply_table_update("declined", self.tables, sig, job)
            return None

        if self.cfg.policy == "adaptive":
            ready = ready_fn(self.alpha)
            pend = pending_fn(self.alpha) if pending_fn else []
            self.alpha = adapt_alpha(self.osl(now, batch, pend, ready))
        alpha = 2.0 if self.cfg.policy == "conservative" else self.alpha

        new_level = weaker(host.level, level) if len(host.members) > 1 else level
        sigs = dict(host.sigs)
        sigs.setdefault(sig, exec_model(spec))
        mu_m, sigma_m = merged_exec_model(list(sigs.values()), new_level, self.saving)
        merged_deadlines = tuple(s.deadline for s in host.members) + (spec.deadline,)

        position = batch.index(host)
        accept = True
        if self.cfg.policy != "aggressive" or self.cfg.position_finder != "off":
            accept, found = self._place(batch, host, job, alpha, ready_fn(alpha), mu_m, sigma_m, merged_deadlines)
            if found is not None:
                position = found
        if not accept:
            self.stats["merge_declined"] += 1
            batch.append(job)
            apply_table_update("declined", self.tables, sig, job)
            return None

        host.members.append(spec)
        host.sigs = sigs
        host.level = new_level
        host.mu, host.sigma = mu_m, sigma_m
        host.deadline = min(merged_deadlines)
        if batch[position] is not host:
            batch.remove(host)
            batch.insert(position, host)
        self.stats["merge_" + level] += 1
        apply_table_update("merged", self.tables, sig, job, merged=host, level=level)
        return host

    def _place(self, batch, host, job, alpha, ready, mu_m, sigma_m, deadlines):
        """Evaluate the merge and, with a position finder, choose where the
        merged job goes.  Returns ``(accept, position)``; a ``None`` position
        keeps the host's slot."""
        fcfs = self.cfg.queuing == "fcfs"
        base = [self._vitem(j, alpha) for j in batch]
        jit = self._vitem(job, alpha)
        merged = VItem(host.id, worst_case_exec(mu_m, sigma_m, alpha), deadlines)
        rest_jobs = [j for j in batch if j is not host]
        rest = [it for it in base if it.key != host.id]
        member_keys = (host.id, job.id)
        if fcfs:
            without = base + [jit]
        else:
            without = self._sorted_items(batch + [job], base + [jit])

        def with_at(p):
            if fcfs:
                return rest[:p] + [merged] + rest[p:]
            shadow = _Shadow(host.id, merged.deadline, mu_m)
            return self._sorted_items(rest_jobs + [shadow], rest + [merged])

        def impact_at(p):
            return evaluate_merge_impact(ready, without, with_at(p), host.id, member_keys)

        finder = self.cfg.position_finder
        if finder == "off":
            return decide_merge(self.cfg.policy, impact_at(batch.index(host))), None
        if finder == "linear":
            execs = np.fromiter((it.exec_est for it in rest), dtype=np.float64, count=len(rest))
            comps = kernels.insertion_completions(np.asarray(ready, dtype=np.float64), execs, merged.exec_est)
            p = position_linear(comps, merged.deadline, lambda q: impact_at(q).harmless)
        else:

            def probe(q):
                imp = impact_at(q)
                return imp.merged_meets_deadline, imp.others_with <= imp.others_without

            p, _ = position_logarithmic(len(rest) + 1, probe)
        if p is None:
            return self.cfg.policy == "aggressive", None
        return True, p

    def _sorted_items(self, jobs, items):
        keyed = list(zip(jobs, items))
        if self.cfg.queuing == "edf":
            keyed.sort(key=lambda ji: (ji[1].deadline, ji[0].id))
        else:
            keyed.sort(key=lambda ji: (ji[1].deadline - ji[0].mu, ji[0].id))
        return [it for _, it in keyed]

    def on_dispatch(self, job) -> None:
        apply_table_update("completed", self.tables, task=job)


@dataclass
class _Shadow:
    id: int
    deadline: int
    mu: float
