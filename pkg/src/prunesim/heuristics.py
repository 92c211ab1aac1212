"""Mapping heuristics.

Every heuristic maps tasks from the batch queue onto machine queues through a
:class:`VirtualQueue`, a scratch copy of the machine state that accumulates
provisional assignments.  Ties go to the lowest machine id, then the lowest
task id.
"""

from __future__ import annotations

import itertools
import math
from typing import Protocol

import numpy as np

IMMEDIATE = ("rr", "met", "mct", "kpb")
BATCH = ("mm", "msd", "mmu", "moc")
HOMOGENEOUS = ("fcfs-rr", "edf", "sjf", "fcfs", "mu")
PROBABILISTIC = ("pam", "pamf")
PROB_NEEDED = ("moc", "pam", "pamf")

MOC_CULL = 0.3
MOC_TOP = 3


class ChanceModel(Protocol):
    def matrix(self, jobs, machines) -> np.ndarray: ...

    def assign(self, job, machine: int) -> None: ...

    def tail_mean(self, machine: int) -> float: ...


def parse_heuristic(spec: str) -> tuple[str, dict]:
    """Split an id such as ``kpb:25`` into name and parameters."""
    name, _, arg = spec.strip().lower().partition(":")
    known = IMMEDIATE + BATCH + HOMOGENEOUS + PROBABILISTIC
    if name not in known:
        raise ValueError(f"unknown heuristic {spec!r}; choose from {', '.join(known)}")
    params = {}
    if name == "kpb":
        try:
            k = float(arg) if arg else 50.0
        except ValueError:
            raise ValueError(f"bad KPB percentage in {spec!r}") from None
        if not 0 < k <= 100:
            raise ValueError("KPB percentage must lie in (0, 100]")
        params["k"] = k
    elif arg:
        raise ValueError(f"heuristic {name!r} takes no parameter")
    return name, params


class VirtualQueue:
    """Provisional view of the machine queues during one mapping event.

    ``ready[m]`` is the expected time machine ``m`` finishes its current
    queue, ``free[m]`` its number of empty slots and ``means[type, m]`` the
    mean execution time on it.  Jobs carrying more than one member use their
    own ``mu`` on every machine.
    """

    def __init__(self, now, ready, free, means, batch, chances: ChanceModel | None = None, thresholds=None):
        self.now = now
        self.ready = np.array(ready, dtype=np.float64)
        self.free = np.array(free, dtype=np.int64)
        self.means = np.asarray(means, dtype=np.float64)
        self.batch = list(batch)
        self.chances = chances
        # job -> deferring threshold; None disables deferral
        self.thresholds = thresholds
        self.assigned: list[tuple[object, int]] = []
        self.deferred: list = []
        self._done: set[int] = set()

    @property
    def n_machines(self) -> int:
        return len(self.ready)

    def free_machines(self) -> np.ndarray:
        return np.flatnonzero(self.free > 0)

    def exec_mean(self, job, m: int) -> float:
        if len(getattr(job, "members", ())) > 1:
            return float(job.mu)
        return float(self.means[job.type, m])

    def exec_rows(self, jobs) -> np.ndarray:
        rows = self.means[[j.type for j in jobs]].copy() if jobs else np.empty((0, self.n_machines))
        for i, j in enumerate(jobs):
            if len(getattr(j, "members", ())) > 1:
                rows[i, :] = j.mu
        return rows

    def completion(self, job, m: int) -> float:
        return self.ready[m] + self.exec_mean(job, m)

    def assign(self, job, m: int) -> None:
        if self.free[m] <= 0:
            raise RuntimeError(f"machine {m} has no free slot")
        if job.id in self._done:
            raise RuntimeError(f"task {job.id} assigned twice")
        self._done.add(job.id)
        self.free[m] -= 1
        self.ready[m] += self.exec_mean(job, m)
        self.batch.remove(job)
        self.assigned.append((job, m))
        if self.chances is not None:
            self.chances.assign(job, m)

    def defer(self, job) -> None:
        self.batch.remove(job)
        self.deferred.append(job)


def _argmin_first(values: np.ndarray) -> int:
    # np.argmin returns the first minimum, which is the lowest index
    return int(np.argmin(values))


# -- immediate mode ----------------------------------------------------------------


def map_immediate(kind: str, vq: VirtualQueue, state: dict | None = None, k: float = 50.0) -> list:
    """Map batch tasks one at a time in arrival order.

    ``state`` carries the round-robin cursor between mapping events.
    """
    state = state if state is not None else {}
    for job in sorted(vq.batch, key=lambda j: (j.arrival, j.id)):
        free = vq.free_machines()
        if free.size == 0:
            break
        if kind == "rr":
            m = _next_rr(vq, state)
        elif kind == "met":
            m = int(free[_argmin_first(vq.means[job.type, free])])
        elif kind == "mct":
            m = _min_completion(vq, job, free)
        elif kind == "kpb":
            m = _min_completion(vq, job, kpb_candidates(vq.means[job.type], free, k))
        else:
            raise ValueError(f"not an immediate-mode heuristic: {kind}")
        vq.assign(job, m)
    return vq.assigned


def kpb_candidates(mean_row: np.ndarray, machines: np.ndarray, k: float) -> np.ndarray:
    """The ceil(k%) of ``machines`` with the lowest mean execution time."""
    n = max(1, math.ceil(len(machines) * k / 100.0 - 1e-9))
    order = sorted(machines.tolist(), key=lambda m: (mean_row[m], m))
    return np.array(sorted(order[:n]), dtype=np.int64)


def _next_rr(vq: VirtualQueue, state: dict) -> int:
    n = vq.n_machines
    cur = state.get("rr", 0)
    for step in range(n):
        m = (cur + step) % n
        if vq.free[m] > 0:
            state["rr"] = (m + 1) % n
            return m
    raise RuntimeError("no free machine")


def _min_completion(vq: VirtualQueue, job, machines) -> int:
    machines = np.asarray(machines)
    comp = np.array([vq.completion(job, int(m)) for m in machines])
    return int(machines[_argmin_first(comp)])


# -- batch mode ------------------------------------------------------------------------


def _completion_matrix(vq: VirtualQueue, jobs, machines) -> np.ndarray:
    return vq.ready[machines][None, :] + vq.exec_rows(jobs)[:, machines]


def map_batch(kind: str, vq: VirtualQueue) -> list:
    """Two-phase batch heuristics (MM, MSD, MMU); MOC delegates to :func:`map_moc`."""
    if kind == "moc":
        return map_moc(vq)
    while vq.batch:
        free = vq.free_machines()
        if free.size == 0:
            break
        jobs = sorted(vq.batch, key=lambda j: j.id)
        comp = _completion_matrix(vq, jobs, free)
        best_idx = np.argmin(comp, axis=1)
        best_c = comp[np.arange(len(jobs)), best_idx]
        if kind == "mm":
            keys = [(best_c[i], free[best_idx[i]], j.id) for i, j in enumerate(jobs)]
        elif kind == "msd":
            keys = [(j.deadline, best_c[i], free[best_idx[i]], j.id) for i, j in enumerate(jobs)]
        elif kind == "mmu":
            keys = [(-urgency(j.deadline, best_c[i]), best_c[i], free[best_idx[i]], j.id) for i, j in enumerate(jobs)]
        else:
            raise ValueError(f"not a batch heuristic: {kind}")
        i = min(range(len(jobs)), key=keys.__getitem__)
        vq.assign(jobs[i], int(free[best_idx[i]]))
    return vq.assigned


def urgency(deadline: float, completion: float) -> float:
    slack = deadline - completion
    return math.inf if slack <= 0 else 1.0 / slack


def map_moc(vq: VirtualQueue) -> list:
    """Pairs under the culling threshold stay in the batch; the top pairs are
    tried in every order and the first assignment of the best order is
    committed, one assignment per round."""
    if vq.chances is None:
        raise ValueError("MOC needs a chance model")
    while vq.batch:
        free = vq.free_machines()
        if free.size == 0:
            break
        jobs = sorted(vq.batch, key=lambda j: j.id)
        ch = vq.chances.matrix(jobs, free)
        best_idx = np.argmax(ch, axis=1)
        best = ch[np.arange(len(jobs)), best_idx]
        pairs = [(best[i], jobs[i], int(free[best_idx[i]])) for i in range(len(jobs)) if best[i] >= MOC_CULL]
        if not pairs:
            break
        pairs.sort(key=lambda p: (-p[0], p[2], p[1].id))
        top = pairs[:MOC_TOP]
        if len(top) == 1:
            vq.assign(top[0][1], top[0][2])
            continue
        best_order, best_sum = None, -1.0
        for order in itertools.permutations(top):
            s = _order_score(vq, order)
            if s > best_sum + 1e-12:
                best_order, best_sum = order, s
        vq.assign(best_order[0][1], best_order[0][2])
    return vq.assigned


def _order_score(vq: VirtualQueue, order) -> float:
    """Summed success chance when the pairs are committed in ``order``."""
    snap = vq.chances.snapshot()
    free = vq.free.copy()
    total = 0.0
    for _, job, m in order:
        if free[m] <= 0:
            continue
        total += float(vq.chances.matrix([job], np.array([m]))[0, 0])
        vq.chances.assign(job, m)
        free[m] -= 1
    vq.chances.restore(snap)
    return total


# -- homogeneous baselines ----------------------------------------------------------------


def map_homogeneous(kind: str, vq: VirtualQueue, state: dict | None = None) -> list:
    """Order the batch by the policy, then place each task on a machine.

    ``fcfs-rr`` cycles over free machines; the others take the machine with
    the earliest expected completion.  ``fcfs`` keeps the batch-queue order
    as given and ``mu`` ranks by least slack (deadline minus mean).
    """
    state = state if state is not None else {}
    if kind == "fcfs-rr":
        order = sorted(vq.batch, key=lambda j: (j.arrival, j.id))
    elif kind == "fcfs":
        order = list(vq.batch)
    elif kind == "edf":
        order = sorted(vq.batch, key=lambda j: (j.deadline, j.id))
    elif kind == "sjf":
        order = sorted(vq.batch, key=lambda j: (float(np.mean(vq.exec_rows([j]))), j.id))
    elif kind == "mu":
        order = sorted(vq.batch, key=lambda j: (j.deadline - float(np.mean(vq.exec_rows([j]))), j.id))
    else:
        raise ValueError(f"not a homogeneous heuristic: {kind}")
    for job in order:
        free = vq.free_machines()
        if free.size == 0:
            break
        m = _next_rr(vq, state) if kind == "fcfs-rr" else _min_completion(vq, job, free)
        vq.assign(job, m)
    return vq.assigned


# -- pruning-aware ----------------------------------------------------------------------------


def map_pam(vq: VirtualQueue) -> list:
    """Phase 1 picks each task's highest-chance machine; phase 2 commits the
    pair with the earliest expected completion.  Tasks whose best chance is
    under their deferring threshold leave the batch for this event.

    Per-type threshold relaxations (the fairness variant) arrive through
    ``vq.thresholds``.
    """
    if vq.chances is None:
        raise ValueError("PAM needs a chance model")
    jobs = sorted(vq.batch, key=lambda j: j.id)
    if not jobs:
        return vq.assigned
    machines = np.arange(vq.n_machines)
    ch = vq.chances.matrix(jobs, machines)
    alive = np.ones(len(jobs), dtype=bool)
    thr = np.array([vq.thresholds(j) if vq.thresholds else 0.0 for j in jobs])
    exec_rows = vq.exec_rows(jobs)
    while alive.any():
        free = vq.free_machines()
        if free.size == 0:
            break
        sub = ch[:, free]
        best_idx = np.argmax(sub, axis=1)
        best = sub[np.arange(len(jobs)), best_idx]
        newly = alive & (best < thr)
        for i in np.flatnonzero(newly):
            vq.defer(jobs[i])
        alive &= ~newly
        if not alive.any():
            break
        cand = np.flatnonzero(alive)
        tails = np.array([vq.chances.tail_mean(int(m)) for m in free])
        ms = best_idx[cand]
        comp = tails[ms] + exec_rows[cand, free[ms]]
        keys = list(zip(comp.tolist(), free[ms].tolist(), [jobs[i].id for i in cand]))
        k = min(range(len(cand)), key=keys.__getitem__)
        i = int(cand[k])
        m = int(free[ms[k]])
        vq.assign(jobs[i], m)
        alive[i] = False
        if vq.free[m] > 0:
            rest = np.flatnonzero(alive)
            if rest.size:
                ch[rest, m] = vq.chances.matrix([jobs[r] for r in rest], np.array([m]))[:, 0]
    return vq.assigned


def run_heuristic(name: str, params: dict, vq: VirtualQueue, state: dict) -> list:
    if name in IMMEDIATE:
        return map_immediate(name, vq, state, **params)
    if name in BATCH:
        return map_batch(name, vq)
    if name in HOMOGENEOUS:
        return map_homogeneous(name, vq, state)
    if name in PROBABILISTIC:
        return map_pam(vq)
    raise ValueError(f"unknown heuristic {name!r}")
