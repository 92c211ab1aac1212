"""Discrete-event simulation of batch-mode mapping onto machine queues.

Events at the same time are processed in the order completion, expiry,
arrival (then by task id); a single mapping event follows when anything
freed a slot or an arrival found one.  Execution times are drawn by inverse
transform from the full PET with one uniform variate per task, so a task
takes the same quantile of its distribution on whichever machine runs it.
"""

from __future__ import annotations

import heapq
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .heuristics import PROB_NEEDED, PROBABILISTIC, VirtualQueue, parse_heuristic, run_heuristic
from .merger import MergeConfig, Merger, SavingModel, TASK, worst_case_exec
from .metrics import DROPPED, LATE, ONTIME, MachineRates, MetricsReport, TaskRecord, finalize
from .pmf import (
    Pmf,
    compact,
    compact_to,
    convolve,
    convolve_no_drop,
    fast_success_chance,
    shift,
    skewness,
    success_chance,
)
from .pruner import (
    PrunerConfig,
    PrunerState,
    SufferageMap,
    adjusted_drop_threshold,
    competency_level,
    defer_pass,
    drop_pass,
    instantaneous_robustness,
    selective_factor,
    toggle_dropping,
    update_defer_threshold,
    update_oversubscription,
)
from .workload import PetMatrix, TaskSpec

COMPLETE, EXPIRE, ARRIVE = 0, 1, 2
_KIND_NAME = {COMPLETE: "complete", EXPIRE: "expire", ARRIVE: "arrive"}

# job states
BATCH, QUEUED, RUNNING, DONE = "batch", "queued", "running", "done"


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    machines: int = 8
    homogeneous: bool = False
    capacity: int = 3
    heuristic: str = "pam"
    pruning: PrunerConfig | None = None
    merging: MergeConfig | None = None
    exact: bool = False
    drop_expired: bool = True
    # dropping regime assumed when chaining completion PMFs; defaults to
    # "evict" when expired tasks are removed and "none" otherwise
    regime: str | None = None
    tail_impulses: int = 128
    pet_impulses: int = 48
    seed: int = 0
    log_events: bool = False

    def __post_init__(self):
        if isinstance(self.pruning, dict):
            self.pruning = PrunerConfig(**self.pruning)
        if isinstance(self.merging, dict):
            self.merging = MergeConfig(**self.merging)
        if self.machines < 1:
            raise ConfigError("machines must be >= 1")
        if self.capacity < 1:
            raise ConfigError("capacity must be >= 1")
        try:
            self.heuristic_name, self.heuristic_params = parse_heuristic(self.heuristic)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.regime is None:
            self.regime = "evict" if self.drop_expired else "none"
        if self.regime not in ("none", "pending", "evict"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.tail_impulses < 4 or self.pet_impulses < 4:
            raise ConfigError("compaction limits must be >= 4")
        if self.merging is not None:
            if self.heuristic_name in PROB_NEEDED or self.pruning is not None:
                raise ConfigError("merging runs with mean-based heuristics and no pruning")
            if self.drop_expired:
                raise ConfigError("merging mode requires drop_expired = false")

    def key(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        d.pop("log_events", None)
        return d


class Job:
    """Schedulable unit: one task, or several merged tasks sharing an execution."""

    __slots__ = (
        "id", "type", "arrival", "deadline", "members", "mu", "sigma", "level", "sigs",
        "state", "machine", "start", "duration", "token",
    )

    def __init__(self, spec: TaskSpec, mu: float = 0.0, sigma: float = 0.0):
        self.id = spec.id
        self.type = spec.type
        self.arrival = spec.arrival
        self.deadline = spec.deadline
        self.members = [spec]
        self.mu = mu
        self.sigma = sigma
        self.level = TASK
        self.sigs = {spec.signature: (mu, sigma)}
        self.state = BATCH
        self.machine = -1
        self.start = -1
        self.duration = 0
        self.token = 0

    def __repr__(self):
        return f"Job({self.id}, type={self.type}, deadline={self.deadline}, members={len(self.members)})"


class Machine:
    __slots__ = ("id", "mtype", "queue", "running", "start", "busy", "token")

    def __init__(self, mid: int, mtype: int):
        self.id = mid
        self.mtype = mtype
        self.queue: list[Job] = []
        self.running = False
        self.start = 0
        self.busy = 0
        self.token = 0

    @property
    def pending(self) -> list[Job]:
        return self.queue[1:] if self.running else self.queue


def idle_tail(now: int) -> Pmf:
    return Pmf.delta(now)


def remaining_pmf(pet: Pmf, start: int, now: int) -> Pmf:
    """Absolute completion PMF of a task started at ``start`` still running at ``now``."""
    cond = pet.condition_after(now - start)
    if cond is None:
        return Pmf.delta(now + 1)
    return shift(cond, start)


def chain(head: Pmf, head_job, jobs, pet_of, regime: str, squeeze=None, skew: bool = True):
    """Per-position (chance, skew) and the final machine free-time PMF.

    ``head`` is the executing task's absolute completion PMF (with
    ``head_job`` its job) or the idle machine's point mass.  Each queued
    job's completion PMF is its execution convolved with its predecessor's
    free-time PMF, which is then advanced under ``regime``.  With ``skew``
    off the skew slots hold 0 and the completion PMFs are never built.
    """
    stats = []
    free = head
    if head_job is not None:
        stats.append((success_chance(head, head_job.deadline), skewness(head) if skew else 0.0))
        if regime == "evict" and head.last > head_job.deadline:
            free = compact(head, 1, head.first, max(head.first, head_job.deadline))
    for job in jobs:
        pet = pet_of(job)
        if skew or regime == "none":
            pct = convolve_no_drop(free, pet)
            stats.append((success_chance(pct, job.deadline), skewness(pct) if skew else 0.0))
        else:
            stats.append((fast_success_chance(pet, free, job.deadline), 0.0))
        free = convolve(free, pet, job.deadline, regime) if regime != "none" else pct
        if squeeze is not None:
            free = squeeze(free)
    return stats, free


class PmfChanceModel:
    """Success chances against the machines' provisional free-time PMFs.

    Approximate mode memoizes each machine's tail and advances it by one
    convolution per provisional assignment, using the fast two-pointer
    success chance.  Exact mode rebuilds the whole chain for every query
    and convolves each candidate in full.
    """

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        n = len(sim.machines)
        self.extra: list[list[Job]] = [[] for _ in range(n)]
        self.tails: list[Pmf | None] = [None] * n

    def tail(self, m: int) -> Pmf:
        if self.sim.cfg.exact:
            return self.sim.machine_chain(m, self.extra[m], memo=False)[1]
        t = self.tails[m]
        if t is None:
            t = self.tails[m] = self.sim.machine_chain(m, self.extra[m])[1]
        return t

    def assign(self, job: Job, m: int) -> None:
        self.extra[m].append(job)
        if self.sim.cfg.exact or self.tails[m] is None:
            return
        sim = self.sim
        pet = sim.sched_pet(job, m)
        t = convolve(self.tails[m], pet, job.deadline, sim.cfg.regime) if sim.cfg.regime != "none" else convolve_no_drop(self.tails[m], pet)
        self.tails[m] = sim.squeeze(t)

    def tail_mean(self, m: int) -> float:
        return self.tail(m).mean()

    def snapshot(self):
        return [list(e) for e in self.extra], list(self.tails)

    def restore(self, snap) -> None:
        self.extra, self.tails = [list(e) for e in snap[0]], list(snap[1])

    def matrix(self, jobs, machines) -> np.ndarray:
        machines = np.asarray(machines, dtype=np.int64)
        sim = self.sim
        if len(jobs) == 0 or machines.size == 0:
            return np.zeros((len(jobs), machines.size))
        if sim.cfg.exact:
            out = np.zeros((len(jobs), machines.size))
            for k, m in enumerate(machines.tolist()):
                for b, job in enumerate(jobs):
                    tail = self.tail(m)
                    out[b, k] = success_chance(convolve_no_drop(tail, sim.sched_pet(job, m)), job.deadline)
            return out
        tails = [self.tail(int(m)) for m in machines]
        toff = np.zeros(len(tails) + 1, dtype=np.int64)
        toff[1:] = np.cumsum([len(t) for t in tails])
        tt = np.concatenate([t.times for t in tails])
        tp = np.concatenate([t.probs for t in tails])
        pt, pp, poff = sim.pet_flat
        types = np.fromiter((j.type for j in jobs), dtype=np.int64, count=len(jobs))
        entry = np.ascontiguousarray(types[:, None] * sim.n_mtypes + sim.mtype_arr[machines][None, :])
        dls = np.fromiter((j.deadline for j in jobs), dtype=np.int64, count=len(jobs))
        out = kernels.chance_matrix(pt, pp, poff, entry, tt, tp, toff, dls)
        return np.clip(out, 0.0, 1.0)


class Simulator:
    def __init__(self, cfg: SimConfig, trace: list[TaskSpec], pet: PetMatrix, rates: MachineRates | None = None, saving: SavingModel | None = None):
        self.cfg = cfg
        self.pet = pet
        self.rates = rates
        self.trace = sorted(trace, key=lambda s: (s.arrival, s.id))
        nt, nmt = pet.shape
        for s in self.trace:
            if not 0 <= s.type < nt:
                raise ConfigError(f"task {s.id} has unknown type {s.type}")
        if cfg.merging is not None and any(not s.data_id for s in self.trace):
            raise ConfigError("merging needs a data_id on every task")
        self.n_mtypes = nmt
        mtypes = [0] * cfg.machines if cfg.homogeneous else [m % nmt for m in range(cfg.machines)]
        self.mtype_arr = np.array(mtypes, dtype=np.int64)
        self.machines = [Machine(i, t) for i, t in enumerate(mtypes)]
        self.machine_type_names = [pet.machine_types[t] for t in mtypes]
        if rates is None:
            # the bundled table only prices the bundled machine types
            default = MachineRates.load()
            if all(n in default.price_per_sec and n in default.power_w for n in self.machine_type_names):
                self.rates = default

        self.sched = pet if cfg.exact else pet.compacted(cfg.pet_impulses)
        self.pet_flat = self.sched.flat()
        self.means_m = pet.means[:, self.mtype_arr]
        used = sorted(set(mtypes))
        self.type_mu = pet.means[:, used].mean(axis=1)
        self.type_sigma = pet.stds[:, used].mean(axis=1)

        rng = np.random.default_rng(cfg.seed)
        u = rng.random(len(self.trace))
        self.u = {s.id: float(x) for s, x in zip(self.trace, u)}
        self.specs = {s.id: s for s in self.trace}

        self.name = cfg.heuristic_name
        self.hstate: dict = {}
        self.pcfg = cfg.pruning
        self.pstate = PrunerState.from_config(cfg.pruning) if cfg.pruning else None
        fairness = cfg.pruning.fairness if (cfg.pruning and self.name == "pamf") else 0.0
        self.sufferage = SufferageMap(fairness) if fairness > 0 else None
        self.merger = Merger(cfg.merging, saving) if cfg.merging else None
        self.saving = self.merger.saving if self.merger else None

        self.now = 0
        self.batch: list[Job] = []
        self.job_of: dict[int, Job] = {}
        self.records: list[TaskRecord] = []
        self.events: list = []
        self.log: list[dict] = []
        self.mapping_time = 0.0
        self.counters = {
            "mapping_events": 0, "dropped_expired": 0, "dropped_pruned": 0, "evicted": 0,
            "deferrals": 0, "toggles": 0,
        }
        self._chain_cache: dict = {}
        self._horizon = 0

    # -- model helpers ----------------------------------------------------------

    def sched_pet(self, job: Job, m: int) -> Pmf:
        return self.sched.pmfs[job.type][self.machines[m].mtype]

    def squeeze(self, p: Pmf) -> Pmf:
        if self.cfg.exact:
            return p
        return compact_to(p, self.cfg.tail_impulses, max_t=self._horizon + 1)

    def machine_chain(self, m: int, extra=(), memo: bool = True, queue=None, skew: bool = False):
        """Chain over the machine's queue (or ``queue``) plus provisional jobs.

        In approximate mode results persist across mapping events until the
        queue changes, so an executing task keeps the conditioning it had
        when the entry was built.
        """
        mach = self.machines[m]
        q = mach.queue if queue is None else queue
        running = mach.running and bool(q) and q[0] is mach.queue[0]
        anchor = mach.start if running and not self.cfg.exact else self.now
        key = (m, tuple(j.id for j in q), tuple(j.id for j in extra), anchor, running, skew)
        cache = self._chain_cache
        if memo and key in cache:
            return cache[key]
        if running:
            head_job = q[0]
            head = remaining_pmf(self.sched_pet(head_job, m), mach.start, self.now)
            rest = list(q[1:])
        else:
            head_job = None
            head = idle_tail(self.now)
            rest = list(q)
        res = chain(head, head_job, rest + list(extra), lambda j: self.sched_pet(j, m), self.cfg.regime, self.squeeze, skew)
        if memo:
            if len(cache) > 20000:
                cache.clear()
            cache[key] = res
        return res

    def ready_times(self) -> np.ndarray:
        """Mean-based expected time each machine drains its queue."""
        out = np.empty(len(self.machines))
        for m, mach in enumerate(self.machines):
            t = float(self.now)
            for k, job in enumerate(mach.queue):
                mu = self._mean(job, m)
                if k == 0 and mach.running:
                    t = max(t, mach.start + mu)
                else:
                    t += mu
            out[m] = t
        return out

    def _mean(self, job: Job, m: int) -> float:
        return job.mu if len(job.members) > 1 else float(self.means_m[job.type, m])

    # -- merge-mode estimates -----------------------------------------------------------

    def _ready_alpha(self, alpha: float) -> np.ndarray:
        out = np.empty(len(self.machines))
        for m, mach in enumerate(self.machines):
            t = float(self.now)
            for k, job in enumerate(mach.queue):
                e = worst_case_exec(job.mu, job.sigma, alpha)
                if k == 0 and mach.running:
                    t += max(0.0, mach.start + e - self.now)
                else:
                    t += e
            out[m] = t
        return out

    def _pending_entries(self, alpha: float) -> list:
        entries = []
        for mach in self.machines:
            t = float(self.now)
            for k, job in enumerate(mach.queue):
                e = worst_case_exec(job.mu, job.sigma, alpha)
                if k == 0 and mach.running:
                    t += max(0.0, mach.start + e - self.now)
                    continue
                t += e
                for s in job.members:
                    entries.append((t, s.deadline, s.arrival, e))
        return entries

    def _exec_model(self, spec: TaskSpec):
        return float(self.type_mu[spec.type]), float(self.type_sigma[spec.type])

    def _sample(self, job: Job, m: int) -> int:
        mt = self.machines[m].mtype
        if len(job.members) == 1:
            return self.pet.sample(job.type, mt, self.u[job.id])
        reps = {}
        for s in job.members:
            reps.setdefault(s.signature, s)
        total = sum(self.pet.sample(s.type, mt, self.u[s.id]) for s in reps.values())
        r = self.saving.ratio(job.level, len(reps)) if len(reps) > 1 else 0.0
        return max(1, int(np.floor((1.0 - r) * total + 0.5)))

    # -- event handling ----------------------------------------------------------------

    def _log(self, kind: str, **kw) -> None:
        if self.cfg.log_events:
            self.log.append({"t": int(self.now), "event": kind, **kw})

    def _finish(self, job: Job, outcome_all: str | None = None) -> None:
        job.state = DONE
        for s in job.members:
            if outcome_all is not None:
                outcome = outcome_all
            else:
                outcome = ONTIME if self.now <= s.deadline else LATE
            self.records.append(TaskRecord(s.id, s.type, s.arrival, s.deadline, int(self.now), outcome))
            if self.sufferage is not None:
                self.sufferage.record(s.type, outcome == ONTIME)

    def _complete(self, jid: int, token: int) -> bool:
        job = self.job_of[jid]
        if job.state != RUNNING or job.token != token:
            return False
        mach = self.machines[job.machine]
        mach.busy += job.duration
        mach.queue.pop(0)
        mach.running = False
        self._log("complete", task=jid, machine=mach.id)
        self._finish(job)
        return True

    def _remove(self, job: Job) -> bool:
        """Take a job out of wherever it sits; True when a machine slot freed."""
        if job.state == BATCH:
            self.batch.remove(job)
            if self.merger is not None:
                self.merger.on_dispatch(job)
            return False
        mach = self.machines[job.machine]
        if job.state == RUNNING:
            mach.busy += self.now - mach.start
            mach.running = False
            job.token += 1
            self.counters["evicted"] += 1
        mach.queue.remove(job)
        return True

    def _expire(self, jid: int) -> bool:
        job = self.job_of[jid]
        if job.state == DONE:
            return False
        freed = self._remove(job)
        self.counters["dropped_expired"] += 1
        if self.pstate is not None:
            self.pstate.misses += 1
        self._log("expire", task=jid)
        self._finish(job, DROPPED)
        return freed

    def _arrive(self, tid: int) -> bool:
        spec = self.specs[tid]
        mu, sigma = self._exec_model(spec)
        job = Job(spec, mu, sigma)
        self._log("arrive", task=tid)
        if self.merger is not None:
            host = self.merger.admit(job, self.batch, self.now, self._ready_alpha, self._exec_model, self._pending_entries)
            if host is not None:
                self.job_of[tid] = host
                self._log("merge", task=tid, into=host.id, level=host.level)
                return False
        else:
            self.batch.append(job)
        self.job_of[tid] = job
        if self.cfg.drop_expired:
            heapq.heappush(self.events, (spec.deadline, EXPIRE, tid, 0))
        return any(len(m.queue) < self.cfg.capacity for m in self.machines)

    def _start_idle(self) -> None:
        for mach in self.machines:
            if mach.running or not mach.queue:
                continue
            job = mach.queue[0]
            job.state = RUNNING
            job.start = mach.start = self.now
            job.duration = self._sample(job, mach.id)
            job.token += 1
            mach.running = True
            heapq.heappush(self.events, (self.now + job.duration, COMPLETE, job.id, job.token))
            self._log("start", task=job.id, machine=mach.id, duration=job.duration)

    # -- mapping ------------------------------------------------------------------------

    def _thresholds(self, base: float):
        if self.sufferage is None:
            return lambda job: base
        return lambda job: max(0.0, base - self.sufferage.get(job.type))

    def _drop_pass(self) -> None:
        pc = self.pcfg
        queues = [list(m.queue) for m in self.machines]
        base = self._thresholds(pc.drop_threshold)

        def evaluate(m, q):
            return self.machine_chain(m, queue=q, skew=True)[0]

        def threshold(job, skew, pos):
            return adjusted_drop_threshold(base(job), skew, pos, pc.rho)

        dropped = drop_pass(
            queues, evaluate, threshold, allow_executing=pc.regime == "evict",
            executing=lambda m: self.machines[m].running,
        )
        for _, job in dropped:
            self._remove(job)
            self.counters["dropped_pruned"] += 1
            self._log("drop", task=job.id)
            self._finish(job, DROPPED)
        if dropped:
            self._start_idle()

    def _mapping_event(self) -> None:
        t0 = time.perf_counter()
        self.counters["mapping_events"] += 1
        if self.cfg.exact:
            self._chain_cache = {}
        pc, ps = self.pcfg, self.pstate
        self._horizon = max([j.deadline for j in self.batch] + [j.deadline for m in self.machines for j in m.queue] + [self.now])
        if ps is not None:
            ps.d = update_oversubscription(ps.d, ps.misses, pc.lam)
            ps.misses = 0
            if pc.toggle == "reactive":
                was = ps.dropping_active
                ps.dropping_active = toggle_dropping(was, ps.d, pc.on_level, pc.off_level, pc.schmitt)
                if was != ps.dropping_active:
                    self.counters["toggles"] += 1
            if pc.drops and ps.dropping_active:
                self._drop_pass()
        if self.batch:
            self._map_batch()
        self.mapping_time += time.perf_counter() - t0

    def _map_batch(self) -> None:
        cfg, pc, ps = self.cfg, self.pcfg, self.pstate
        free = [cfg.capacity - len(m.queue) for m in self.machines]
        chances = None
        need_prob = self.name in PROB_NEEDED or (pc is not None and (pc.defer_mode == "dynamic" or pc.defer_threshold > 0))
        if need_prob:
            chances = PmfChanceModel(self)
        batch = list(self.batch)
        thresholds = None
        if pc is not None:
            all_m = np.arange(len(self.machines))
            cm = None
            if pc.defer_mode == "dynamic":
                total_free = sum(free)
                delta = selective_factor(len(batch), total_free)
                gamma = psi = 0.0
                if delta >= 1.0:
                    cm = chances.matrix(batch, all_m)
                    gamma = competency_level(cm.max(axis=1), ps.defer_threshold)
                    if gamma != 0.0:
                        qch = [[c for c, _ in self.machine_chain(m)[0]] for m in range(len(self.machines))]
                        psi = instantaneous_robustness(qch, cfg.capacity)
                ps.defer_threshold = update_defer_threshold(ps.defer_threshold, delta, gamma, psi, pc.theta)
            thresholds = self._thresholds(ps.defer_threshold)
            if self.name not in PROBABILISTIC and need_prob and any(f > 0 for f in free):
                fm = np.flatnonzero(np.array(free) > 0)
                sub = cm[:, fm] if cm is not None else chances.matrix(batch, fm)
                eligible, deferred = defer_pass(batch, sub.max(axis=1), [thresholds(j) for j in batch])
                self.counters["deferrals"] += len(deferred)
                batch = eligible
        if not any(f > 0 for f in free):
            return
        vq = VirtualQueue(self.now, self.ready_times(), free, self.means_m, batch, chances, thresholds)
        assigned = run_heuristic(self.name, self.heuristic_params, vq, self.hstate)
        self.counters["deferrals"] += len(vq.deferred)
        for job, m in assigned:
            self.batch.remove(job)
            job.state = QUEUED
            job.machine = m
            self.machines[m].queue.append(job)
            if self.merger is not None:
                self.merger.on_dispatch(job)
            self._log("assign", task=job.id, machine=m)

    @property
    def heuristic_params(self) -> dict:
        return self.cfg.heuristic_params

    # -- driver ------------------------------------------------------------------------------

    def run(self) -> MetricsReport:
        self.events = [(s.arrival, ARRIVE, s.id, 0) for s in self.trace]
        heapq.heapify(self.events)
        ev = self.events
        while ev:
            t = ev[0][0]
            self.now = t
            need = False
            while ev and ev[0][0] == t:
                _, kind, tid, token = heapq.heappop(ev)
                if kind == COMPLETE:
                    need |= self._complete(tid, token)
                elif kind == EXPIRE:
                    need |= self._expire(tid)
                else:
                    need |= self._arrive(tid)
            self._start_idle()
            if need:
                self._mapping_event()
                self._start_idle()
        for job in list(self.batch):
            self.batch.remove(job)
            self._finish(job, DROPPED)
        return self.report()

    def report(self) -> MetricsReport:
        counters = dict(self.counters)
        if self.merger is not None:
            counters.update(self.merger.stats)
        span = None
        if self.records:
            span = (min(r.arrival for r in self.records), max(r.end for r in self.records))
        return finalize(self.records, [m.busy for m in self.machines], self.machine_type_names, self.rates, counters, span)

    def log_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.log)


def run(cfg: SimConfig, trace: list[TaskSpec], pet: PetMatrix, rates: MachineRates | None = None) -> MetricsReport:
    return Simulator(cfg, trace, pet, rates).run()
