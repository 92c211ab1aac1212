import json

import pytest

from oracles import enumerate_drop
from prunesim.engine import ConfigError, Job, SimConfig, Simulator, remaining_pmf, run
from prunesim.merger import MergeConfig
from prunesim.metrics import DROPPED, LATE, ONTIME
from prunesim.pmf import Pmf, shift
from prunesim.pruner import PrunerConfig
from prunesim.workload import ArrivalConfig, PetMatrix, TaskSpec, default_means, generate_pet, generate_trace


def pet_of(*rows, machines=("x",)):
    return PetMatrix([f"t{i}" for i in range(len(rows))], list(machines), [[Pmf.from_dict(d) for d in r] for r in rows])


def task(i, arr, dl, typ=0, data=""):
    return TaskSpec(i, typ, arr, dl, data, "op" if data else "", "p" if data else "")


def outcomes(sim):
    return {r.id: (r.outcome, r.end) for r in sim.records}


@pytest.fixture(scope="module")
def workload():
    tt, mt, means = default_means()
    pet = generate_pet(means, tt, mt, seed=1)
    trace = generate_trace(ArrivalConfig.spiky(total_tasks=300, span=2000, seed=4), pet)
    return pet, trace


class TestHandTraces:
    def test_empty_trace(self):
        rep = run(SimConfig(machines=2), [], pet_of([{5: 1.0}]))
        assert rep.total_tasks == 0
        assert rep.busy_time == [0, 0]

    def test_single_task(self):
        pet = pet_of([{5: 1.0}])
        sim = Simulator(SimConfig(machines=1, heuristic="mm"), [task(0, 7, 17)], pet)
        rep = sim.run()
        assert outcomes(sim) == {0: (ONTIME, 12)}
        assert rep.robustness == 1.0 and rep.busy_time == [5]

    def test_fifo_schedule(self):
        # one machine, capacity 3, all deterministic: 0-4, 4-8, 8-12, 12-16
        pet = pet_of([{4: 1.0}])
        trace = [task(i, 0, 100) for i in range(4)]
        sim = Simulator(SimConfig(machines=1, heuristic="mm"), trace, pet)
        sim.run()
        assert outcomes(sim) == {0: (ONTIME, 4), 1: (ONTIME, 8), 2: (ONTIME, 12), 3: (ONTIME, 16)}

    def test_two_machine_schedule(self):
        # type 0 is fast on machine 0, type 1 on machine 1
        pet = pet_of([{3: 1.0}, {9: 1.0}], [{8: 1.0}, {2: 1.0}], machines=("x", "y"))
        trace = [task(0, 0, 50, 0), task(1, 0, 50, 1), task(2, 1, 50, 0), task(3, 1, 50, 1)]
        sim = Simulator(SimConfig(machines=2, heuristic="mm"), trace, pet)
        sim.run()
        assert outcomes(sim) == {0: (ONTIME, 3), 1: (ONTIME, 2), 2: (ONTIME, 6), 3: (ONTIME, 4)}

    def test_queued_task_expires(self):
        pet = pet_of([{10: 1.0}])
        trace = [task(0, 0, 100), task(1, 0, 6)]
        sim = Simulator(SimConfig(machines=1, heuristic="mm"), trace, pet)
        rep = sim.run()
        assert outcomes(sim) == {0: (ONTIME, 10), 1: (DROPPED, 6)}
        assert rep.counters["dropped_expired"] == 1

    def test_executing_task_evicted_at_deadline(self):
        # task 0 would run 0-10 but expires at 6; task 1 then starts at 6
        pet = pet_of([{10: 1.0}], [{3: 1.0}])
        trace = [task(0, 0, 6, 0), task(1, 0, 50, 1)]
        sim = Simulator(SimConfig(machines=1, heuristic="fcfs"), trace, pet)
        rep = sim.run()
        assert outcomes(sim) == {0: (DROPPED, 6), 1: (ONTIME, 9)}
        assert rep.busy_time == [9]

    def test_late_completion_without_expiry(self):
        pet = pet_of([{10: 1.0}])
        trace = [task(0, 0, 6)]
        sim = Simulator(SimConfig(machines=1, heuristic="mm", drop_expired=False), trace, pet)
        sim.run()
        assert outcomes(sim) == {0: (LATE, 10)}

    def test_merging_never_expires(self):
        pet = pet_of([{10: 1.0}])
        trace = [task(i, 0, 8, data=f"d{i}") for i in range(5)]
        cfg = SimConfig(machines=1, heuristic="fcfs", drop_expired=False, merging=MergeConfig())
        rep = Simulator(cfg, trace, pet).run()
        assert rep.counters["dropped_expired"] == 0
        assert rep.dropped == 0


class TestTailPct:
    def test_idle_machine(self):
        sim = Simulator(SimConfig(machines=1, exact=True), [], pet_of([{5: 1.0}]))
        sim.now = 42
        assert sim.machine_chain(0)[1] == Pmf.delta(42)

    def test_one_queued_no_drop(self):
        pet = Pmf.from_dict({3: 0.25, 7: 0.75})
        sim = Simulator(SimConfig(machines=1, exact=True, drop_expired=False), [], PetMatrix(["a"], ["x"], [[pet]]))
        sim.now = 10
        j = Job(task(0, 0, 15))
        assert sim.machine_chain(0, queue=[j], memo=False)[1] == shift(pet, 10)

    def test_three_queued_evict(self):
        pets = [Pmf.from_dict(d) for d in ({2: 0.5, 9: 0.5}, {1: 0.3, 4: 0.7}, {3: 0.6, 6: 0.4})]
        sim = Simulator(SimConfig(machines=1, exact=True), [], PetMatrix(["a", "b", "c"], ["x"], [[p] for p in pets]))
        sim.now = 5
        jobs = [Job(task(i, 0, dl, typ=i)) for i, dl in enumerate((12, 15, 18))]
        got = sim.machine_chain(0, queue=jobs, memo=False)[1]
        free = {5: 1.0}
        for p, j in zip(pets, jobs):
            free = enumerate_drop(free, p.to_dict(), j.deadline, evict=True)
        assert got.to_dict().keys() == free.keys()
        assert all(abs(got.to_dict()[k] - v) < 1e-12 for k, v in free.items())

    def test_remaining_pmf_conditions_on_elapsed(self):
        pet = Pmf.from_dict({2: 0.5, 6: 0.25, 8: 0.25})
        got = remaining_pmf(pet, 10, 13)
        assert got.to_dict() == pytest.approx({16: 0.5, 18: 0.5})

    def test_remaining_pmf_overrun(self):
        assert remaining_pmf(Pmf.delta(4), 0, 9) == Pmf.delta(10)


class TestRuns:
    @pytest.mark.parametrize("h", ["rr", "met", "mct", "kpb:25", "mm", "msd", "mmu", "moc", "fcfs-rr", "edf", "sjf", "pam", "pamf"])
    def test_conservation(self, workload, h):
        pet, trace = workload
        pr = PrunerConfig(fairness=0.1) if h in ("pam", "pamf", "mm") else None
        sim = Simulator(SimConfig(heuristic=h, pruning=pr, seed=2), trace, pet)
        rep = sim.run()
        assert len(sim.records) == len(trace)
        assert sorted(r.id for r in sim.records) == [s.id for s in sorted(trace, key=lambda s: s.id)]
        assert all(r.outcome != ONTIME or r.end <= r.deadline for r in sim.records)
        assert all(b + i == rep.makespan for b, i in zip(rep.busy_time, rep.idle_time))

    def test_deterministic(self, workload):
        pet, trace = workload
        cfg = SimConfig(heuristic="pam", pruning=PrunerConfig(), seed=9, log_events=True)
        a = Simulator(cfg, trace, pet)
        b = Simulator(cfg, trace, pet)
        assert a.run().to_json() == b.run().to_json()
        assert a.log_jsonl() == b.log_jsonl()

    def test_pruner_no_op(self, workload):
        pet, trace = workload
        noop = PrunerConfig(regime="none", toggle="never", defer_mode="static", defer_threshold=0.0)
        for h in ("mm", "pam"):
            bare = Simulator(SimConfig(heuristic=h, seed=3), trace, pet).run()
            off = Simulator(SimConfig(heuristic=h, seed=3, pruning=noop), trace, pet).run()
            strip = lambda r: {k: v for k, v in r.to_dict().items() if k != "counters"}
            assert strip(bare) == strip(off)

    def test_pamf_zero_fairness_is_pam(self, workload):
        pet, trace = workload
        cfg = dict(pruning=PrunerConfig(fairness=0.0), seed=5, log_events=True)
        a = Simulator(SimConfig(heuristic="pam", **cfg), trace, pet)
        b = Simulator(SimConfig(heuristic="pamf", **cfg), trace, pet)
        assert a.run().to_json() == b.run().to_json()
        assert a.log_jsonl() == b.log_jsonl()

    def test_pruning_counters(self, workload):
        pet, trace = workload
        rep = Simulator(SimConfig(heuristic="pam", pruning=PrunerConfig(), seed=1), trace, pet).run()
        assert rep.counters["dropped_pruned"] > 0 and rep.counters["deferrals"] > 0

    def test_event_log_is_json_lines(self, workload):
        pet, trace = workload
        sim = Simulator(SimConfig(heuristic="mm", log_events=True), trace[:20], pet)
        sim.run()
        lines = sim.log_jsonl().splitlines()
        assert lines and all(json.loads(x)["event"] for x in lines)

    def test_exact_mode_runs(self, workload):
        pet, trace = workload
        rep = Simulator(SimConfig(heuristic="pam", pruning=PrunerConfig(), exact=True), trace[:60], pet).run()
        assert rep.total_tasks == 60

    def test_merging_run(self):
        tt, mt, means = default_means("merge_means.json")
        pet = generate_pet(means, tt, mt, seed=1)
        trace = generate_trace(ArrivalConfig.base_high(total_tasks=600, span=6000, seed=1, group_size=5), pet)
        cfg = SimConfig(heuristic="fcfs", homogeneous=True, capacity=1, drop_expired=False,
                        merging=MergeConfig(policy="aggressive"))
        sim = Simulator(cfg, trace, pet)
        rep = sim.run()
        assert len(sim.records) == 600 and rep.dropped == 0
        merges = sum(rep.counters[k] for k in ("merge_task", "merge_data-op", "merge_data"))
        assert merges > 0
        sim.merger.tables.check(set())


class TestConfig:
    def test_dict_blocks(self):
        cfg = SimConfig(pruning={"drop_threshold": 0.4}, heuristic="kpb:20")
        assert cfg.pruning.drop_threshold == 0.4 and cfg.heuristic_params == {"k": 20.0}

    @pytest.mark.parametrize(
        "kw",
        [
            {"heuristic": "best"},
            {"machines": 0},
            {"capacity": 0},
            {"regime": "maybe"},
            {"merging": {}, "drop_expired": True, "heuristic": "fcfs"},
            {"merging": {}, "drop_expired": False, "heuristic": "pam"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            SimConfig(**kw)

    def test_merging_needs_data_ids(self):
        cfg = SimConfig(heuristic="fcfs", drop_expired=False, merging={})
        with pytest.raises(ConfigError):
            Simulator(cfg, [task(0, 0, 5)], pet_of([{1: 1.0}]))

    def test_unknown_type(self):
        with pytest.raises(ConfigError):
            Simulator(SimConfig(), [task(0, 0, 5, typ=3)], pet_of([{1: 1.0}]))

    def test_default_rates_applied(self, workload):
        pet, trace = workload
        rep = Simulator(SimConfig(heuristic="mm"), trace[:50], pet).run()
        assert rep.cost > 0 and rep.energy > 0
