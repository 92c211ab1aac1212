import hashlib
import json
import warnings

import numpy as np
import pytest

from prunesim.pmf import Pmf
from prunesim.workload import (
    ArrivalConfig,
    PetMatrix,
    TaskSpec,
    TaskType,
    WorkloadError,
    assign_deadline,
    default_means,
    generate_pet,
    generate_trace,
    load_pet,
    load_trace,
    save_pet,
    save_trace,
    trace_to_csv,
)


@pytest.fixture(scope="module")
def pet():
    tt, mt, means = default_means()
    return generate_pet(means, tt, mt, seed=4)


def spike_ratio(trace, cfg):
    """Arrival rate inside burst windows divided by the rate in base windows."""
    a = np.array([t.arrival for t in trace], dtype=float)
    cycle = cfg.span / cfg.cycles
    base = cycle / (1 + cfg.burst_fraction)
    phase = a % cycle
    inside = phase >= base
    return (inside.sum() / (cycle - base)) / ((~inside).sum() / base)


class TestGeneratePet:
    def test_mass_and_mean(self):
        pet = generate_pet([[100.0]], seed=3)
        p = pet[0, 0]
        assert abs(p.mass - 1.0) <= 1e-9
        assert abs(p.mean() - 100) <= 10

    def test_shape_controls_variance(self):
        narrow = generate_pet([[100.0]], shape_range=(20, 20), seed=1)[0, 0]
        wide = generate_pet([[100.0]], shape_range=(1, 1), seed=1)[0, 0]
        assert narrow.std() < wide.std()
        # gamma variance is mean^2 / shape
        assert narrow.std() == pytest.approx(100 / np.sqrt(20), rel=0.2)

    def test_deterministic(self):
        a = generate_pet([[50.0, 80.0], [120.0, 60.0]], seed=9)
        b = generate_pet([[50.0, 80.0], [120.0, 60.0]], seed=9)
        assert a == b

    def test_rejects_non_positive_mean(self):
        with pytest.raises(WorkloadError):
            generate_pet([[10.0, 0.0]])

    def test_default_shape_is_twelve_by_eight(self, pet):
        assert pet.shape == (12, 8)

    def test_sample_uses_quantile(self):
        m = PetMatrix(["a"], ["x"], [[Pmf.from_dict({3: 0.25, 7: 0.75})]])
        assert m.sample(0, 0, 0.1) == 3
        assert m.sample(0, 0, 0.25) == 3
        assert m.sample(0, 0, 0.26) == 7


class TestAssignDeadline:
    def test_formula(self):
        assert assign_deadline(100, 50, 100, 2.0) == 350

    def test_floor(self):
        assert assign_deadline(0, 10, 10, 0.8) == 18

    def test_beta_range_in_trace(self, pet):
        cfg = ArrivalConfig(total_tasks=600, pattern="constant", seed=2)
        tr = generate_trace(cfg, pet)
        avg = pet.type_means()
        avg_all = avg.mean()
        slack = np.array([t.deadline - t.arrival - round(avg[t.type]) for t in tr])
        assert slack.min() >= np.floor(0.8 * avg_all)
        assert slack.max() <= np.floor(2.5 * avg_all)


class TestGenerateTrace:
    def test_constant_count_and_order(self, pet):
        tr = generate_trace(ArrivalConfig(total_tasks=1200, pattern="constant", seed=1), pet)
        assert len(tr) == 1200
        arr = [t.arrival for t in tr]
        assert arr == sorted(arr)
        assert all(t.deadline > t.arrival for t in tr)
        assert [t.id for t in tr] == list(range(1200))

    def test_spiky_ratio(self, pet):
        cfg = ArrivalConfig.spiky(total_tasks=1200, seed=5)
        tr = generate_trace(cfg, pet)
        assert spike_ratio(tr, cfg) == pytest.approx(3.0, rel=0.2)

    def test_base_high_ratio(self, pet):
        cfg = ArrivalConfig.base_high(total_tasks=1200, seed=5)
        tr = generate_trace(cfg, pet)
        assert spike_ratio(tr, cfg) == pytest.approx(2.0, rel=0.2)

    def test_same_total_as_constant(self, pet):
        a = generate_trace(ArrivalConfig(total_tasks=900, pattern="constant", seed=1), pet)
        b = generate_trace(ArrivalConfig.spiky(total_tasks=900, seed=1), pet)
        assert len(a) == len(b) == 900

    def test_deterministic_bytes(self, pet):
        cfg = ArrivalConfig.spiky(total_tasks=300, seed=11)
        h = [hashlib.sha256(trace_to_csv(generate_trace(cfg, pet)).encode()).hexdigest() for _ in range(2)]
        assert h[0] == h[1]

    def test_empty_types(self, pet):
        with pytest.raises(WorkloadError):
            generate_trace(ArrivalConfig(total_tasks=10), pet, types=[])

    def test_groups_share_arrival_and_item(self, pet):
        cfg = ArrivalConfig(total_tasks=100, pattern="constant", group_size=5, seed=3)
        tr = generate_trace(cfg, pet)
        assert len(tr) == 100
        first = tr[:5]
        assert len({t.arrival for t in first}) == 1
        assert len({t.data_id.split("/")[0] for t in first}) == 1
        assert len({t.data_id for t in first}) == 5

    def test_invalid_config(self):
        with pytest.raises(WorkloadError):
            ArrivalConfig(total_tasks=0)
        with pytest.raises(WorkloadError):
            ArrivalConfig(pattern="bursty")
        with pytest.raises(WorkloadError):
            ArrivalConfig(pattern="spiky", multiplier=1.0)


class TestTypes:
    def test_task_type_validation(self):
        with pytest.raises(WorkloadError):
            TaskType(0, "x", {})
        with pytest.raises(WorkloadError):
            TaskType(0, "x", {"m": -1.0})

    def test_operation_split(self):
        t = TaskType(0, "codec:vp9", {"vm": 10.0})
        assert (t.operation, t.params) == ("codec", "vp9")

    def test_spec_deadline_after_arrival(self):
        with pytest.raises(WorkloadError):
            TaskSpec(0, 0, 10, 10)


class TestFiles:
    def test_trace_round_trip(self, pet, tmp_path):
        tr = generate_trace(ArrivalConfig.spiky(total_tasks=200, group_size=5, seed=8), pet)
        path = tmp_path / "trace.csv"
        save_trace(tr, path)
        assert load_trace(path, n_types=12) == tr

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,type,arrival,data_id,operation,params,priority\n0,0,0,a,b,c,0\n")
        with pytest.raises(WorkloadError, match="deadline"):
            load_trace(path)

    def test_malformed_row_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "id,type,arrival,deadline,data_id,operation,params,priority\n"
            "0,0,0,10,a,b,c,0\n"
            "1,0,x,10,a,b,c,0\n"
        )
        with pytest.raises(WorkloadError, match=":3:"):
            load_trace(path)

    def test_unknown_type(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,type,arrival,deadline,data_id,operation,params,priority\n0,7,0,10,a,b,c,0\n")
        with pytest.raises(WorkloadError, match="unknown task type"):
            load_trace(path, n_types=3)

    def test_pet_round_trip(self, pet, tmp_path):
        path = tmp_path / "pet.json"
        save_pet(pet, path)
        assert load_pet(path) == pet

    def test_non_normalized_warning(self, tmp_path):
        path = tmp_path / "pet.json"
        doc = {
            "task_types": ["a", "b"],
            "machine_types": ["x"],
            "pmfs": [[[1, 1.0]], [[2, 0.5], [3, 0.3]]],
        }
        path.write_text(json.dumps(doc))
        with pytest.warns(UserWarning, match=r"\(b, x\)"):
            load_pet(path)

    def test_normalized_pet_no_warning(self, tmp_path):
        path = tmp_path / "pet.json"
        path.write_text(json.dumps({"task_types": ["a"], "machine_types": ["x"], "pmfs": [[[1, 1.0]]]}))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            load_pet(path)

    def test_pet_count_mismatch(self, tmp_path):
        path = tmp_path / "pet.json"
        path.write_text(json.dumps({"task_types": ["a"], "machine_types": ["x", "y"], "pmfs": [[[1, 1.0]]]}))
        with pytest.raises(WorkloadError):
            load_pet(path)
