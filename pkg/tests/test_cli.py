import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest

from prunesim.cli import load_config, main
from prunesim.engine import ConfigError
from prunesim.workload import load_pet, load_trace


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pet_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("pet") / "pet.json"
    assert main(["-q", "gen-pet", "--seed", "1", "--out", str(path)]) == 0
    return path


def write_config(tmp_path, **over):
    doc = {"workload": {"total_tasks": 150, "span": 1000}, "engine": {"heuristic": "mm"}, "trials": 2}
    doc.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


class TestGenPet:
    def test_seed_fixes_file(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        main(["-q", "gen-pet", "--seed", "7", "--samples", "100", "--out", str(a)])
        main(["-q", "gen-pet", "--seed", "7", "--samples", "100", "--out", str(b)])
        assert digest(a) == digest(b)

    def test_default_shape(self, pet_file):
        assert load_pet(pet_file).shape == (12, 8)

    def test_missing_means(self, tmp_path, capsys):
        assert main(["gen-pet", "--means", str(tmp_path / "none.json")]) == 2
        assert "none.json" in capsys.readouterr().err

    def test_bad_means(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"task_types": ["a"], "machine_types": ["x"], "means": [[-1.0]]}))
        assert main(["-q", "gen-pet", "--means", str(bad)]) == 2

    def test_stdout(self, capsys):
        assert main(["-q", "gen-pet", "--samples", "50"]) == 0
        assert len(json.loads(capsys.readouterr().out)["pmfs"]) == 96


class TestGenTrace:
    def test_row_count(self, pet_file, tmp_path):
        out = tmp_path / "t.csv"
        assert main(["-q", "gen-trace", "--pet", str(pet_file), "--tasks", "1200", "--out", str(out)]) == 0
        assert len(load_trace(out)) == 1200

    def test_reproducible(self, pet_file, tmp_path):
        paths = [tmp_path / f"{i}.csv" for i in range(2)]
        for p in paths:
            main(["-q", "gen-trace", "--pet", str(pet_file), "--tasks", "300", "--seed", "3", "--out", str(p)])
        assert digest(paths[0]) == digest(paths[1])

    def test_spiky_ratio(self, pet_file, capsys):
        main(["-q", "gen-trace", "--pet", str(pet_file), "--tasks", "6000", "--span", "6000", "--pattern", "spiky"])
        arr = np.array([int(r["arrival"]) for r in csv.DictReader(io.StringIO(capsys.readouterr().out))])
        # 10 cycles of 600: base 450 then burst 150 at three times the rate
        phase = arr[arr < 6000] % 600
        base_rate = np.sum(phase < 450) / 450
        burst_rate = np.sum(phase >= 450) / 150
        assert 2.5 < burst_rate / base_rate < 3.5

    def test_bad_pattern(self, pet_file):
        with pytest.raises(SystemExit) as exc:
            main(["gen-trace", "--pet", str(pet_file), "--pattern", "wavy"])
        assert exc.value.code == 2


class TestConfig:
    def test_defaults(self):
        doc = load_config(None)
        assert doc["trials"] == 30 and doc["pruner"] is None

    def test_dotted_override(self, tmp_path):
        doc = load_config(str(write_config(tmp_path)), ["engine.heuristic=pam", "pruner.lam=0.5", "trials=4"])
        assert doc["engine"]["heuristic"] == "pam" and doc["pruner"] == {"lam": 0.5} and doc["trials"] == 4

    @pytest.mark.parametrize(
        "over",
        [
            ["engine.heuristc=mm"],
            ["pruner.lam=2"],
            ["trials=0"],
            ["engine.heuristic=best"],
            ["nothing=1"],
            ["workload.pattern=wavy"],
            ["trace=missing.csv"],
            ["engine.heuristic"],
        ],
    )
    def test_rejects(self, over):
        with pytest.raises(ConfigError):
            load_config(None, over)

    def test_shipped_example(self):
        path = Path(__file__).parents[1] / "docs" / "example_run.json"
        doc = load_config(str(path))
        assert doc["engine"]["heuristic"] == "pam" and doc["compare"] == {"pruner": None}

    def test_pruner_aliases(self, tmp_path, capsys):
        path = write_config(tmp_path, pruner={"lambda": 0.5, "schmitt_on": 2.0}, trials=1)
        assert main(["-q", "run", str(path)]) == 0

    def test_unknown_file_field(self, tmp_path, capsys):
        path = write_config(tmp_path, engine={"capacty": 2})
        assert main(["run", str(path)]) == 2
        assert "engine.capacty" in capsys.readouterr().err


class TestRun:
    def test_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["-q", "run", str(write_config(tmp_path)), "--trials", "3", "--out", str(out)]) == 0
        agg = json.loads((out / "aggregate.json").read_text())
        assert json.loads(capsys.readouterr().out) == agg
        rows = list(csv.DictReader(io.StringIO((out / "trials.csv").read_text())))
        assert [int(r["seed"]) for r in rows] == [0, 1, 2]
        assert {r["config_hash"] for r in rows} == {agg["config_hash"]}
        m = agg["metrics"]["robustness"]
        assert m["ci_low"] <= m["mean"] <= m["ci_high"]
        assert agg["trials"] == 3 and not agg["ci_degenerate"] and agg["seed"] == 0
        assert len(agg["config_hash"]) == 16

    def test_single_trial_flagged(self, tmp_path, capsys):
        main(["-q", "run", str(write_config(tmp_path)), "--trials", "1"])
        agg = json.loads(capsys.readouterr().out)
        m = agg["metrics"]["robustness"]
        assert agg["ci_degenerate"] and m["ci_low"] == m["mean"] == m["ci_high"]

    def test_seed_determines_output(self, tmp_path):
        cfg = write_config(tmp_path, pruner={})
        for name, jobs in (("a", "1"), ("b", "2")):
            main(["-q", "run", str(cfg), "--seed", "5", "--jobs", jobs, "--out", str(tmp_path / name)])
        for f in ("trials.csv", "aggregate.json"):
            assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)

    def test_paired_delta(self, tmp_path, capsys):
        cfg = write_config(tmp_path, pruner={}, compare={"pruner": None})
        main(["-q", "run", str(cfg)])
        agg = json.loads(capsys.readouterr().out)
        assert agg["metrics"]["delta_robustness"]["mean"] is not None

    def test_quiet_stdout_is_json_only(self, tmp_path, capsys):
        main(["-q", "run", str(write_config(tmp_path)), "--trials", "1"])
        captured = capsys.readouterr()
        json.loads(captured.out)
        assert captured.err == ""

    def test_trace_file(self, pet_file, tmp_path, capsys):
        trace = tmp_path / "t.csv"
        main(["-q", "gen-trace", "--pet", str(pet_file), "--tasks", "100", "--span", "600", "--out", str(trace)])
        cfg = write_config(tmp_path, pet=str(pet_file), trace=str(trace))
        assert main(["-q", "run", str(cfg)]) == 0
        assert json.loads(capsys.readouterr().out)["metrics"]["total_tasks"]["mean"] == 100


class TestSweep:
    def test_four_points(self, tmp_path, capsys):
        out = tmp_path / "s"
        args = ["-q", "sweep", str(write_config(tmp_path)), "--axis", "engine.heuristic", "--values", "mm", "msd", "mmu", "pam"]
        assert main(args + ["--out", str(out)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert [p["value"] for p in doc["points"]] == ["mm", "msd", "mmu", "pam"]
        rows = list(csv.DictReader(io.StringIO((out / "sweep.csv").read_text())))
        assert len(rows) == 8
        # every point reuses the same trial seeds
        seeds = {p: [r["seed"] for r in rows if r["point"] == p] for p in ("mm", "pam")}
        assert seeds["mm"] == seeds["pam"] == ["0", "1"]

    def test_load_axis(self, tmp_path, capsys):
        args = ["-q", "sweep", str(write_config(tmp_path)), "--axis", "workload.total_tasks", "--values", "100", "200", "--trials", "1"]
        assert main(args) == 0
        doc = json.loads(capsys.readouterr().out)
        assert [p["metrics"]["total_tasks"]["mean"] for p in doc["points"]] == [100, 200]

    def test_unknown_axis(self, tmp_path, capsys):
        assert main(["sweep", str(write_config(tmp_path)), "--axis", "engine.speed", "--values", "1"]) == 2
        assert "engine.speed" in capsys.readouterr().err
