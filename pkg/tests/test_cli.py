import json

import numpy as np
import pytest

from loadid.cli import main
from loadid.experiment import ExperimentConfig
from loadid.model import TrainConfig
from loadid.pipeline import TrainingSet, save_samples
from loadid.schedule import ScheduleParams
from loadid.simulate import save_catalog

from conftest import toy_catalog

SCHED = ["--n-appliances", "4", "--group-size", "2", "--groups-active", "1", "--dwell", "150"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip().startswith("{") else out)


@pytest.fixture
def toy_dir(tmp_path):
    save_catalog(toy_catalog(), tmp_path / "cat.json")
    return tmp_path


def test_gen_schedule_defaults_and_determinism(tmp_path, capsys):
    code, out = run(capsys, "gen-schedule", "--rounds", 2, "--out", tmp_path / "a.jsonl")
    assert code == 0 and out["events"] == 2 * 3 * 64
    run(capsys, "gen-schedule", "--rounds", 2, "--seed", 1, "--out", tmp_path / "b.jsonl")
    run(capsys, "gen-schedule", "--rounds", 2, "--seed", 1, "--out", tmp_path / "c.jsonl")
    assert (tmp_path / "b.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()
    code, out = run(capsys, "gen-schedule", "--rounds", 18, "--seed", 2, "--out", tmp_path / "t.jsonl",
                    "--compare", tmp_path / "b.jsonl")
    assert out["overlap_ratio"] < 0.17


def test_exit_codes(toy_dir, capsys):
    assert main(["gen-schedule", "--group-size", "5", "--out", str(toy_dir / "x.jsonl")]) == 2
    assert main(["simulate", "--schedule", str(toy_dir / "missing.jsonl")]) == 2
    (toy_dir / "bad.jsonl").write_text("{not json\n")
    assert main(["simulate", "--schedule", str(toy_dir / "bad.jsonl")]) == 3
    (toy_dir / "bad.hwk").write_bytes(b"HWK1" + b"\0" * 10)
    assert main(["infer", "--model", str(toy_dir / "bad.hwk"), "--trace", str(toy_dir / "bad.hwk")]) == 3
    ts = TrainingSet(np.ones((10, 30)), np.zeros(10, dtype=np.int64), 4, {})
    save_samples(ts, toy_dir / "one.bin")
    assert main(["train", "--samples", str(toy_dir / "one.bin"), "--out", str(toy_dir / "m.hwkm")]) == 4
    (toy_dir / "cfg.json").write_text('{"no_such_key": 1}')
    assert main(["ablate", "--config", str(toy_dir / "cfg.json")]) == 2
    assert main(["sync-sim", "--trials", "0", "--out", str(toy_dir / "s")]) == 2
    capsys.readouterr()


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_toy_end_to_end(toy_dir, capsys, monkeypatch):
    monkeypatch.chdir(toy_dir)
    cat = ["--catalog", "cat.json"]
    assert run(capsys, "gen-schedule", *SCHED, "--rounds", 6, "--seed", 1, "--out", "train.jsonl")[0] == 0
    assert run(capsys, "gen-schedule", *SCHED, "--rounds", 4, "--seed", 2, "--out", "test.jsonl")[0] == 0
    code, out = run(capsys, "simulate", "--schedule", "train.jsonl", *cat, "--seed", 1, "--out", "train.hwk")
    assert code == 0 and out["header"]["cycle_len"] == 320 and out["header"]["n_appliances"] == 4
    code, out = run(capsys, "simulate", "--schedule", "test.jsonl", *cat, "--seed", 2, "--out", "test.hwk",
                    "--keep-individual")
    assert out["kirchhoff_ok"]
    code, out = run(capsys, "prepare", "--trace", "train.hwk", *cat, "--n-side", 6, "--out", "s.bin")
    assert code == 0 and out["samples"] > 0
    code, out = run(capsys, "train", "--samples", "s.bin", "--trace", "train.hwk", *cat, "--trees", 30,
                    "--out", "m.hwkm")
    assert code == 0 and len(out["thresholds"]) == 9
    code, out = run(capsys, "infer", "--model", "m.hwkm", "--trace", "test.hwk", "--out", "r.jsonl")
    assert code == 0 and out["real_time"] and out["mean_latency_ms"] < 20
    code, out = run(capsys, "eval", "--trace", "test.hwk", "--reports", "r.jsonl", "--out", "e.json",
                    "--csv", "e.csv")
    assert code == 0 and out["average_f1"] >= 0.99
    rep = json.loads((toy_dir / "e.json").read_text())
    assert rep["event_br"] == 1.0 and rep["unique_states"] > 1
    assert (toy_dir / "e.csv").read_text().startswith("class,name,precision")

    # perfect predictions score 1.0 everywhere
    from loadid.experiment import truth_events
    from loadid.simulate import load_trace
    with open(toy_dir / "perfect.jsonl", "w") as fh:
        for c, k in truth_events(load_trace(toy_dir / "test.hwk")):
            fh.write(json.dumps({"cycle_id": c, "class_label": k}) + "\n")
    code, out = run(capsys, "eval", "--trace", "test.hwk", "--reports", "perfect.jsonl", "--out", "p.json")
    assert out["average_f1"] == out["weighted_f1"] == 1.0
    (toy_dir / "broken.jsonl").write_text('{"cycle_id": 1}\n')
    assert main(["eval", "--trace", "test.hwk", "--reports", "broken.jsonl"]) == 3
    capsys.readouterr()


def test_simulate_empty_schedule_is_idle(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text('{"format": "loadid-schedule", "version": 1, "n_appliances": 18, '
                                          '"dwell_cycles": 100, "seed": 0}\n')
    code, out = run(capsys, "simulate", "--schedule", tmp_path / "empty.jsonl", "--out", tmp_path / "e.hwk")
    assert code == 0 and out["events"] == 0 and out["cycles"] == 100


def test_sync_sim_no_noise_single_trial(tmp_path, capsys):
    code, out = run(capsys, "sync-sim", "--trials", 1, "--no-noise", "--out", tmp_path)
    assert code == 0
    for name in ("spt", "tsf"):
        assert (tmp_path / f"{name}_cdf.csv").read_text().splitlines() == ["error_us,cum_frac", "0.000000,1.000000"]
    assert json.loads((tmp_path / "summary.json").read_text())["spt"]["max_us"] == 0.0


def test_sync_sim_default_bound(tmp_path, capsys):
    code, out = run(capsys, "sync-sim", "--trials", 300, "--seed", 3, "--out", tmp_path)
    assert out["spt"]["max_us"] <= 62.5 and out["tsf"]["mean_us"] > out["spt"]["mean_us"]


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_ablate_shape(toy_dir, capsys):
    cfg = ExperimentConfig(
        catalog_path=str(toy_dir / "cat.json"),
        train_schedule=ScheduleParams(4, 2, 1, rounds=4, dwell_cycles=150, rng_seed=1),
        test_schedule=ScheduleParams(4, 2, 1, rounds=2, dwell_cycles=150, rng_seed=2),
        model=TrainConfig(n_trees=10, max_depth=4, learning_rate=0.3))
    (toy_dir / "cfg.json").write_text(cfg.to_json())
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    code, out = run(capsys, "ablate", "--config", toy_dir / "cfg.json", "--intervals", "10,30",
                    "--out", toy_dir / "a.csv")
    assert code == 0
    lines = (toy_dir / "a.csv").read_text().splitlines()
    assert lines[0] == "experiment,variant,D,average_f1,weighted_f1,state_f1"
    assert [ln.split(",")[2] for ln in lines[1:]] == ["10", "30"]
