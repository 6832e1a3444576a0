import json
import os
import time

import pytest

from stirfry.cli import main

from conftest import TINY

TINY_TRAIN = {"model": {k: v for k, v in TINY.items() if k != "dropout"}, "dropout": 0.0,
              "epochs": 3, "warmup_epochs": 1, "batch_size": 4}


def _json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "data")]) == 0
    cfg = _json(root / "train.json", TINY_TRAIN)
    assert main(["train", "--config", cfg, "--manifest", str(root / "data" / "manifest.json"),
                 "--out", str(root / "run")]) == 0
    assert main(["fit-dmp", "--left", str(root / "data" / "train_s1.00_left.csv"), "--out", str(root / "dmp")]) == 0
    return root


def test_gen_layout(workspace):
    data = workspace / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 14
    assert len(os.listdir(data)) == 29


def test_gen_seed_changes_output(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["gen", "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    name = "train_s1.00_right.csv"
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


def test_gen_config_and_set(tmp_path):
    cfg = _json(tmp_path / "spec.json", {"cycles": 1})
    assert main(["gen", "--config", cfg, "--set", "noise_pos=0.0", "--out", str(tmp_path / "d")]) == 0
    meta = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert meta["spec"]["cycles"] == 1 and meta["spec"]["noise_pos"] == 0.0


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["bake"]) == 1
    assert main(["gen"]) == 1
    assert main(["gen", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert main(["gen", "--set", "noequals", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_runtime_error_on_bad_spec_value(tmp_path):
    assert main(["gen", "--set", "dur_b=-1", "--out", str(tmp_path / "d")]) == 2


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("metrics.jsonl", "last.ckpt", "model.ckpt", "report.json"):
        assert (run / name).exists()
    rows = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"epoch", "lr", "train_loss", "val_ndtw"}
    report = json.loads((run / "report.json").read_text())
    assert 1 <= report["best_epoch"] <= 3


def test_train_smoke_time(tmp_path, workspace):
    cfg = _json(tmp_path / "t.json", {**TINY_TRAIN, "epochs": 2})
    start = time.perf_counter()
    assert main(["train", "--config", cfg, "--manifest", str(workspace / "data" / "manifest.json"),
                 "--out", str(tmp_path / "run")]) == 0
    assert time.perf_counter() - start < 60


def test_train_resume_continues_epochs(tmp_path, workspace):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(workspace / "run", run)
    cfg = _json(tmp_path / "t.json", TINY_TRAIN)
    assert main(["train", "--config", cfg, "--manifest", str(workspace / "data" / "manifest.json"),
                 "--resume", str(run / "last.ckpt"), "--epochs", "5", "--out", str(run)]) == 0
    rows = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4, 5]
    # resuming a finished run needs more epochs
    assert main(["train", "--config", cfg, "--manifest", str(workspace / "data" / "manifest.json"),
                 "--resume", str(run / "last.ckpt"), "--out", str(run)]) == 1


def test_train_unknown_key(tmp_path, workspace):
    cfg = _json(tmp_path / "t.json", {**TINY_TRAIN, "bogus": 1})
    assert main(["train", "--config", cfg, "--manifest", str(workspace / "data" / "manifest.json"),
                 "--out", str(tmp_path / "run")]) == 2


def test_eval_and_rollout(tmp_path, workspace):
    data, ckpt = workspace / "data", str(workspace / "run" / "model.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--manifest", str(data / "manifest.json"),
                 "--out", str(tmp_path / "ev")]) == 0
    ev = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert ev["split"] == "test" and len(ev["pairs"]) == 1
    out = tmp_path / "ro" / "pred.csv"
    assert main(["rollout", "--checkpoint", ckpt, "--left", str(data / "test_s0.85_left.csv"),
                 "--right", str(data / "test_s0.85_right.csv"), "--out", str(out)]) == 0
    rep = json.loads((tmp_path / "ro" / "pred.json").read_text())
    assert rep["ndtw"] == pytest.approx(ev["pairs"][0]["ndtw"])
    assert out.read_text().splitlines()[0].startswith("t,")


def test_corrupt_checkpoint_is_runtime_error(tmp_path, workspace, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((workspace / "run" / "model.ckpt").read_bytes()[:200])
    code = main(["rollout", "--checkpoint", str(bad), "--left",
                 str(workspace / "data" / "test_s0.85_left.csv"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert str(bad) in capsys.readouterr().err


def test_fit_dmp_outputs(workspace):
    assert (workspace / "dmp" / "dmp.json").exists()
    assert (workspace / "dmp" / "rollout.csv").exists()


def test_simulate(tmp_path, workspace):
    assert main(["simulate", "--left", str(workspace / "dmp" / "rollout.csv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "t,d,phase"
    rep = json.loads((tmp_path / "trace.json").read_text())
    assert 0 < rep["mean_max_d"] < 1


def test_simulate_static_needs_flag(tmp_path):
    left = tmp_path / "static.csv"
    rows = ["t,x,y,z,roll,pitch,yaw"] + [f"{0.01 * i},0.4,0.3,0.2,0,0,0" for i in range(50)]
    left.write_text("\n".join(rows) + "\n")
    assert main(["simulate", "--left", str(left), "--out", str(tmp_path / "a")]) == 2
    assert main(["simulate", "--left", str(left), "--allow-static", "--out", str(tmp_path / "b")]) == 0


def test_loop_converges_and_writes_iterations(tmp_path, workspace):
    out = tmp_path / "loop"
    code = main(["loop", "--dmp", str(workspace / "dmp" / "dmp.json"), "--checkpoint",
                 str(workspace / "run" / "model.ckpt"), "--set", "initial_amplitude=0.7", "--out", str(out)])
    assert code == 0
    log = [json.loads(x) for x in (out / "loop_log.jsonl").read_text().splitlines()]
    assert log[-1]["converged"]
    for e in log:
        for key in ("left", "right", "trace"):
            assert (out / e[key]).exists()
    assert json.loads((out / "loop_report.json").read_text())["status"] == "converged"


def test_loop_zero_gain_exit_code(tmp_path, workspace):
    cfg = _json(tmp_path / "loop.json", {"gain": 0.0, "initial_amplitude": 0.7, "max_iter": 2})
    code = main(["loop", "--config", cfg, "--dmp", str(workspace / "dmp" / "dmp.json"), "--out", str(tmp_path / "l")])
    assert code == 3
    assert json.loads((tmp_path / "l" / "loop_report.json").read_text())["status"] == "not converged"
