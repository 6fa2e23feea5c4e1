import json

import numpy as np
import pytest

import tcan.model
from tcan.checkpoint import load_checkpoint
from tcan.cli import main
from tcan.data import load_dataset
from tcan.training import read_history_csv

SMALL = ["--d", "8", "--L", "6", "--N", "1", "--heads", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--n", "40", "--seed", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), *SMALL,
                 "--epochs", "3", "--seed", "1"]) == 0
    return out


def test_gen_data_is_deterministic(tmp_path, capsys):
    code, out = run(capsys, "gen-data", "--out", tmp_path / "a", "--n", 200, "--seed", 7)
    assert code == 0 and json.loads(out)["train"] == 160
    run(capsys, "gen-data", "--out", tmp_path / "b", "--n", 200, "--seed", 7)
    for name in ("dataset.json", "train.jsonl", "val.jsonl", "test.jsonl", "generator.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert sum(len(s) for s in ds) == 200


def test_gen_data_binary(tmp_path, capsys):
    run(capsys, "gen-data", "--out", tmp_path, "--n", 20, "--binary")
    assert (tmp_path / "train.bin").read_bytes()[:4] == b"TCAN"
    assert len(load_dataset(tmp_path).train) == 16


def test_gen_data_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--p-flip-t", "0.7"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--snr-v", "0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-data"])
    assert exc.value.code == 2


def test_train_outputs(trained, capsys):
    history = read_history_csv(trained / "history.csv")
    assert [r["epoch"] for r in history] == [1, 2, 3]
    run_config = json.loads((trained / "run_config.json").read_text())
    assert run_config["model"]["d"] == 8 and run_config["train"]["seed"] == 1
    ckpt = load_checkpoint(trained / "best.tckp")
    assert ckpt.meta["run"] == run_config


def test_train_prints_best_val_metrics(tmp_path, data_dir, capsys):
    code, out = run(capsys, "train", "--data", data_dir, "--out", tmp_path, *SMALL,
                    "--epochs", 3, "--seed", 1)
    report = json.loads(out)
    best = min(read_history_csv(tmp_path / "history.csv"), key=lambda r: r["val_mae"])
    assert report["mae"] == best["val_mae"] and report["acc2"] == best["val_acc2"]


def test_train_is_deterministic(tmp_path, data_dir, trained):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), *SMALL,
                 "--epochs", "3", "--seed", "1"]) == 0
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()
    a, b = load_checkpoint(tmp_path / "best.tckp"), load_checkpoint(trained / "best.tckp")
    for name, arr in a.params.items():
        assert arr.tobytes() == b.params[name].tobytes()


def test_lambda_zero_and_no_gates(tmp_path, data_dir):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), *SMALL,
                 "--epochs", "2", "--lambda", "0", "--no-gates"]) == 0
    ckpt = load_checkpoint(tmp_path / "best.tckp")
    assert ckpt.config.lambda_ == 0.0 and not ckpt.config.gates_enabled
    assert not [n for n in ckpt.params if ".gate." in n]
    history = read_history_csv(tmp_path / "history.csv")
    assert all(r["loss_total"] == r["loss_multi"] for r in history)


def test_config_precedence(tmp_path, data_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("d = 4\nL = 6\nN = 1\nh = 2\nepochs = 2\nlambda = 0.1\n")
    out = tmp_path / "out"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--preset", "overfit",
                 "--config", str(cfg), "--d", "8"]) == 0
    run_config = json.loads((out / "run_config.json").read_text())
    # flag beats file, file beats preset
    assert run_config["model"]["d"] == 8
    assert run_config["model"]["N"] == 1 and run_config["train"]["epochs"] == 2
    assert run_config["model"]["lambda"] == 0.1


def test_overfit_preset():
    from tcan.cli import PRESETS
    assert PRESETS["overfit"] == {"d": 16, "L": 16, "N": 2, "epochs": 500}


def test_train_failures(tmp_path, data_dir):
    base = ["train", "--out", str(tmp_path), *SMALL, "--epochs", "1"]
    assert main([*base, "--data", str(tmp_path / "nowhere")]) == 1
    assert main([*base, "--data", str(data_dir), "--lr", "1e30"]) == 1
    assert main([*base, "--data", str(data_dir), "--d", "10", "--heads", "4"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("dropout = 0.2\n")
    assert main([*base, "--data", str(data_dir), "--config", str(bad)]) == 2


def test_eval_reproduces_best_history_row(trained, data_dir, capsys):
    ckpt = str(trained / "best.tckp")
    code, first = run(capsys, "eval", "--checkpoint", ckpt, "--data", data_dir)
    _, second = run(capsys, "eval", "--checkpoint", ckpt, "--data", data_dir)
    assert code == 0 and first == second
    report = json.loads(first)
    best = min(read_history_csv(trained / "history.csv"), key=lambda r: r["val_mae"])
    for m in ("mae", "corr", "acc7", "acc2", "f1"):
        assert report[m] == best[f"val_{m}"]


def test_eval_never_runs_the_joint_branch(trained, data_dir, monkeypatch, capsys):
    def boom(*a, **k):
        raise AssertionError("joint branch executed")
    monkeypatch.setattr(tcan.model, "homogeneous_branch", boom)
    code, _ = run(capsys, "eval", "--checkpoint", trained / "best.tckp", "--data", data_dir,
                  "--split", "test", "--f1-average", "weighted")
    assert code == 0


def test_eval_rejects_architecture_overrides(trained, data_dir, capsys):
    ckpt = str(trained / "best.tckp")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data_dir), "--pooling", "last"]) == 1
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data_dir), "--no-gates"]) == 1
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data_dir), "--pooling", "mean"]) == 0


def test_eval_rejects_other_widths(trained, tmp_path, capsys):
    from tcan.data import SyntheticConfig, generate_synthetic, write_dataset
    write_dataset(generate_synthetic(SyntheticConfig(n_samples=10, d_v=5)), tmp_path)
    assert main(["eval", "--checkpoint", str(trained / "best.tckp"), "--data", str(tmp_path)]) == 1
    (tmp_path / "broken.tckp").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "broken.tckp"),
                 "--data", str(tmp_path)]) == 1


def write_spec(path, **kw):
    spec = {"model": {"d": 8, "L": 6, "N": 1, "h": 2}, "train": {"epochs": 2},
            "data": {"synthetic": {"n_samples": 30}}, "axes": {"N": [1, 2]}, "seeds": [3, 4]}
    spec.update(kw)
    path.write_text(json.dumps(spec))
    return path


def test_ablate_grid(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json")
    code, out = run(capsys, "ablate", spec, "--out", tmp_path / "a")
    assert code == 0
    lines = (tmp_path / "a" / "grid.csv").read_text().splitlines()
    assert out.splitlines() == lines
    header = lines[0].split(",")
    assert header[:3] == ["cell", "N", "n_seeds"] and "mae_mean" in header and "f1_sd" in header
    assert len(lines) == 3
    seeds = (tmp_path / "a" / "seeds.csv").read_text().splitlines()
    assert len(seeds) == 5
    run(capsys, "ablate", spec, "--out", tmp_path / "b")
    for name in ("grid.csv", "seeds.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablate_cell_equals_standalone_train_and_eval(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json", axes={"gates": [True, False]}, seeds=[5])
    run(capsys, "ablate", spec, "--out", tmp_path / "grid")
    row = (tmp_path / "grid" / "seeds.csv").read_text().splitlines()
    fields = dict(zip(row[0].split(","), row[2].split(",")))     # the ungated cell
    assert fields["gates_enabled"] == "false"
    run(capsys, "gen-data", "--out", tmp_path / "data", "--n", 30, "--seed", 5)
    code, out = run(capsys, "train", "--data", tmp_path / "data", "--out", tmp_path / "run",
                    *SMALL, "--epochs", 2, "--seed", 5, "--no-gates")
    _, evaluated = run(capsys, "eval", "--checkpoint", tmp_path / "run" / "best.tckp",
                       "--data", tmp_path / "data")
    assert json.loads(out) == json.loads(evaluated)
    for m in ("mae", "corr", "acc7", "acc2", "f1"):
        assert repr(json.loads(evaluated)[m]) == fields[m]


def test_ablate_records_failed_runs(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json", axes={"learning_rate": [1e-3, 1e30]}, seeds=[0])
    code, out = run(capsys, "ablate", spec, "--out", tmp_path / "out")
    assert code == 0
    rows = (tmp_path / "out" / "grid.csv").read_text().splitlines()
    header = rows[0].split(",")
    failed = dict(zip(header, rows[2].split(",", len(header) - 1)))
    assert failed["n_failed"] == "1" and "non-finite" in failed["errors"]
    assert dict(zip(header, rows[1].split(",")))["n_failed"] == "0"


def test_ablate_usage_errors(tmp_path):
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{not json")
    assert main(["ablate", str(bad_json), "--out", str(tmp_path)]) == 2
    assert main(["ablate", str(write_spec(tmp_path / "s.json", seeds=[])),
                 "--out", str(tmp_path)]) == 2
    assert main(["ablate", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1


def test_gradcheck_command(capsys):
    code, out = run(capsys, "gradcheck")
    assert code == 0 and out.startswith("PASS")
    assert "branch.a" in out and "shared_encoder" in out
    code, out = run(capsys, "gradcheck", "--inject-bug")
    assert code == 1 and "FAIL" in out
    assert main(["gradcheck", "--eps", "0.5"]) == 2
