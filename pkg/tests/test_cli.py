import csv
import json

import pytest

from meddet_kit.cli import run
from meddet_kit.config import dump_config
from meddet_kit.evalmetrics import CSV_FIELDS
from tinycfg import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(dump_config(tiny_config()))
    for role in ("teacher_small", "teacher_mid", "teacher_large"):
        assert run(["train-teacher", "--config", str(cfg), "--role", role, "--seed", "0",
                    "--out", str(root / "teachers")]) == 0
    return root, cfg


def teacher_paths(root):
    return [str(root / "teachers" / f"{r}.ckpt") for r in ("teacher_small", "teacher_mid", "teacher_large")]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_teacher_outputs(workspace):
    root, _ = workspace
    out = root / "teachers"
    assert {"teacher_small.ckpt", "metrics.csv", "history.csv", "metadata.json"} <= {p.name for p in out.iterdir()}
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["deviation_flags"]["alpha_sigmoid"] is True


def test_distill_eval_and_reproducible_metrics(workspace):
    root, cfg = workspace
    for name in ("a", "b"):
        assert run(["distill", "--config", str(cfg), "--teachers", *teacher_paths(root), "--seed", "0",
                    "--out", str(root / name)]) == 0
    assert (root / "a" / "metrics.csv").read_bytes() == (root / "b" / "metrics.csv").read_bytes()
    assert (root / "a" / "student.ckpt").read_bytes() == (root / "b" / "student.ckpt").read_bytes()
    rows = read_rows(root / "a" / "metrics.csv")
    assert rows[0] == CSV_FIELDS and len(rows) == 2
    assert run(["eval", "--config", str(cfg), "--checkpoint", str(root / "a" / "student.ckpt"),
                "--out", str(root / "eval.csv")]) == 0
    assert read_rows(root / "eval.csv")[1][2] == rows[1][2]


def test_ablate_grid_and_plot(workspace):
    root, cfg = workspace
    grid = root / "grid.json"
    grid.write_text(json.dumps({"alone": {"distillation": False, "use_nmode2": False}, "full": {}}))
    out = root / "abl"
    assert run(["ablate", "--config", str(cfg), "--grid", str(grid), "--seeds", "0", "1",
                "--teachers", *teacher_paths(root), "--seed", "0", "--out", str(out)]) == 0
    rows = read_rows(out / "ablation.csv")
    assert len(rows) == 1 + 4 + 2
    assert run(["plot", "--metrics", str(out / "ablation.csv"), "--history",
                f"full={root / 'teachers' / 'history.csv'}", "--out", str(root / "plots")]) == 0
    assert {"bars.svg", "curves.svg", "tidy.csv"} <= {p.name for p in (root / "plots").iterdir()}


def test_gradcheck_and_dynamics(tmp_path):
    assert run(["gradcheck", "--module", "qfl", "--trials", "3", "--out", str(tmp_path / "g.csv")]) == 0
    assert read_rows(tmp_path / "g.csv")[1][-1] == "1"
    assert run(["dynamics", "--gamma", "0", "--out", str(tmp_path / "t.csv")]) == 0
    last = read_rows(tmp_path / "t.csv")[-1]
    assert abs(float(last[2]) - 0.9219) < 1e-3


def test_gen_data(tmp_path, workspace):
    _, cfg = workspace
    assert run(["gen-data", "--config", str(cfg), "--split", "val", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "val.mdds").exists()


@pytest.mark.parametrize("argv", [
    ["train-teacher", "--role", "teacher_small", "--out", "x"],  # missing --seed
    ["distill", "--seed", "0", "--teachers", "a", "b", "--out", "x"],
    ["frobnicate"],
    ["gradcheck", "--module", "nope"],
    ["gradcheck", "--trials", "0"],
    ["dynamics", "--gamma", "0", "1", "--y0", "0", "--out", "x"],
    ["dynamics", "--gamma", "0", "--step", "0.3", "--t-end", "1", "--out", "x"],
    ["train-teacher", "--role", "teacher_small", "--seed", "0", "--threads", "0", "--out", "x"],
    ["train-teacher", "--role", "teacher_small", "--seed", "0", "--set", "bogus=1", "--out", "x"],
])
def test_validation_errors_exit_one(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1
    assert "error" in capsys.readouterr().err


def test_bad_inputs_exit_one(tmp_path, workspace):
    root, cfg = workspace
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert run(["eval", "--config", str(cfg), "--checkpoint", str(bad), "--out", str(tmp_path / "e.csv")]) == 1
    assert run(["eval", "--config", str(tmp_path / "missing.json"), "--checkpoint", str(bad),
                "--out", str(tmp_path / "e.csv")]) == 1
    metrics = tmp_path / "m.csv"
    metrics.write_text(",".join(CSV_FIELDS) + "\nr,v,oops,0,0,0,0,0\n")
    assert run(["plot", "--metrics", str(metrics), "--out", str(tmp_path / "p")]) == 1


def test_threads_env_validated(tmp_path, monkeypatch, workspace):
    _, cfg = workspace
    monkeypatch.setenv("MEDDET_KIT_THREADS", "many")
    assert run(["gen-data", "--config", str(cfg), "--split", "val", "--out", str(tmp_path)]) == 1
