"""End-to-end checks of the command-line pipeline.

Each test drives cli.main in process with a tiny synthetic dataset, so the
whole file stays fast while still covering generate, train, infer, eval,
transfer, experiment, and export-graph along with the error exits.
"""

import csv
import json
import os

import numpy as np
import pytest

from anticausal.cli import SCHEMA, UsageError, main, resolve_config
from anticausal.data_io import load_checkpoint
from anticausal.sem import parameter_groups

GEN = ["--graph.n_tasks", "2", "--graph.n_confounders", "3",
       "--graph.n_mechanisms", "2", "--gen.parents_per_node", "2",
       "--gen.n_per_task", "60"]
SMALL_TRAIN = ["--model.hidden", "8", "--model.embed", "4",
               "--train.epochs", "4", "--train.observe_x", "true"]
FAST_MAP = ["--map.method", "bfgs", "--map.tol", "1e-7",
            "--map.max_iters", "150"]


def _png_ok(path):
    with open(path, "rb") as fh:
        return fh.read(8) == b"\x89PNG\r\n\x1a\n"


def _generate(tmp_path, seed="0"):
    data = tmp_path / "data"
    assert main(["generate", "--out", str(data), "--seed", seed] + GEN) == 0
    return data


def _train(tmp_path, data, name="model.json", extra=()):
    model = tmp_path / name
    code = main(["train", "--data", str(data), "--out", str(model),
                 "--w", "10", "--seed", "0"] + SMALL_TRAIN + list(extra))
    assert code == 0
    return model


def test_generate_writes_tasks_manifest_and_config(tmp_path):
    data = _generate(tmp_path)
    for name in ("task1.csv", "task2.csv", "manifest.json",
                 "resolved_config.json"):
        assert (data / name).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert manifest["n_per_task"] == [60, 60]
    echoed = json.loads((data / "resolved_config.json").read_text())
    assert echoed["command"] == "generate"
    assert echoed["config"]["graph.n_tasks"] == 2


def test_generate_per_task_counts(tmp_path):
    data = tmp_path / "data"
    args = [a for a in GEN if a != "60"]
    args[args.index("--gen.n_per_task") + 1:
         args.index("--gen.n_per_task") + 1] = ["10,20"]
    assert main(["generate", "--out", str(data), "--seed", "0"] + args) == 0
    with open(data / "task2.csv", newline="") as fh:
        assert sum(1 for _ in csv.reader(fh)) == 21  # header + 20 rows


def test_full_pipeline_train_infer_eval(tmp_path):
    data = _generate(tmp_path)
    model = _train(tmp_path, data)
    assert model.exists()
    assert (tmp_path / "model_report.csv").exists()
    assert _png_ok(tmp_path / "model_curves.png")

    est = tmp_path / "est.csv"
    assert main(["infer", "--model", str(model), "--data", str(data),
                 "--task", "1", "--out", str(est)] + FAST_MAP) == 0
    with open(est, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 60
    assert set(rows[0]) == {"unit", "period", "x_hat", "converged",
                            "w_hat_1", "w_hat_2"}

    out = tmp_path / "eval"
    assert main(["eval", "--estimates", str(est),
                 "--truth", str(data / "task1.csv"),
                 "--model", str(model),
                 "--manifest", str(data / "manifest.json"),
                 "--out", str(out)]) == 0
    with open(out / "metrics.csv", newline="") as fh:
        metrics = {r[0]: r[1] for r in csv.reader(fh)}
    assert float(metrics["mae"]) >= 0.0
    assert metrics["n"] == "60"
    assert 0.0 <= float(metrics["edge_f1"]) <= 1.0
    assert _png_ok(out / "reconstruction.png")

    # without --out the metrics land next to the estimates file
    assert main(["eval", "--estimates", str(est),
                 "--truth", str(data / "task1.csv")]) == 0
    assert (tmp_path / "metrics.csv").exists()


def test_train_is_byte_identical_across_runs(tmp_path):
    data = _generate(tmp_path)
    a = _train(tmp_path, data, "a.json")
    b = _train(tmp_path, data, "b.json")
    assert a.read_bytes() == b.read_bytes()


def test_infer_uses_data_units_when_truth_normalized(tmp_path):
    """Estimates come back on the raw x_true scale, not the z-scored one."""
    data = _generate(tmp_path)
    model = _train(tmp_path, data, extra=["--train.epochs", "30"])
    est = tmp_path / "est.csv"
    assert main(["infer", "--model", str(model), "--data", str(data),
                 "--task", "1", "--out", str(est)] + FAST_MAP) == 0
    with open(est, newline="") as fh:
        x_hat = np.array([float(r["x_hat"]) for r in csv.DictReader(fh)])
    with open(data / "task1.csv", newline="") as fh:
        x_true = np.array([float(r["x_true"]) for r in csv.DictReader(fh)])
    # same order of magnitude as the raw data, closer than the zero guess
    assert np.mean(np.abs(x_hat - x_true)) < np.mean(np.abs(x_true))


def test_transfer_zero_shot_copies_shared_bitwise(tmp_path):
    data = _generate(tmp_path)
    teacher_path = _train(tmp_path, data)
    student_path = tmp_path / "student.json"
    assert main(["transfer", "--mode", "zero-shot",
                 "--model", str(teacher_path), "--data", str(data),
                 "--task", "2", "--out", str(student_path)]) == 0
    teacher = load_checkpoint(str(teacher_path))
    student = load_checkpoint(str(student_path))
    shared = parameter_groups(teacher)["shared"]
    for name in shared:
        assert np.array_equal(teacher.params[name], student.params[name])
    assert student.spec.n_tasks == 1


def test_transfer_head_only_trains_but_keeps_shared(tmp_path):
    data = _generate(tmp_path)
    teacher_path = _train(tmp_path, data)
    student_path = tmp_path / "student.json"
    assert main(["transfer", "--mode", "head-only",
                 "--model", str(teacher_path), "--data", str(data),
                 "--task", "2", "--out", str(student_path)]
                + SMALL_TRAIN) == 0
    teacher = load_checkpoint(str(teacher_path))
    student = load_checkpoint(str(student_path))
    for name in parameter_groups(teacher)["shared"]:
        assert np.array_equal(teacher.params[name], student.params[name])


def test_export_graph_writes_csv_and_heatmap(tmp_path):
    data = _generate(tmp_path)
    model = _train(tmp_path, data)
    out = tmp_path / "graph.csv"
    assert main(["export-graph", "--model", str(model),
                 "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"child", "parent", "weight", "kind"}
    assert any(r["kind"] == "fixed" for r in rows)
    assert _png_ok(tmp_path / "graph.png")


def test_experiment_runs_plan_file(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({
        "kind": "ablation_no_map", "seeds": [0], "n_tasks": 2,
        "n_confounders": 3, "n_mechanisms": 2, "parents_per_node": 2,
        "n_per_task": [60, 60], "hidden": 8, "embed": 4,
        "train": {"epochs": 4, "observe_x": True},
        "map": {"method": "bfgs", "tol": 1e-7, "max_iters": 120}}))
    out = tmp_path / "exp"
    assert main(["experiment", "--plan", str(plan),
                 "--out", str(out)]) == 0
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["metric", "seed_0"]
    assert any(r[0].startswith("map/") for r in rows)
    assert (out / "summary.txt").read_text().strip()
    assert _png_ok(out / "report.png")


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_missing_required_path_exits_2(capsys):
    assert main(["train"]) == 2
    assert "error: usage:" in capsys.readouterr().err


def test_runtime_failure_exits_1_with_one_line_error(tmp_path, capsys):
    est = tmp_path / "x.csv"
    code = main(["infer", "--model", str(tmp_path / "missing.json"),
                 "--data", str(tmp_path), "--out", str(est)])
    err = capsys.readouterr().err
    assert code == 1
    assert err.startswith("error: CheckpointError:")
    assert err.count("\n") == 1


def test_config_file_then_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train.epochs": 7, "model.hidden": 8}))
    resolved = resolve_config(str(cfg), {"train.epochs": "3"})
    assert resolved["train.epochs"] == 3
    assert resolved["model.hidden"] == 8
    assert resolved["train.w"] == SCHEMA["train.w"][1]


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train.epochz": 7}))
    with pytest.raises(UsageError, match="train.epochz"):
        resolve_config(str(cfg), {})


def test_bad_flag_value_exits_2(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "d"),
                 "--graph.n_tasks", "two"])
    assert code == 2
    assert "graph.n_tasks" in capsys.readouterr().err
