"""Metric arithmetic and the seeded experiment protocols at toy scale."""

import numpy as np
import pytest

from anticausal.errors import ContractError, InvalidSpecError
from anticausal.evalsuite import (
    ExperimentPlan,
    MetricReport,
    edge_scores,
    learned_edge_set,
    plan_from_dict,
    reconstruction_error,
    run_experiment,
    subset_tasks,
    true_edge_set,
)
from anticausal.data_io import (
    dataset_from_synthetic,
    fit_apply_normalizer,
    split_dataset,
)
from anticausal.map_infer import MapConfig
from anticausal.oracle import (
    load_linear_model,
    make_ground_truth,
    sample_dataset,
    true_adjacency,
)
from anticausal.training import TrainConfig


def test_reconstruction_error_arithmetic():
    assert reconstruction_error([1.0, 3.0], [2.0, 5.0]) == (1.5, 2.5)
    assert reconstruction_error([4.0, -1.0], [4.0, -1.0]) == (0.0, 0.0)
    assert reconstruction_error([0.0], [2.0]) == (2.0, 4.0)


def test_reconstruction_error_contract():
    with pytest.raises(ContractError):
        reconstruction_error([1.0, 2.0], [1.0])
    with pytest.raises(ContractError):
        reconstruction_error([], [])


def test_edge_scores_arithmetic():
    learned = {("X1", "Z1")}
    true = {("X1", "Z1"), ("X1", "Z2")}
    p, r, f1 = edge_scores(learned, true)
    assert (p, r) == (1.0, 0.5)
    assert f1 == pytest.approx(2.0 / 3.0)
    assert edge_scores(true, true) == (1.0, 1.0, 1.0)
    assert edge_scores({("X1", "Z1")}, {("X1", "Z2")}) == (0.0, 0.0, 0.0)
    assert edge_scores(set(), true) == (0.0, 0.0, 0.0)


def test_edge_sets_on_oracle_model():
    gt = make_ground_truth(n_tasks=2, n_confounders=4, n_mechanisms=2,
                           parents_per_node=2, seed=3)
    model = load_linear_model(gt)
    learned = learned_edge_set(model)
    true = true_edge_set(model.spec, true_adjacency(gt))
    assert learned == true
    assert edge_scores(learned, true) == (1.0, 1.0, 1.0)
    # whole graphs are compared: structural edges count alongside the
    # thresholded ones
    assert ("W1", "X1") in learned
    assert ("Y2", "W2") in learned
    learnable = {(c, p) for c, p in learned if p.startswith("Z")}
    assert len(learnable) == (2 + 2) * 2  # 2 parents per X row and W row


def test_plan_validation():
    with pytest.raises(InvalidSpecError):
        ExperimentPlan(kind="bogus")
    with pytest.raises(InvalidSpecError):
        ExperimentPlan(kind="transfer", n_tasks=1)
    with pytest.raises(InvalidSpecError):
        ExperimentPlan(kind="joint_vs_single", target_task=9)
    with pytest.raises(InvalidSpecError):
        ExperimentPlan(kind="joint_vs_single", n_per_task=(10,))
    with pytest.raises(InvalidSpecError):
        ExperimentPlan(kind="ablation_W", mechanism_counts=())
    with pytest.raises(InvalidSpecError):
        ExperimentPlan(kind="ablation_W", data_dir="somewhere")
    with pytest.raises(InvalidSpecError):
        ExperimentPlan(kind="transfer", seeds=())


def test_plan_default_counts_by_kind():
    starved = ExperimentPlan(kind="joint_vs_single", target_task=2)
    assert starved.resolved_counts() == (2000, 200, 2000)
    balanced = ExperimentPlan(kind="ablation_no_map")
    assert balanced.resolved_counts() == (2000, 2000, 2000)
    explicit = ExperimentPlan(kind="transfer", n_per_task=(50, 60, 70))
    assert explicit.resolved_counts() == (50, 60, 70)


def test_plan_from_dict_round_trip():
    plan = plan_from_dict({
        "kind": "transfer",
        "seeds": [0, 1],
        "n_tasks": 2,
        "train": {"epochs": 4, "observe_x": True},
        "map": {"method": "bfgs", "tol": 1e-7},
    })
    assert plan.kind == "transfer"
    assert plan.train.epochs == 4
    assert plan.map_config.method == "bfgs"
    with pytest.raises(InvalidSpecError):
        plan_from_dict({"kind": "transfer", "n_tasks": 2, "mystery": 1})
    with pytest.raises(InvalidSpecError):
        plan_from_dict({"seeds": [0]})


def test_subset_tasks_preserves_rows():
    gt = make_ground_truth(n_tasks=3, n_confounders=3, n_mechanisms=2,
                           parents_per_node=2, seed=0)
    ds = dataset_from_synthetic(sample_dataset(gt, [20, 30, 40], seed=1))
    tagged = split_dataset(ds, seed=2)
    scaled, _ = fit_apply_normalizer(tagged)
    sub = subset_tasks(scaled, [3, 1])
    assert sub.n_tasks == 2
    assert sub.task(1).n_records == 40
    assert np.array_equal(sub.task(1).z, scaled.task(3).z)
    assert np.array_equal(sub.task(1).split, scaled.task(3).split)
    assert np.array_equal(sub.task(2).y, scaled.task(1).y)


def tiny_plan(kind, **kw):
    defaults = dict(
        kind=kind,
        seeds=(0,),
        n_tasks=2,
        n_confounders=3,
        n_mechanisms=2,
        parents_per_node=2,
        n_per_task=(60, 90),
        hidden=8,
        embed=4,
        train=TrainConfig(epochs=5, batch_size=32, step_size=3e-3,
                          patience=5, observe_x=True, sparsity=0.01),
        map_config=MapConfig(method="bfgs", tol=1e-7, max_iters=120),
    )
    defaults.update(kw)
    return ExperimentPlan(**defaults)


def test_joint_vs_single_structure_and_determinism():
    plan = tiny_plan("joint_vs_single")
    report = run_experiment(plan)
    for arm in ("joint", "single"):
        for k in (1, 2):
            assert np.isfinite(report.metrics[f"{arm}/task{k}/mae"]).all()
            assert (report.metrics[f"{arm}/task{k}/mse"] >= 0).all()
    assert 0.0 <= report.median("edges/f1") <= 1.0
    assert not report.failures
    again = run_experiment(plan)
    for key, values in report.metrics.items():
        assert np.array_equal(values, again.metrics[key]), key


def test_ablation_no_map_covers_three_arms():
    plan = tiny_plan("ablation_no_map")
    report = run_experiment(plan)
    for arm in ("map", "forward", "reports"):
        for k in (1, 2):
            assert np.isfinite(report.metrics[f"{arm}/task{k}/mae"]).all()
    assert "edges/f1" in report.metrics
    assert not report.failures


def test_transfer_covers_four_modes():
    plan = tiny_plan("transfer", n_per_task=(40, 90))
    report = run_experiment(plan)
    for mode in ("zero_shot", "head_only", "full", "single"):
        assert np.isfinite(report.metrics[f"{mode}/mae"]).all()
    assert not report.failures


def test_ablation_w_sweeps_mechanism_counts():
    plan = tiny_plan("ablation_W", mechanism_counts=(1, 2))
    report = run_experiment(plan)
    for m in (1, 2):
        for k in (1, 2):
            assert np.isfinite(report.metrics[f"m{m}/task{k}/mae"]).all()
    assert not report.failures


def test_report_rows_and_summary():
    report = MetricReport(
        kind="transfer", seeds=(0, 1),
        metrics={"single/mae": np.array([0.5, 0.7])})
    rows = report.csv_rows()
    assert rows[0] == ["metric", "seed_0", "seed_1", "median", "min", "max"]
    assert rows[1][0] == "single/mae"
    assert float(rows[1][3]) == pytest.approx(0.6)
    text = report.summary()
    assert "transfer" in text
    assert "median" in text
    assert report.spread("single/mae") == (pytest.approx(0.6), 0.5, 0.7)
