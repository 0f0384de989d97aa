"""Joint-mode search: fixed points, oracle agreement, batching, monotonicity."""

import numpy as np
import pytest

from anticausal.errors import DivergedError, InvalidSpecError
from anticausal.graph import make_spec
from anticausal.map_infer import (
    MapConfig,
    initialize_latents,
    map_estimate,
    map_estimate_batch,
)
from anticausal.oracle import (
    closed_form_map,
    load_linear_model,
    make_ground_truth,
    unit_chain_ground_truth,
)
from anticausal.sem import (
    batch_joint_log_density,
    build_model,
    forward_modes,
    model_env,
)

TIGHT = MapConfig(step_size=1e-2, max_iters=4000, tol=1e-10)


def test_config_validation():
    with pytest.raises(InvalidSpecError):
        MapConfig(step_size=0.0)
    with pytest.raises(InvalidSpecError):
        MapConfig(tol=-1.0)
    with pytest.raises(InvalidSpecError):
        MapConfig(max_iters=0)
    with pytest.raises(InvalidSpecError):
        MapConfig(method="newton")


def test_initialize_latents_matches_forward_modes():
    model = build_model(make_spec(2, 3, 2), hidden=8, embed=4, seed=0)
    z = np.random.default_rng(0).standard_normal(3)
    x0, w0 = initialize_latents(model, z, 2)
    a = forward_modes(model, z, 2)
    assert x0 == a.x
    assert np.array_equal(w0, a.w)


def test_unit_chain_fixed_point():
    model = load_linear_model(unit_chain_ground_truth())
    res = map_estimate(model, 3.0, np.zeros(1), 1, TIGHT)
    assert res.converged
    assert res.x_hat == pytest.approx(1.0, abs=1e-4)
    assert res.w_hat[0] == pytest.approx(2.0, abs=1e-4)
    assert np.all(np.diff(res.trajectory) >= 0)


def test_unit_chain_default_config_close():
    # the default budget stops on a loose relative tolerance, so the answer
    # is close but not polished
    model = load_linear_model(unit_chain_ground_truth())
    res = map_estimate(model, 3.0, np.zeros(1), 1)
    assert res.x_hat == pytest.approx(1.0, abs=1e-2)
    assert res.w_hat[0] == pytest.approx(2.0, abs=2e-2)


def test_unit_chain_bfgs_method():
    model = load_linear_model(unit_chain_ground_truth())
    res = map_estimate(model, 3.0, np.zeros(1), 1, MapConfig(method="bfgs"))
    assert res.converged
    assert res.iterations <= 10
    assert res.x_hat == pytest.approx(1.0, abs=1e-9)
    assert res.w_hat[0] == pytest.approx(2.0, abs=1e-9)
    assert np.all(np.diff(res.trajectory) >= 0)


def test_unit_chain_symmetric_target_stays_at_origin():
    model = load_linear_model(unit_chain_ground_truth())
    res = map_estimate(model, 0.0, np.zeros(1), 1)
    assert res.x_hat == 0.0
    assert res.w_hat[0] == 0.0
    assert res.converged


def test_unit_chain_gradient_method():
    model = load_linear_model(unit_chain_ground_truth())
    cfg = MapConfig(step_size=0.1, max_iters=4000, tol=1e-10, method="gradient")
    res = map_estimate(model, 3.0, np.zeros(1), 1, cfg)
    assert res.x_hat == pytest.approx(1.0, abs=1e-4)


def test_unit_chain_matches_grid_search():
    model = load_linear_model(unit_chain_ground_truth())
    xs = np.linspace(0.0, 2.0, 201)
    ws = np.linspace(1.0, 3.0, 201)
    gx, gw = np.meshgrid(xs, ws, indexing="ij")
    B = gx.size
    f = batch_joint_log_density(
        model, model_env(model), 1,
        np.zeros((B, 1)), gx.ravel(), gw.reshape(-1, 1), np.full(B, 3.0))
    best = int(np.argmax(f.data))
    res = map_estimate(model, 3.0, np.zeros(1), 1, TIGHT)
    assert abs(res.x_hat - gx.ravel()[best]) <= 0.01 + 1e-9
    assert abs(res.w_hat[0] - gw.ravel()[best]) <= 0.01 + 1e-9


def test_outcome_at_forward_mode_is_stationary():
    # constant sigma nets make the initialization exactly stationary when
    # the observed outcome equals the forward-mode outcome
    gt = make_ground_truth(n_tasks=1, n_confounders=3, n_mechanisms=2,
                           parents_per_node=2, seed=5)
    model = load_linear_model(gt)
    z = np.random.default_rng(3).standard_normal(3)
    a = forward_modes(model, z, 1)
    res = map_estimate(model, a.y, z, 1)
    assert res.x_hat == a.x
    assert np.array_equal(res.w_hat, a.w)
    assert res.converged
    assert res.iterations == 1


def test_matches_closed_form_on_random_instances():
    for seed in range(3):
        gt = make_ground_truth(n_tasks=1, n_confounders=3, n_mechanisms=2,
                               parents_per_node=2, seed=seed)
        model = load_linear_model(gt)
        rng = np.random.default_rng(50 + seed)
        z = rng.standard_normal((10, 3))
        y = rng.standard_normal(10) * 2.0
        results = map_estimate_batch(model, y, z, 1, TIGHT)
        x_star, w_star = closed_form_map(gt, y, z, 1)
        for r, res in enumerate(results):
            assert res.converged
            assert abs(res.x_hat - x_star[r]) <= 1e-3
            assert np.max(np.abs(res.w_hat - w_star[r])) <= 1e-3


def test_bfgs_matches_closed_form_at_full_size():
    gt = make_ground_truth(seed=41)
    model = load_linear_model(gt)
    rng = np.random.default_rng(42)
    cfg = MapConfig(method="bfgs", tol=1e-9, max_iters=300)
    for k in (1, 2, 3):
        z = rng.standard_normal((20, gt.n_confounders))
        y = rng.standard_normal(20) * 2.0
        results = map_estimate_batch(model, y, z, k, cfg)
        x_star, _ = closed_form_map(gt, y, z, k)
        for r, res in enumerate(results):
            assert res.converged
            assert abs(res.x_hat - x_star[r]) <= 1e-8


def test_bfgs_batch_matches_single_records():
    gt = make_ground_truth(n_tasks=1, n_confounders=4, n_mechanisms=3,
                           parents_per_node=2, seed=23)
    model = load_linear_model(gt)
    rng = np.random.default_rng(29)
    z = rng.standard_normal((5, 4))
    y = rng.standard_normal(5)
    cfg = MapConfig(method="bfgs", tol=1e-9, max_iters=200)
    batch = map_estimate_batch(model, y, z, 1, cfg)
    for r in range(5):
        single = map_estimate(model, y[r], z[r], 1, cfg)
        assert abs(batch[r].x_hat - single.x_hat) < 1e-10
        assert np.max(np.abs(batch[r].w_hat - single.w_hat)) < 1e-10


def test_bfgs_monotone_on_untrained_model():
    model = build_model(make_spec(2, 4, 3), hidden=8, embed=4, seed=6)
    rng = np.random.default_rng(19)
    for k in (1, 2):
        z = rng.standard_normal(4)
        y = rng.standard_normal() * 3.0
        cfg = MapConfig(method="bfgs", max_iters=300, tol=1e-9)
        res = map_estimate(model, y, z, k, cfg)
        assert np.all(np.diff(res.trajectory) >= 0)
        assert res.converged


def test_trajectory_monotone_on_untrained_model():
    model = build_model(make_spec(2, 4, 3), hidden=8, embed=4, seed=2)
    rng = np.random.default_rng(7)
    for k in (1, 2):
        z = rng.standard_normal(4)
        y = rng.standard_normal() * 3.0
        res = map_estimate(model, y, z, k, MapConfig(max_iters=300))
        assert np.all(np.diff(res.trajectory) >= 0)
        assert res.trajectory[-1] >= res.trajectory[0]
        assert len(res.trajectory) == res.iterations + 1


def test_model_parameters_untouched():
    model = build_model(make_spec(1, 3, 2), hidden=8, embed=4, seed=4)
    before = {name: arr.copy() for name, arr in model.params.items()}
    map_estimate(model, 1.5, np.zeros(3), 1, MapConfig(max_iters=100))
    for name, arr in model.params.items():
        assert np.array_equal(arr, before[name]), name


def test_batch_matches_single_records():
    gt = make_ground_truth(n_tasks=1, n_confounders=4, n_mechanisms=2,
                           parents_per_node=2, seed=9)
    model = load_linear_model(gt)
    rng = np.random.default_rng(11)
    z = rng.standard_normal((6, 4))
    y = rng.standard_normal(6)
    cfg = MapConfig(max_iters=500, tol=1e-8)
    batch = map_estimate_batch(model, y, z, 1, cfg)
    for r in range(6):
        single = map_estimate(model, y[r], z[r], 1, cfg)
        assert abs(batch[r].x_hat - single.x_hat) < 1e-10
        assert np.max(np.abs(batch[r].w_hat - single.w_hat)) < 1e-10


def test_batch_order_invariant():
    gt = make_ground_truth(n_tasks=1, n_confounders=4, n_mechanisms=2,
                           parents_per_node=2, seed=13)
    model = load_linear_model(gt)
    rng = np.random.default_rng(17)
    z = rng.standard_normal((8, 4))
    y = rng.standard_normal(8)
    cfg = MapConfig(max_iters=200, tol=1e-8)
    forward = map_estimate_batch(model, y, z, 1, cfg)
    perm = rng.permutation(8)
    shuffled = map_estimate_batch(model, y[perm], z[perm], 1, cfg)
    for out_pos, in_pos in enumerate(perm):
        assert shuffled[out_pos].x_hat == forward[in_pos].x_hat
        assert np.array_equal(shuffled[out_pos].w_hat, forward[in_pos].w_hat)


def test_nonfinite_observation_diverges():
    model = build_model(make_spec(1, 2, 1), hidden=4, embed=2, seed=0)
    with pytest.raises(DivergedError):
        map_estimate(model, np.inf, np.zeros(2), 1)


def test_budget_exhaustion_reported():
    model = load_linear_model(unit_chain_ground_truth())
    res = map_estimate(model, 3.0, np.zeros(1), 1, MapConfig(max_iters=1))
    assert not res.converged
    assert res.iterations == 1
