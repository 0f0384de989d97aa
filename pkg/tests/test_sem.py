"""Structural model: conditionals, masking, joint density, mode propagation."""

import numpy as np
import pytest

from anticausal.diffcore import finite_difference_check
from anticausal.errors import ContractError, InvalidSpecError, TaskIndexError
from anticausal.graph import make_spec
from anticausal.sem import (
    Assignment,
    batch_joint_log_density,
    build_model,
    forward_modes,
    instantiate_model,
    joint_log_density,
    mechanism_conditional,
    mechanism_embedding,
    model_env,
    node_log_density,
    parameter_groups,
)

AT_MODE_UNIT_SIGMA = -0.9189385332046727  # -0.5 * ln(2 pi)


def pre_sigma(target):
    """Inverse of softplus(s) + 1e-4 = target."""
    return float(np.log(np.expm1(target - 1e-4)))


def linear_chain_model(x_bias=0.0, w_bias=0.0, y_bias=0.0, sigma=1.0):
    """K=L=M=1 model with affine nets, zero weights, chosen biases."""
    spec = make_spec(1, 1, 1)
    shapes = {"x1.mu": [1, 1], "x1.sig": [1, 1], "w1.shared": [1, 1],
              "w1.head1": [2, 2], "y1.mu": [1, 1], "y1.sig": [1, 1]}
    model = instantiate_model(spec, shapes, seed=0)
    for name in model.params:
        if name != "graph.logits":
            model.params[name][:] = 0.0
    s = pre_sigma(sigma)
    model.params["x1.mu.b0"][:] = x_bias
    model.params["x1.sig.b0"][:] = s
    model.params["w1.head1.b0"][:] = [w_bias, s]
    model.params["y1.mu.b0"][:] = y_bias
    model.params["y1.sig.b0"][:] = s
    return model


def test_build_model_deterministic_in_seed():
    spec = make_spec(2, 2, 2)
    a = build_model(spec, hidden=8, embed=4, seed=5)
    b = build_model(spec, hidden=8, embed=4, seed=5)
    c = build_model(spec, hidden=8, embed=4, seed=6)
    assert sorted(a.params) == sorted(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name]), name
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_build_model_counts_backbones_and_heads():
    model = build_model(make_spec(3, 2, 5), hidden=4, embed=2, seed=0)
    backbones = {p for p in model.shapes if p.endswith(".shared")}
    heads = {p for p in model.shapes if ".head" in p}
    assert len(backbones) == 5
    assert len(heads) == 15


def test_parameter_groups_partition():
    model = build_model(make_spec(2, 2, 3), hidden=4, embed=2, seed=1)
    groups = parameter_groups(model)
    assert set(groups) == {"graph", "shared", "task_1", "task_2"}
    assert groups["graph"] == ["graph.logits"]
    names = [n for g in groups.values() for n in g]
    assert len(names) == len(set(names))
    assert set(names) == set(model.params)
    assert all(".shared." in n for n in groups["shared"])


def test_adjacency_logits_shared_with_registry():
    model = build_model(make_spec(1, 2, 1), hidden=4, embed=2, seed=0)
    assert model.params["graph.logits"] is model.adjacency.logits


def test_instantiate_model_validates_shapes():
    spec = make_spec(1, 1, 1)
    shapes = {"x1.mu": [1, 1], "x1.sig": [1, 1], "w1.shared": [1, 1],
              "w1.head1": [2, 2], "y1.mu": [1, 1], "y1.sig": [1, 1]}
    bad = dict(shapes)
    del bad["y1.sig"]
    with pytest.raises(InvalidSpecError):
        instantiate_model(spec, bad, seed=0)
    bad = dict(shapes)
    bad["w1.head1"] = [3, 2]  # head input must be embed + 1 = 2
    with pytest.raises(InvalidSpecError):
        instantiate_model(spec, bad, seed=0)


def test_node_density_at_mode_unit_sigma():
    model = linear_chain_model(x_bias=0.3, w_bias=0.4, y_bias=-0.2)
    a = Assignment(task=1, z=np.array([1.7]), x=0.3, w=np.array([0.4]), y=-0.2)
    for node in ("X1", "W1", "Y1"):
        assert node_log_density(model, node, a) == pytest.approx(
            AT_MODE_UNIT_SIGMA, abs=1e-12)


def test_node_density_one_sigma_point():
    model = linear_chain_model(sigma=2.0)
    a = Assignment(task=1, z=np.array([0.0]), x=2.0, w=np.array([0.0]), y=0.0)
    expected = -0.5 * np.log(2 * np.pi * 4.0) - 0.5
    assert node_log_density(model, "X1", a) == pytest.approx(expected, abs=1e-12)


def test_node_density_errors():
    model = build_model(make_spec(2, 1, 1), hidden=4, embed=2, seed=0)
    good = Assignment(task=1, z=np.zeros(1), x=0.0, w=np.zeros(1), y=0.0)
    with pytest.raises(ContractError):
        node_log_density(model, "Z1", good)
    with pytest.raises(ContractError):
        node_log_density(model, "X2", good)  # other task's cause
    with pytest.raises(TaskIndexError):
        node_log_density(model, "X1", Assignment(5, np.zeros(1), 0.0,
                                                 np.zeros(1), 0.0))
    with pytest.raises(ContractError):
        node_log_density(model, "X1", Assignment(1, np.zeros(2), 0.0,
                                                 np.zeros(1), 0.0))
    with pytest.raises(ContractError):
        node_log_density(model, "X1", Assignment(1, np.zeros(1), np.nan,
                                                 np.zeros(1), 0.0))


def test_masked_out_confounders_cannot_move_density():
    model = build_model(make_spec(1, 2, 1), hidden=4, embed=2, seed=3)
    model.params["graph.logits"][:] = -1e9
    a1 = Assignment(task=1, z=np.array([1.0, -2.0]), x=0.5,
                    w=np.array([0.1]), y=0.2)
    a2 = Assignment(task=1, z=np.array([30.0, 7.0]), x=0.5,
                    w=np.array([0.1]), y=0.2)
    assert node_log_density(model, "X1", a1) == node_log_density(model, "X1", a2)
    assert joint_log_density(model, a1) == joint_log_density(model, a2)


def test_joint_equals_sum_of_node_terms():
    model = build_model(make_spec(2, 3, 2), hidden=8, embed=4, seed=7)
    rng = np.random.default_rng(0)
    for k in (1, 2):
        a = Assignment(task=k, z=rng.normal(size=3), x=rng.normal(),
                       w=rng.normal(size=2), y=rng.normal())
        parts = [node_log_density(model, f"X{k}", a),
                 node_log_density(model, "W1", a),
                 node_log_density(model, "W2", a),
                 node_log_density(model, f"Y{k}", a)]
        assert joint_log_density(model, a) == pytest.approx(sum(parts), abs=1e-12)


def test_joint_three_nodes_at_modes():
    model = linear_chain_model(x_bias=0.3, w_bias=0.4, y_bias=-0.2)
    a = Assignment(task=1, z=np.array([0.0]), x=0.3, w=np.array([0.4]), y=-0.2)
    assert joint_log_density(model, a) == pytest.approx(
        3 * AT_MODE_UNIT_SIGMA, abs=1e-12)


def test_mechanism_zero_head_gives_bias():
    model = linear_chain_model(w_bias=0.75)
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = Assignment(task=1, z=rng.normal(size=1), x=rng.normal(),
                       w=np.zeros(1), y=0.0)
        mu, sigma = mechanism_conditional(model, 1, a, 1)
        assert mu == 0.75
        assert sigma == pytest.approx(1.0, abs=1e-12)


def test_mechanism_backbone_shared_across_tasks():
    model = build_model(make_spec(2, 2, 1), hidden=4, embed=2, seed=9)
    # identical heads make the sharing observable end to end
    for layer in (0, 1):
        model.params[f"w1.head2.w{layer}"][:] = model.params[f"w1.head1.w{layer}"]
        model.params[f"w1.head2.b{layer}"][:] = model.params[f"w1.head1.b{layer}"]
    a = Assignment(task=1, z=np.array([0.4, -1.2]), x=0.8,
                   w=np.zeros(1), y=0.0)
    assert mechanism_conditional(model, 1, a, 1) == mechanism_conditional(
        model, 1, a, 2)
    emb = mechanism_embedding(model, 1, a.z)
    assert emb.shape == (2,)


def test_mechanism_gated_confounder_is_inert():
    model = build_model(make_spec(1, 2, 1), hidden=4, embed=2, seed=2)
    w_row = model.spec.mechanism_indices()[0]
    model.params["graph.logits"][w_row, 1] = -1e9  # gate Z2 out of W1
    a1 = Assignment(task=1, z=np.array([0.5, 0.0]), x=0.1, w=np.zeros(1), y=0.0)
    a2 = Assignment(task=1, z=np.array([0.5, 99.0]), x=0.1, w=np.zeros(1), y=0.0)
    assert mechanism_conditional(model, 1, a1, 1) == mechanism_conditional(
        model, 1, a2, 1)


def test_mechanism_conditional_errors():
    model = build_model(make_spec(1, 1, 1), hidden=4, embed=2, seed=0)
    a = Assignment(task=1, z=np.zeros(1), x=0.0, w=np.zeros(1), y=0.0)
    with pytest.raises(TaskIndexError):
        mechanism_conditional(model, 1, a, 2)
    with pytest.raises(ContractError):
        mechanism_conditional(model, 2, a, 1)


def test_sigma_floor_reached_exactly():
    model = linear_chain_model()
    model.params["w1.head1.b0"][:] = [0.0, -1000.0]
    a = Assignment(task=1, z=np.zeros(1), x=0.0, w=np.zeros(1), y=0.0)
    _, sigma = mechanism_conditional(model, 1, a, 1)
    assert sigma == 1e-4


def test_forward_modes_bias_propagation():
    model = linear_chain_model(x_bias=0.3, w_bias=0.4, y_bias=-0.2)
    a = forward_modes(model, np.array([5.0]), 1)
    assert a.x == pytest.approx(0.3, abs=1e-15)
    assert a.w[0] == pytest.approx(0.4, abs=1e-15)
    assert a.y == pytest.approx(-0.2, abs=1e-15)


def test_forward_modes_override_exact():
    model = build_model(make_spec(1, 2, 2), hidden=4, embed=2, seed=4)
    a = forward_modes(model, np.array([0.1, 0.2]), 1, x_override=1.25)
    assert a.x == 1.25
    b = forward_modes(model, np.array([0.1, 0.2]), 1, x_override=-3.0)
    assert b.x == -3.0
    assert not np.array_equal(a.w, b.w)


def test_forward_modes_unit_chain_zero_input():
    model = linear_chain_model()
    model.params["x1.mu.w0"][:] = 1.0
    model.params["w1.head1.w0"][:] = np.array([[0.0, 1.0], [0.0, 0.0]])
    model.params["y1.mu.w0"][:] = 1.0
    a = forward_modes(model, np.array([0.0]), 1)
    assert (a.x, a.w[0], a.y) == (0.0, 0.0, 0.0)


def test_batch_joint_matches_single_records():
    model = build_model(make_spec(2, 2, 2), hidden=8, embed=4, seed=11)
    rng = np.random.default_rng(5)
    B = 6
    z = rng.normal(size=(B, 2))
    x = rng.normal(size=B)
    w = rng.normal(size=(B, 2))
    y = rng.normal(size=B)
    batched = batch_joint_log_density(model, model_env(model), 2, z, x, w, y)
    for r in range(B):
        single = joint_log_density(model, Assignment(2, z[r], x[r], w[r], y[r]))
        assert batched.data[r] == pytest.approx(single, abs=1e-12)


def test_joint_gradients_match_fd():
    model = build_model(make_spec(2, 2, 2), hidden=4, embed=2, seed=8)
    rng = np.random.default_rng(3)
    B = 3
    z = rng.normal(size=(B, 2))
    y = rng.normal(size=B)

    def fn(leaves):
        env = model_env(model)
        env["graph.logits"] = leaves["graph.logits"]
        env["x1.mu.w0"] = leaves["x1.mu.w0"]
        env["w1.head1.b1"] = leaves["w1.head1.b1"]
        env["y1.sig.w1"] = leaves["y1.sig.w1"]
        return batch_joint_log_density(model, env, 1, z, leaves["x"],
                                       leaves["w"], y).sum()

    params = {
        "x": rng.normal(size=B),
        "w": rng.normal(size=(B, 2)),
        "graph.logits": model.params["graph.logits"].copy(),
        "x1.mu.w0": model.params["x1.mu.w0"].copy(),
        "w1.head1.b1": model.params["w1.head1.b1"].copy(),
        "y1.sig.w1": model.params["y1.sig.w1"].copy(),
    }
    err = finite_difference_check(fn, params, step=1e-5)
    assert err < 1e-4, err
