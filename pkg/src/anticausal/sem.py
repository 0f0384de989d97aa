"""Multi-task structural model over the layered graph.

Every non-confounder node gets a Gaussian conditional whose mean and scale
come from small networks. Cause nodes read the confounder vector gated by
their soft-adjacency row. Each mechanism variable owns one backbone shared by
all tasks plus one head per task; the head sees the backbone embedding
concatenated with the task's cause value. Outcome nodes read the mechanism
vector through fixed edges.

Scales are softplus outputs raised by a small floor so log-densities stay
finite everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, concat, mlp_init
from .errors import ContractError, InvalidSpecError, TaskIndexError
from .graph import AdjacencyModel, GraphSpec, adjacency_init, soft_adjacency

SIGMA_FLOOR = 1e-4
LOG_TWO_PI = 1.8378770664093453


@dataclass
class Assignment:
    """One record's values in normalized units: confounders, the task's cause,
    the mechanism vector, the task's outcome."""

    task: int
    z: np.ndarray
    x: float
    w: np.ndarray
    y: float


@dataclass
class SemModel:
    """Parameter registry plus the wiring needed to evaluate it.

    `params` maps flat names to float64 arrays; `shapes` maps each network
    prefix to its layer sizes. The adjacency logits array is shared with
    params["graph.logits"], so optimizer updates are visible to both.
    `norm` holds per-task normalization metadata once data has been attached.
    """

    spec: GraphSpec
    adjacency: AdjacencyModel
    hidden: int
    embed: int
    params: dict[str, np.ndarray]
    shapes: dict[str, list[int]]
    norm: object | None = None


def _net_prefixes(spec: GraphSpec) -> list[str]:
    out = []
    for k in range(1, spec.n_tasks + 1):
        out += [f"x{k}.mu", f"x{k}.sig"]
    for i in range(1, spec.n_mechanisms + 1):
        out.append(f"w{i}.shared")
        out += [f"w{i}.head{k}" for k in range(1, spec.n_tasks + 1)]
    for k in range(1, spec.n_tasks + 1):
        out += [f"y{k}.mu", f"y{k}.sig"]
    return out


def _expected_io(spec: GraphSpec, prefix: str,
                 shapes: dict[str, list[int]]) -> tuple[int, int]:
    L, M = spec.n_confounders, spec.n_mechanisms
    if prefix.startswith("x"):
        return L, 1
    if prefix.startswith("y"):
        return M, 1
    if ".shared" in prefix:
        return L, shapes[prefix][-1]
    mech = prefix.split(".")[0]
    return shapes[f"{mech}.shared"][-1] + 1, 2


def instantiate_model(spec: GraphSpec, shapes: dict[str, list[int]],
                      seed: int = 0, threshold: float = 0.5) -> SemModel:
    """Build a model from an explicit shape table (one entry per network).

    Checks input/output widths against the wiring: cause and outcome nets map
    L -> 1 and M -> 1, backbones map L -> E, heads map E+1 -> 2. Weights are
    seeded per network; the adjacency starts with all logits at zero.
    """
    missing = [p for p in _net_prefixes(spec) if p not in shapes]
    extra = [p for p in shapes if p not in _net_prefixes(spec)]
    if missing or extra:
        raise InvalidSpecError(
            f"shape table mismatch: missing {missing}, unexpected {extra}")
    params: dict[str, np.ndarray] = {}
    embed = None
    for j, prefix in enumerate(_net_prefixes(spec)):
        sizes = list(shapes[prefix])
        n_in, n_out = _expected_io(spec, prefix, shapes)
        if sizes[0] != n_in or sizes[-1] != n_out:
            raise InvalidSpecError(
                f"{prefix} must map {n_in} -> {n_out}, got {sizes}")
        if ".shared" in prefix:
            embed = sizes[-1]
        net = mlp_init(sizes, np.random.SeedSequence(entropy=seed, spawn_key=(j,)))
        for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
            params[f"{prefix}.w{layer}"] = w
            params[f"{prefix}.b{layer}"] = b
    adjacency = adjacency_init(spec, threshold)
    params["graph.logits"] = adjacency.logits
    return SemModel(spec, adjacency, hidden=0, embed=embed,
                    params=params, shapes=dict(shapes))


def build_model(spec: GraphSpec, hidden: int = 64, embed: int = 16,
                seed: int = 0) -> SemModel:
    """Standard model: one hidden layer of `hidden` units in every network."""
    L, M = spec.n_confounders, spec.n_mechanisms
    shapes: dict[str, list[int]] = {}
    for k in range(1, spec.n_tasks + 1):
        shapes[f"x{k}.mu"] = [L, hidden, 1]
        shapes[f"x{k}.sig"] = [L, hidden, 1]
        shapes[f"y{k}.mu"] = [M, hidden, 1]
        shapes[f"y{k}.sig"] = [M, hidden, 1]
    for i in range(1, M + 1):
        shapes[f"w{i}.shared"] = [L, hidden, embed]
        for k in range(1, spec.n_tasks + 1):
            shapes[f"w{i}.head{k}"] = [embed + 1, hidden, 2]
    model = instantiate_model(spec, shapes, seed)
    model.hidden = hidden
    return model


def model_env(model: SemModel) -> dict[str, Tensor]:
    """Wrap the current parameters as constant tensors for evaluation."""
    return {name: Tensor(value) for name, value in model.params.items()}


def _apply_net(model: SemModel, env: dict, prefix: str, x: Tensor) -> Tensor:
    sizes = model.shapes[prefix]
    out = x
    last = len(sizes) - 2
    for layer in range(len(sizes) - 1):
        out = out @ env[f"{prefix}.w{layer}"].T + env[f"{prefix}.b{layer}"]
        if layer < last:
            out = out.tanh()
    return out


def gaussian_log_density(value, mu, sigma) -> Tensor:
    """Elementwise log N(value; mu, sigma^2); all arguments broadcast."""
    value, mu, sigma = as_tensor(value), as_tensor(mu), as_tensor(sigma)
    resid = (value - mu) / sigma
    return resid.square() * (-0.5) - sigma.log() - 0.5 * LOG_TWO_PI


def _scale(pre: Tensor) -> Tensor:
    return pre.softplus() + SIGMA_FLOOR


def cause_mu_sigma(model: SemModel, env: dict, k: int, z: Tensor):
    """Batched (mu, sigma) of the cause conditional p(X_k | Z)."""
    A = soft_adjacency(model.adjacency, env["graph.logits"])
    gate = A[model.spec.cause_index(k), model.spec.confounder_indices()]
    masked = z * gate
    mu = _apply_net(model, env, f"x{k}.mu", masked)[:, 0]
    sigma = _scale(_apply_net(model, env, f"x{k}.sig", masked)[:, 0])
    return mu, sigma


def mechanism_mu_sigma(model: SemModel, env: dict, k: int, z: Tensor, x: Tensor):
    """Batched (mu, sigma), each (B, M), of every mechanism conditional."""
    A = soft_adjacency(model.adjacency, env["graph.logits"])
    z_cols = model.spec.confounder_indices()
    x_col = x.reshape(-1, 1)
    mus, sigmas = [], []
    w_rows = model.spec.mechanism_indices()
    for i in range(1, model.spec.n_mechanisms + 1):
        gate = A[w_rows[i - 1], z_cols]
        emb = _apply_net(model, env, f"w{i}.shared", z * gate)
        out = _apply_net(model, env, f"w{i}.head{k}", concat([emb, x_col], axis=1))
        mus.append(out[:, 0].reshape(-1, 1))
        sigmas.append(_scale(out[:, 1]).reshape(-1, 1))
    return concat(mus, axis=1), concat(sigmas, axis=1)


def outcome_mu_sigma(model: SemModel, env: dict, k: int, w: Tensor):
    """Batched (mu, sigma) of the outcome conditional p(Y_k | W)."""
    mu = _apply_net(model, env, f"y{k}.mu", w)[:, 0]
    sigma = _scale(_apply_net(model, env, f"y{k}.sig", w)[:, 0])
    return mu, sigma


def batch_node_log_densities(model: SemModel, env: dict, k: int,
                             z, x, w, y):
    """Per-record log-density terms for task k.

    Returns (cause (B,), mechanisms (B, M), outcome (B,)) as tensors; inputs
    may be arrays or tensors, so the same path serves training (parameters as
    leaves) and inversion (cause and mechanism values as leaves).
    """
    if not 1 <= k <= model.spec.n_tasks:
        raise TaskIndexError(f"task {k} outside 1..{model.spec.n_tasks}")
    z, x, w, y = as_tensor(z), as_tensor(x), as_tensor(w), as_tensor(y)
    mu_x, sig_x = cause_mu_sigma(model, env, k, z)
    logp_x = gaussian_log_density(x, mu_x, sig_x)
    mu_w, sig_w = mechanism_mu_sigma(model, env, k, z, x)
    logp_w = gaussian_log_density(w, mu_w, sig_w)
    mu_y, sig_y = outcome_mu_sigma(model, env, k, w)
    logp_y = gaussian_log_density(y, mu_y, sig_y)
    return logp_x, logp_w, logp_y


def batch_joint_log_density(model: SemModel, env: dict, k: int,
                            z, x, w, y) -> Tensor:
    """(B,) tensor of log p(X|Z) + sum_i log p(W_i|Z,X) + log p(Y|W)."""
    logp_x, logp_w, logp_y = batch_node_log_densities(model, env, k, z, x, w, y)
    return logp_x + logp_w.sum(axis=1) + logp_y


def _check_assignment(model: SemModel, a: Assignment) -> None:
    spec = model.spec
    if not 1 <= a.task <= spec.n_tasks:
        raise TaskIndexError(f"task {a.task} outside 1..{spec.n_tasks}")
    z = np.asarray(a.z, dtype=np.float64)
    w = np.asarray(a.w, dtype=np.float64)
    if z.shape != (spec.n_confounders,):
        raise ContractError(f"z must have shape ({spec.n_confounders},)")
    if w.shape != (spec.n_mechanisms,):
        raise ContractError(f"w must have shape ({spec.n_mechanisms},)")
    values = np.concatenate([z, w, [a.x, a.y]])
    if not np.all(np.isfinite(values)):
        raise ContractError("assignment values must be finite")


def node_log_density(model: SemModel, node: str, a: Assignment) -> float:
    """log-density of one roster node's value under its conditional."""
    _check_assignment(model, a)
    var = model.spec.variables[model.spec.index(node)]
    if var.role == "confounder":
        raise ContractError(f"{node} is an observed root with no conditional")
    if var.role in ("cause", "outcome") and var.task != a.task:
        raise ContractError(
            f"{node} belongs to task {var.task}, assignment is task {a.task}")
    env = model_env(model)
    z = np.asarray(a.z, dtype=np.float64).reshape(1, -1)
    w = np.asarray(a.w, dtype=np.float64).reshape(1, -1)
    x = np.array([a.x])
    y = np.array([a.y])
    logp_x, logp_w, logp_y = batch_node_log_densities(
        model, env, a.task, z, x, w, y)
    if var.role == "cause":
        return float(logp_x.data[0])
    if var.role == "outcome":
        return float(logp_y.data[0])
    i = model.spec.mechanism_indices().index(model.spec.index(node))
    return float(logp_w.data[0, i])


def joint_log_density(model: SemModel, a: Assignment) -> float:
    """Sum of the task's cause, mechanism, and outcome log-densities."""
    _check_assignment(model, a)
    env = model_env(model)
    out = batch_joint_log_density(
        model, env, a.task,
        np.asarray(a.z, dtype=np.float64).reshape(1, -1),
        np.array([a.x]),
        np.asarray(a.w, dtype=np.float64).reshape(1, -1),
        np.array([a.y]))
    return float(out.data[0])


def mechanism_conditional(model: SemModel, i: int, a: Assignment,
                          k: int) -> tuple[float, float]:
    """(mu, sigma) of mechanism variable i under task k's head, reading the
    assignment's confounders and cause value. i is 1-based like the roster."""
    if not 1 <= k <= model.spec.n_tasks:
        raise TaskIndexError(f"task {k} outside 1..{model.spec.n_tasks}")
    if not 1 <= i <= model.spec.n_mechanisms:
        raise ContractError(
            f"mechanism index {i} outside 1..{model.spec.n_mechanisms}")
    env = model_env(model)
    z = np.asarray(a.z, dtype=np.float64).reshape(1, -1)
    mu, sigma = mechanism_mu_sigma(model, env, k, as_tensor(z),
                                   as_tensor(np.array([a.x])))
    return float(mu.data[0, i - 1]), float(sigma.data[0, i - 1])


def mechanism_embedding(model: SemModel, i: int, z: np.ndarray) -> np.ndarray:
    """Backbone output for mechanism variable i; task-independent by
    construction, exposed so sharing can be observed directly."""
    env = model_env(model)
    A = soft_adjacency(model.adjacency)
    gate = A[model.spec.mechanism_indices()[i - 1], model.spec.confounder_indices()]
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return _apply_net(model, env, f"w{i}.shared", as_tensor(z * gate)).data[0]


def forward_modes(model: SemModel, z: np.ndarray, k: int,
                  x_override: float | None = None) -> Assignment:
    """Propagate conditional modes: X from Z (unless overridden), each W from
    (Z, X), Y from W. Gaussian mode equals the conditional mean."""
    x, w, y = batch_forward_modes(
        model, k, np.asarray(z, dtype=np.float64).reshape(1, -1),
        None if x_override is None else np.array([float(x_override)]))
    return Assignment(task=k, z=np.asarray(z, dtype=np.float64),
                      x=x[0], w=w[0], y=y[0])


def batch_forward_modes(model: SemModel, k: int, z: np.ndarray,
                        x_override: np.ndarray | None = None):
    """Vectorized forward_modes over rows of z; returns (x (B,), w (B,M),
    y (B,)) arrays."""
    env = model_env(model)
    z_t = as_tensor(np.asarray(z, dtype=np.float64))
    if x_override is None:
        x = cause_mu_sigma(model, env, k, z_t)[0]
    else:
        x = as_tensor(np.asarray(x_override, dtype=np.float64))
    w = mechanism_mu_sigma(model, env, k, z_t, x)[0]
    y = outcome_mu_sigma(model, env, k, w)[0]
    return x.data.copy(), w.data.copy(), y.data.copy()


def parameter_groups(model: SemModel) -> dict[str, list[str]]:
    """Partition of the registry: graph logits, shared backbones, and one
    task-specific group per task (cause net, outcome net, heads)."""
    groups: dict[str, list[str]] = {"graph": ["graph.logits"], "shared": []}
    for k in range(1, model.spec.n_tasks + 1):
        groups[f"task_{k}"] = []
    for name in sorted(model.params):
        if name == "graph.logits":
            continue
        prefix = name.split(".")[0]
        if ".shared." in name:
            groups["shared"].append(name)
        elif ".head" in name:
            k = int(name.split(".head")[1].split(".")[0])
            groups[f"task_{k}"].append(name)
        else:
            k = int(prefix[1:])
            groups[f"task_{k}"].append(name)
    return groups
