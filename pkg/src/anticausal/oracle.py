"""Synthetic ground truth with known answers.

A linear-Gaussian generator over the layered graph (confounders feed causes
and mechanisms, causes feed mechanisms, mechanisms feed outcomes) doubles as
a benchmark: joint-mode inversion has a closed form here, and the true edge
set is known for scoring structure recovery. The same coefficients can be
loaded into a SemModel whose affine networks reproduce the generator's
conditionals, giving an exact target for the gradient-based estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InvalidSpecError, TaskIndexError
from .graph import make_spec
from .sem import SIGMA_FLOOR, SemModel, instantiate_model


@dataclass
class GroundTruthSem:
    """Linear-Gaussian structural equations with a shared confounder effect.

    Coefficient layout: a[k] maps Z to cause k; b[i] maps Z to mechanism i
    and is the same for every task; c[i, k] scales cause k inside mechanism
    i; d[k] maps the mechanism vector to outcome k. The `link` tag selects
    a linear or tanh-warped Z-to-mechanism pathway.
    """

    n_tasks: int
    n_confounders: int
    n_mechanisms: int
    x_parents: list[np.ndarray]
    w_parents: list[np.ndarray]
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    bias_x: np.ndarray
    bias_w: np.ndarray
    bias_y: np.ndarray
    sigma_x: np.ndarray
    sigma_w: np.ndarray
    sigma_y: np.ndarray
    link: str = "linear"


@dataclass
class TaskSample:
    """Drawn records for one task, all in generator (raw) units."""

    task: int
    z: np.ndarray
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray


@dataclass
class SyntheticDataset:
    """Per-task samples plus the generator and seed that produced them."""

    gt: GroundTruthSem
    seed: int
    tasks: list[TaskSample]


def _draw_coefficients(rng, shape, low, high):
    magnitude = rng.uniform(low, high, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return magnitude * sign


def make_ground_truth(n_tasks: int = 3, n_confounders: int = 8,
                      n_mechanisms: int = 5, parents_per_node: int = 3,
                      coef_low: float = 0.5, coef_high: float = 1.5,
                      noise_x: float = 0.5, noise_w: float = 0.5,
                      noise_y: float = 0.5, seed: int = 0,
                      link: str = "linear") -> GroundTruthSem:
    """Seeded generator instance; coefficient magnitudes stay in
    [coef_low, coef_high] so every true edge is detectable."""
    K, L, M = n_tasks, n_confounders, n_mechanisms
    if not 0 <= parents_per_node <= L:
        raise InvalidSpecError(
            f"parents_per_node must lie in 0..{L}, got {parents_per_node}")
    if link not in ("linear", "tanh"):
        raise InvalidSpecError(f"unknown link {link!r}")
    rng = np.random.default_rng(seed)
    x_parents = [np.sort(rng.choice(L, size=parents_per_node, replace=False))
                 for _ in range(K)]
    w_parents = [np.sort(rng.choice(L, size=parents_per_node, replace=False))
                 for _ in range(M)]
    a = np.zeros((K, L))
    for k in range(K):
        a[k, x_parents[k]] = _draw_coefficients(
            rng, parents_per_node, coef_low, coef_high)
    b = np.zeros((M, L))
    for i in range(M):
        b[i, w_parents[i]] = _draw_coefficients(
            rng, parents_per_node, coef_low, coef_high)
    c = _draw_coefficients(rng, (M, K), coef_low, coef_high)
    d = _draw_coefficients(rng, (K, M), coef_low, coef_high)
    return GroundTruthSem(
        n_tasks=K, n_confounders=L, n_mechanisms=M,
        x_parents=x_parents, w_parents=w_parents,
        a=a, b=b, c=c, d=d,
        bias_x=np.zeros(K), bias_w=np.zeros(M), bias_y=np.zeros(K),
        sigma_x=np.full(K, noise_x), sigma_w=np.full(M, noise_w),
        sigma_y=np.full(K, noise_y), link=link)


def _w_drive(gt: GroundTruthSem, z: np.ndarray) -> np.ndarray:
    """Confounder contribution to each mechanism row, honoring the link."""
    drive = z @ gt.b.T
    return np.tanh(drive) if gt.link == "tanh" else drive


def sample_dataset(gt: GroundTruthSem, n_per_task: list[int],
                   seed: int = 0) -> SyntheticDataset:
    """Draw records task by task along the generative order Z, X, W, Y.

    Each task gets its own child stream of `seed`, so one task's sample is
    unchanged by resizing another's.
    """
    if len(n_per_task) != gt.n_tasks:
        raise ContractError(
            f"n_per_task must list {gt.n_tasks} counts, got {len(n_per_task)}")
    tasks = []
    for k in range(gt.n_tasks):
        n = int(n_per_task[k])
        if n < 1:
            raise ContractError("each task needs at least one record")
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
        z = rng.standard_normal((n, gt.n_confounders))
        x = (z @ gt.a[k] + gt.bias_x[k]
             + gt.sigma_x[k] * rng.standard_normal(n))
        w = (_w_drive(gt, z) + np.outer(x, gt.c[:, k]) + gt.bias_w
             + gt.sigma_w * rng.standard_normal((n, gt.n_mechanisms)))
        y = (w @ gt.d[k] + gt.bias_y[k]
             + gt.sigma_y[k] * rng.standard_normal(n))
        tasks.append(TaskSample(task=k + 1, z=z, x=x, w=w, y=y))
    return SyntheticDataset(gt=gt, seed=seed, tasks=tasks)


def closed_form_map(gt: GroundTruthSem, y, z, k: int):
    """Exact joint mode of (X, W) given (Y, Z) for task k.

    The linear-Gaussian joint is a strictly concave quadratic in the M+1
    unknowns, so the mode solves one small symmetric positive-definite
    system. The system matrix depends only on coefficients and noise scales;
    right-hand sides vary per record, so batched inputs share one factor.
    Accepts scalar y with vector z, or (B,) y with (B, L) z.
    """
    if gt.link != "linear":
        raise ContractError("closed form requires the linear link")
    if not 1 <= k <= gt.n_tasks:
        raise TaskIndexError(f"task {k} outside 1..{gt.n_tasks}")
    t = k - 1
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scalar = z.ndim == 1
    z2 = z.reshape(1, -1) if scalar else z
    y2 = np.atleast_1d(y)
    M = gt.n_mechanisms
    ax = 1.0 / gt.sigma_x[t] ** 2
    aw = 1.0 / gt.sigma_w ** 2
    ay = 1.0 / gt.sigma_y[t] ** 2
    ck = gt.c[:, t]
    dk = gt.d[t]
    H = np.zeros((M + 1, M + 1))
    H[0, 0] = ax + np.sum(ck ** 2 * aw)
    H[0, 1:] = -ck * aw
    H[1:, 0] = -ck * aw
    H[1:, 1:] = np.diag(aw) + ay * np.outer(dk, dk)
    w_base = z2 @ gt.b.T + gt.bias_w
    rhs = np.zeros((z2.shape[0], M + 1))
    rhs[:, 0] = ax * (z2 @ gt.a[t] + gt.bias_x[t]) - w_base @ (ck * aw)
    rhs[:, 1:] = w_base * aw + np.outer((y2 - gt.bias_y[t]) * ay, dk)
    solution = np.linalg.solve(H, rhs.T).T
    x_star = solution[:, 0]
    w_star = solution[:, 1:]
    if scalar:
        return float(x_star[0]), w_star[0]
    return x_star, w_star


def true_adjacency(gt: GroundTruthSem) -> np.ndarray:
    """Binary adjacency over the canonical roster implied by the generator."""
    spec = make_spec(gt.n_tasks, gt.n_confounders, gt.n_mechanisms)
    n = spec.size
    A = np.zeros((n, n))
    w_rows = spec.mechanism_indices()
    for k in range(1, gt.n_tasks + 1):
        x_row = spec.cause_index(k)
        A[x_row, gt.x_parents[k - 1]] = 1.0
        A[w_rows, x_row] = 1.0
        A[spec.outcome_index(k), w_rows] = 1.0
    for i, row in enumerate(w_rows):
        A[row, gt.w_parents[i]] = 1.0
    return A


def _pre_sigma(sigma: float) -> float:
    if sigma <= SIGMA_FLOOR:
        raise InvalidSpecError(
            f"noise scale {sigma} not representable above the {SIGMA_FLOOR} floor")
    return float(np.log(np.expm1(sigma - SIGMA_FLOOR)))


def load_linear_model(gt: GroundTruthSem, logit_scale: float = 40.0) -> SemModel:
    """SemModel whose affine networks equal the generator's conditionals.

    True parent edges get logit +logit_scale, others -logit_scale, so the
    soft gates sit within 1e-17 of hard 0/1 and hardening recovers the true
    edge set exactly. Only the linear link is representable.
    """
    if gt.link != "linear":
        raise ContractError("only the linear link loads exactly")
    K, L, M = gt.n_tasks, gt.n_confounders, gt.n_mechanisms
    spec = make_spec(K, L, M)
    shapes: dict[str, list[int]] = {}
    for k in range(1, K + 1):
        shapes[f"x{k}.mu"] = [L, 1]
        shapes[f"x{k}.sig"] = [L, 1]
        shapes[f"y{k}.mu"] = [M, 1]
        shapes[f"y{k}.sig"] = [M, 1]
    for i in range(1, M + 1):
        shapes[f"w{i}.shared"] = [L, 1]
        for k in range(1, K + 1):
            shapes[f"w{i}.head{k}"] = [2, 2]
    model = instantiate_model(spec, shapes, seed=0)
    p = model.params
    for k in range(1, K + 1):
        t = k - 1
        p[f"x{k}.mu.w0"][:] = gt.a[t]
        p[f"x{k}.mu.b0"][:] = gt.bias_x[t]
        p[f"x{k}.sig.w0"][:] = 0.0
        p[f"x{k}.sig.b0"][:] = _pre_sigma(gt.sigma_x[t])
        p[f"y{k}.mu.w0"][:] = gt.d[t]
        p[f"y{k}.mu.b0"][:] = gt.bias_y[t]
        p[f"y{k}.sig.w0"][:] = 0.0
        p[f"y{k}.sig.b0"][:] = _pre_sigma(gt.sigma_y[t])
    for i in range(1, M + 1):
        p[f"w{i}.shared.w0"][:] = gt.b[i - 1]
        p[f"w{i}.shared.b0"][:] = 0.0
        for k in range(1, K + 1):
            p[f"w{i}.head{k}.w0"][:] = np.array(
                [[1.0, gt.c[i - 1, k - 1]], [0.0, 0.0]])
            p[f"w{i}.head{k}.b0"][:] = np.array(
                [gt.bias_w[i - 1], _pre_sigma(gt.sigma_w[i - 1])])
    logits = p["graph.logits"]
    logits[model.adjacency.mask != 0] = -logit_scale
    truth = true_adjacency(gt)
    logits[(model.adjacency.mask != 0) & (truth != 0)] = logit_scale
    return model


def ground_truth_to_dict(gt: GroundTruthSem) -> dict:
    """Plain-JSON form of the generator: counts, edges, coefficients."""
    return {
        "n_tasks": gt.n_tasks,
        "n_confounders": gt.n_confounders,
        "n_mechanisms": gt.n_mechanisms,
        "x_parents": [p.tolist() for p in gt.x_parents],
        "w_parents": [p.tolist() for p in gt.w_parents],
        "a": gt.a.tolist(),
        "b": gt.b.tolist(),
        "c": gt.c.tolist(),
        "d": gt.d.tolist(),
        "bias_x": gt.bias_x.tolist(),
        "bias_w": gt.bias_w.tolist(),
        "bias_y": gt.bias_y.tolist(),
        "sigma_x": gt.sigma_x.tolist(),
        "sigma_w": gt.sigma_w.tolist(),
        "sigma_y": gt.sigma_y.tolist(),
        "link": gt.link,
    }


def ground_truth_from_dict(payload: dict) -> GroundTruthSem:
    return GroundTruthSem(
        n_tasks=int(payload["n_tasks"]),
        n_confounders=int(payload["n_confounders"]),
        n_mechanisms=int(payload["n_mechanisms"]),
        x_parents=[np.asarray(p, dtype=int) for p in payload["x_parents"]],
        w_parents=[np.asarray(p, dtype=int) for p in payload["w_parents"]],
        a=np.asarray(payload["a"], dtype=np.float64),
        b=np.asarray(payload["b"], dtype=np.float64),
        c=np.asarray(payload["c"], dtype=np.float64),
        d=np.asarray(payload["d"], dtype=np.float64),
        bias_x=np.asarray(payload["bias_x"], dtype=np.float64),
        bias_w=np.asarray(payload["bias_w"], dtype=np.float64),
        bias_y=np.asarray(payload["bias_y"], dtype=np.float64),
        sigma_x=np.asarray(payload["sigma_x"], dtype=np.float64),
        sigma_w=np.asarray(payload["sigma_w"], dtype=np.float64),
        sigma_y=np.asarray(payload["sigma_y"], dtype=np.float64),
        link=str(payload["link"]),
    )


def unit_chain_ground_truth() -> GroundTruthSem:
    """K=L=M=1 instance: X ~ N(0,1), W = X + noise, Y = W + noise.

    The joint mode given (Z=0, Y=3) is (X, W) = (1, 2), handy as a fixed
    point for inversion tests.
    """
    return GroundTruthSem(
        n_tasks=1, n_confounders=1, n_mechanisms=1,
        x_parents=[np.array([], dtype=int)], w_parents=[np.array([], dtype=int)],
        a=np.zeros((1, 1)), b=np.zeros((1, 1)),
        c=np.ones((1, 1)), d=np.ones((1, 1)),
        bias_x=np.zeros(1), bias_w=np.zeros(1), bias_y=np.zeros(1),
        sigma_x=np.ones(1), sigma_w=np.ones(1), sigma_y=np.ones(1))
