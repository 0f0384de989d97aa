"""Joint maximum-likelihood fitting of the model across tasks.

The loss for one task batch is the mean negative log density over records
and in-scope nodes (cause, mechanisms, outcome), plus a weighted acyclicity
penalty on the soft adjacency and an optional L1 pull on the learnable edge
weights. Causes and mechanism variables are not observed in the default
mode, so the loss plugs in the model's own conditional modes for them; the
outcome term still ties everything to observed data. Minibatches interleave
round-robin across tasks so the shared backbones see balanced gradients
even when task sizes differ a lot.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffcore import GradientTape, OptimizerState, Tensor, adam_step, as_tensor
from .errors import ContractError, DivergedError, InvalidSpecError
from .graph import acyclicity_penalty, soft_adjacency
from .sem import (
    SemModel,
    batch_node_log_densities,
    cause_mu_sigma,
    mechanism_mu_sigma,
    model_env,
    parameter_groups,
)


@dataclass
class TrainConfig:
    """Fitting knobs; `w` scales the acyclicity penalty, `sparsity` the L1
    pull on learnable edge weights, and `freeze` lists parameter groups to
    leave untouched (for transfer modes).

    `observe_x` switches the cause surrogate from the model's conditional
    mode to recorded values (synthetic supervision). `weight_decay` is an
    L2 penalty on network weight matrices (never on edge logits or biases);
    without it the first layer can absorb any edge weight's magnitude, so
    sparsity alone would grind every gate toward zero.
    """

    w: float = 10.0
    epochs: int = 300
    batch_size: int = 64
    step_size: float = 1e-3
    seed: int = 0
    patience: int = 30
    val_fraction: float = 0.2
    observe_x: bool = False
    sparsity: float = 0.0
    weight_decay: float = 0.0
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        if self.w < 0:
            raise InvalidSpecError(f"w must be >= 0, got {self.w}")
        if self.epochs < 0:
            raise InvalidSpecError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidSpecError(
                f"batch_size must be >= 1, got {self.batch_size}")
        if self.step_size <= 0:
            raise InvalidSpecError(
                f"step_size must be > 0, got {self.step_size}")
        if self.patience < 1:
            raise InvalidSpecError(
                f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise InvalidSpecError(
                f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.sparsity < 0:
            raise InvalidSpecError(
                f"sparsity must be >= 0, got {self.sparsity}")
        if self.weight_decay < 0:
            raise InvalidSpecError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        self.freeze = tuple(self.freeze)


@dataclass
class TrainReport:
    """Per-epoch history; `best_epoch` is a 0-based row index into the
    arrays, or -1 when no epoch ran. Wall-clock is informational only and
    excluded from numbers_equal."""

    train_nll: np.ndarray
    val_nll: np.ndarray
    acyclicity: np.ndarray
    best_epoch: int
    wall_clock: float = field(default=0.0)

    def numbers_equal(self, other: "TrainReport") -> bool:
        return (np.array_equal(self.train_nll, other.train_nll)
                and np.array_equal(self.val_nll, other.val_nll)
                and np.array_equal(self.acyclicity, other.acyclicity)
                and self.best_epoch == other.best_epoch)


def latent_surrogates(model: SemModel, env: dict, k: int, z: Tensor,
                      x_obs=None) -> tuple[Tensor, Tensor]:
    """Training-time stand-ins for the unobserved nodes of task k.

    The cause is either its conditional mode given Z (default) or the
    recorded value; mechanism variables are always their conditional means
    given (Z, cause). Both stay differentiable so the outcome term trains
    the upstream networks through them.
    """
    if x_obs is None:
        x = cause_mu_sigma(model, env, k, z)[0]
    else:
        x = as_tensor(np.asarray(x_obs, dtype=np.float64))
    w = mechanism_mu_sigma(model, env, k, z, x)[0]
    return x, w


def task_mean_nll(model: SemModel, env: dict, k: int, z, y,
                  x_obs=None) -> Tensor:
    """Scalar mean NLL for one task batch over records and in-scope nodes."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractError(f"task {k}: batch must be a nonempty (B, L) block")
    z_t = as_tensor(z)
    x, w = latent_surrogates(model, env, k, z_t, x_obs)
    lx, lw, ly = batch_node_log_densities(model, env, k, z_t, x, w, y)
    total = lx.sum() + lw.sum() + ly.sum()
    scale = 1.0 / (z.shape[0] * (model.spec.n_mechanisms + 2))
    return total * (-scale)


def compute_total_loss(model: SemModel, env: dict,
                       batches: dict[int, tuple], config: TrainConfig) -> Tensor:
    """Mean NLL summed over the task batches present, plus structure terms.

    `batches` maps task index to (z, y, x_obs-or-None) blocks. The sparsity
    and weight-decay penalties cover shared parameters on every call but a
    task's private parameters (its cause gates, nets and heads) only when
    that task's batch is present. Round-robin training visits each task in
    proportion to its data, so this keeps the penalty-to-data ratio equal
    across tasks; penalizing everything every step would over-regularize
    whichever task has the fewest batches.
    """
    if not batches:
        raise ContractError("loss needs at least one task batch")
    loss = None
    for k in sorted(batches):
        z, y, x_obs = batches[k]
        term = task_mean_nll(model, env, k, z, y, x_obs)
        loss = term if loss is None else loss + term
    if config.w != 0.0:
        A = soft_adjacency(model.adjacency, env["graph.logits"])
        loss = loss + config.w * acyclicity_penalty(A)
    if config.sparsity != 0.0:
        scope = np.zeros((model.spec.size, 1))
        for i, v in enumerate(model.spec.variables):
            if v.role == "mechanism" or (v.role == "cause"
                                         and v.task in batches):
                scope[i, 0] = 1.0
        weights = env["graph.logits"].sigmoid() * (model.adjacency.mask * scope)
        loss = loss + config.sparsity * weights.sum()
    if config.weight_decay != 0.0:
        groups = parameter_groups(model)
        covered = set(groups["shared"])
        for k in batches:
            covered.update(groups[f"task_{k}"])
        penalty = None
        for name in sorted(covered):
            if name.rsplit(".", 1)[-1] in ("w0", "w1"):
                sq = (env[name] * env[name]).sum()
                penalty = sq if penalty is None else penalty + sq
        loss = loss + config.weight_decay * penalty
    return loss


def _partition(dataset, config: TrainConfig) -> dict[int, tuple]:
    """Per-task (fit, validation) row indices, deterministic in the seed.

    Validation rows come out of the rows tagged "train"; the test split is
    never touched here.
    """
    out = {}
    for t in dataset.tasks:
        rows = np.flatnonzero(t.rows("train"))
        if rows.size < 2:
            raise ContractError(
                f"task {t.task}: need at least 2 training rows, "
                f"got {rows.size}")
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(t.task,)))
        perm = rng.permutation(rows.size)
        n_val = int(round(config.val_fraction * rows.size))
        n_val = min(max(n_val, 1), rows.size - 1)
        out[t.task] = (rows[perm[n_val:]], rows[perm[:n_val]])
    return out


def _task_block(table, idx, observe_x: bool):
    x_obs = table.x_true[idx] if observe_x else None
    return table.z[idx], table.y[idx], x_obs


def _epoch_nll(model: SemModel, dataset, parts, config: TrainConfig,
               which: int) -> np.ndarray:
    env = model_env(model)
    out = np.zeros(len(dataset.tasks))
    for t in dataset.tasks:
        idx = parts[t.task][which]
        z, y, x_obs = _task_block(t, idx, config.observe_x)
        out[t.task - 1] = task_mean_nll(model, env, t.task, z, y, x_obs).item()
    return out


def validation_nll(model: SemModel, dataset, config: TrainConfig) -> np.ndarray:
    """Per-task mean NLL on the validation rows train() would hold out."""
    return _epoch_nll(model, dataset, _partition(dataset, config), config, 1)


def train(model: SemModel, dataset, config: TrainConfig | None = None
          ) -> tuple[SemModel, TrainReport]:
    """Fit in place with round-robin task minibatches and early stopping.

    Deterministic given the config seed: the same call twice produces
    bitwise-identical parameters and report numbers. The best-validation
    epoch's parameters are restored before returning.
    """
    cfg = config or TrainConfig()
    started = time.perf_counter()
    K = model.spec.n_tasks
    if dataset.n_tasks != K:
        raise ContractError(
            f"dataset has {dataset.n_tasks} tasks, model expects {K}")
    if not dataset.split_assigned():
        raise ContractError("dataset needs split tags before training")
    if cfg.observe_x and not dataset.has_x:
        raise ContractError("observe_x needs x_true columns in the dataset")
    groups = parameter_groups(model)
    unknown = [g for g in cfg.freeze if g not in groups]
    if unknown:
        raise InvalidSpecError(
            f"unknown parameter groups {unknown}; have {sorted(groups)}")
    frozen = {name for g in cfg.freeze for name in groups[g]}
    # each batch steps only the parameters its loss can reach: shared
    # backbones, graph logits, and the batch task's private nets; feeding
    # Adam zero gradients for the rest would instead decay their moments
    # between a starved task's turns and distort its few real updates
    step_names = {}
    for t in dataset.tasks:
        reach = set(groups["shared"]) | set(groups["graph"])
        reach |= set(groups[f"task_{t.task}"])
        step_names[t.task] = [n for n in sorted(reach) if n not in frozen]

    parts = _partition(dataset, cfg)
    state = OptimizerState(step_size=cfg.step_size)
    train_hist, val_hist, acyc_hist = [], [], []
    best_val = np.inf
    best_epoch = -1
    snapshot = None
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, epoch)))
        schedules = {}
        for t in dataset.tasks:
            fit_idx = parts[t.task][0]
            order = fit_idx[rng.permutation(fit_idx.size)]
            schedules[t.task] = [order[s:s + cfg.batch_size]
                                 for s in range(0, order.size, cfg.batch_size)]
        rounds = max(len(b) for b in schedules.values())
        for r in range(rounds):
            for t in dataset.tasks:
                if r >= len(schedules[t.task]):
                    continue
                idx = schedules[t.task][r]
                tape = GradientTape()
                env = tape.leaf_dict(model.params)
                batch = {t.task: _task_block(t, idx, cfg.observe_x)}
                loss = compute_total_loss(model, env, batch, cfg)
                if not np.isfinite(loss.data):
                    raise DivergedError(
                        f"non-finite loss at epoch {epoch} (task {t.task})")
                grads = tape.gradients(loss)
                names = step_names[t.task]
                adam_step(state, {n: model.params[n] for n in names},
                          {n: grads[n] for n in names})

        train_hist.append(_epoch_nll(model, dataset, parts, cfg, 0))
        val_hist.append(_epoch_nll(model, dataset, parts, cfg, 1))
        acyc_hist.append(float(acyclicity_penalty(
            soft_adjacency(model.adjacency))))
        total_val = float(val_hist[-1].sum())
        if total_val < best_val:
            best_val = total_val
            best_epoch = epoch - 1
            snapshot = {n: arr.copy() for n, arr in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if snapshot is not None:
        for name, arr in snapshot.items():
            model.params[name][...] = arr
    report = TrainReport(
        train_nll=np.array(train_hist).reshape(-1, K),
        val_nll=np.array(val_hist).reshape(-1, K),
        acyclicity=np.array(acyc_hist),
        best_epoch=best_epoch,
        wall_clock=time.perf_counter() - started)
    return model, report
