"""Joint-mode recovery of a task's cause and mechanism values.

Given observed confounders and outcome, ascend the frozen model's joint log
density over (X, W) from the conditional-mode initialization. The search runs
in residual coordinates: X = X0 + s_x * u_x and W = mu_W(Z, X) + s_w * u_w,
where the scales are the conditional sigmas at the start. Two effects make
this worthwhile. The mechanism residual term then has unit curvature even
when a trained sigma sits on its floor, and moving X drags W's mean along
instead of fighting the near-rigid coupling between them. The substitution
is a smooth bijection, so stationary points are exactly those of the raw
parameterization.

Each record in a batch carries its own optimizer state, backtracking scale,
and convergence flag; per-record results do not depend on which other records
share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import GradientTape, as_tensor
from .errors import DivergedError, InvalidSpecError
from .sem import (
    SemModel,
    cause_mu_sigma,
    forward_modes,
    gaussian_log_density,
    mechanism_mu_sigma,
    model_env,
    outcome_mu_sigma,
)

_MAX_HALVINGS = 30
_STALL_LIMIT = 3


@dataclass
class MapConfig:
    """Ascent settings: step size, iteration budget, stop tolerance, update rule.

    Methods: "adam" (adaptive-moment), "gradient" (plain ascent), "bfgs"
    (per-record secant curvature estimates; the search space has only M+1
    coordinates, and the outcome term couples them strongly enough that
    first-order methods need thousands of iterations where the secant method
    needs tens). step_size seeds the trial step for the first two; bfgs
    tries the natural unit step and only falls back to scaled gradient steps.
    """

    step_size: float = 1e-2
    max_iters: int = 2000
    tol: float = 1e-6
    method: str = "adam"

    def __post_init__(self):
        if self.step_size <= 0:
            raise InvalidSpecError(f"step_size must be > 0, got {self.step_size}")
        if self.tol <= 0:
            raise InvalidSpecError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise InvalidSpecError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.method not in ("adam", "gradient", "bfgs"):
            raise InvalidSpecError(f"unknown method {self.method!r}")


@dataclass
class MapResult:
    """One record's estimate: cause and mechanism values in normalized units,
    the per-iteration objective, and how the run ended."""

    x_hat: float
    w_hat: np.ndarray
    trajectory: np.ndarray
    converged: bool
    iterations: int


def initialize_latents(model: SemModel, z: np.ndarray, k: int):
    """Conditional-mode start: X at its mean given Z, W at its means given
    (Z, X). Ignores the outcome entirely."""
    a = forward_modes(model, z, k)
    return a.x, a.w


class _BatchObjective:
    """Joint log density of B records as a function of residual coordinates."""

    def __init__(self, model, k, z, y):
        self.model = model
        self.k = k
        self.env = model_env(model)
        self.z_t = as_tensor(np.asarray(z, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64)
        mu_x, sig_x = cause_mu_sigma(model, self.env, k, self.z_t)
        self.mu_x = mu_x.data.copy()
        self.sig_x = sig_x.data.copy()
        self.x0 = self.mu_x
        mu_w, sig_w = mechanism_mu_sigma(model, self.env, k, self.z_t,
                                         as_tensor(self.x0))
        self.w0 = mu_w.data.copy()
        self.scale_w = sig_w.data.copy()

    def tensors(self, ux, uw):
        x = as_tensor(self.x0) + as_tensor(self.sig_x) * ux
        mu_w, sig_w = mechanism_mu_sigma(self.model, self.env, self.k,
                                         self.z_t, x)
        w = mu_w + as_tensor(self.scale_w) * uw
        logp_x = gaussian_log_density(x, self.mu_x, self.sig_x)
        logp_w = gaussian_log_density(w, mu_w, sig_w)
        mu_y, sig_y = outcome_mu_sigma(self.model, self.env, self.k, w)
        logp_y = gaussian_log_density(self.y, mu_y, sig_y)
        return x, w, logp_x + logp_w.sum(axis=1) + logp_y

    def values(self, ux, uw):
        _, _, f = self.tensors(as_tensor(ux), as_tensor(uw))
        return f.data.copy()

    def value_and_grads(self, ux, uw):
        tape = GradientTape()
        ux_t = tape.leaf("ux", ux)
        uw_t = tape.leaf("uw", uw)
        _, _, f = self.tensors(ux_t, uw_t)
        grads = tape.gradients(f.sum())
        return f.data.copy(), grads["ux"], grads["uw"]

    def decode(self, ux, uw):
        x, w, _ = self.tensors(as_tensor(ux), as_tensor(uw))
        return x.data.copy(), w.data.copy()


def _secant_update(curvature, step, grad_change):
    """Refresh per-record inverse-curvature estimates from one secant pair.

    ``step`` and ``grad_change`` are (B, n) arrays holding, per record, the
    accepted move and the change in the descent-convention gradient across
    it.  Records whose pair fails the positivity condition (including frozen
    records, whose step is zero) keep their current estimate.
    """
    pair_dot = np.einsum("bi,bi->b", step, grad_change)
    valid = pair_dot > 1e-12
    rho = 1.0 / np.where(valid, pair_dot, 1.0)
    n_dim = curvature.shape[-1]
    eye = np.eye(n_dim)
    left = eye[None, :, :] - rho[:, None, None] * (
        step[:, :, None] * grad_change[:, None, :])
    refreshed = left @ curvature @ left.transpose(0, 2, 1)
    refreshed = refreshed + rho[:, None, None] * (
        step[:, :, None] * step[:, None, :])
    return np.where(valid[:, None, None], refreshed, curvature)


def map_estimate_batch(model: SemModel, y, z, k: int,
                       config: MapConfig | None = None) -> list[MapResult]:
    """Run the ascent for every (y, z) row; one MapResult per record."""
    cfg = config or MapConfig()
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    B = z.shape[0]
    obj = _BatchObjective(model, k, z, y)
    M = model.spec.n_mechanisms

    n_dim = M + 1

    ux = np.zeros(B)
    uw = np.zeros((B, M))
    m_x = np.zeros(B)
    v_x = np.zeros(B)
    m_w = np.zeros((B, M))
    v_w = np.zeros((B, M))
    step_count = np.zeros(B)
    curvature = np.tile(np.eye(n_dim), (B, 1, 1))
    prev_step = None
    prev_grad = None
    lr_scale = np.ones(B)
    stalls = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=int)

    f_cur = obj.values(ux, uw)
    if not np.all(np.isfinite(f_cur)):
        bad = int(np.argmax(~np.isfinite(f_cur)))
        raise DivergedError(
            f"objective not finite at initialization (record {bad})")
    trajectory = [f_cur.copy()]
    f_cur, gx, gw = obj.value_and_grads(ux, uw)

    b1, b2, eps = 0.9, 0.999, 1e-8
    half_budget = _MAX_HALVINGS // 2
    for it in range(1, cfg.max_iters + 1):
        active = ~converged
        if not active.any():
            break
        if cfg.method == "adam":
            step_count = np.where(active, step_count + 1, step_count)
            m_x = np.where(active, b1 * m_x + (1 - b1) * gx, m_x)
            v_x = np.where(active, b2 * v_x + (1 - b2) * gx * gx, v_x)
            m_w = np.where(active[:, None], b1 * m_w + (1 - b1) * gw, m_w)
            v_w = np.where(active[:, None], b2 * v_w + (1 - b2) * gw * gw, v_w)
            bc1 = 1.0 - b1 ** np.maximum(step_count, 1.0)
            bc2 = 1.0 - b2 ** np.maximum(step_count, 1.0)
            d_x = (m_x / bc1) / np.sqrt(v_x / bc2 + eps)
            d_w = (m_w / bc1[:, None]) / np.sqrt(v_w / bc2[:, None] + eps)
        elif cfg.method == "bfgs":
            grad_full = np.concatenate([gx[:, None], gw], axis=1)
            if prev_step is not None:
                curvature = _secant_update(curvature, prev_step,
                                           prev_grad - grad_full)
            direction = np.einsum("bij,bj->bi", curvature, grad_full)
            d_x = direction[:, 0]
            d_w = direction[:, 1:]
        else:
            d_x = gx
            d_w = gw

        accepted = ~active  # frozen records need no step
        next_ux = ux.copy()
        next_uw = uw.copy()
        f_next = f_cur.copy()

        def ladder(dir_x, dir_w, rounds, scale):
            nonlocal accepted, next_ux, next_uw, f_next
            trial = scale * lr_scale.copy()
            for _ in range(rounds):
                pending = ~accepted
                if not pending.any():
                    break
                prop_ux = np.where(pending, ux + trial * dir_x, next_ux)
                prop_uw = np.where(pending[:, None],
                                   uw + trial[:, None] * dir_w, next_uw)
                f_prop = obj.values(prop_ux, prop_uw)
                ok = pending & np.isfinite(f_prop) & (f_prop >= f_cur)
                next_ux = np.where(ok, prop_ux, next_ux)
                next_uw = np.where(ok[:, None], prop_uw, next_uw)
                f_next = np.where(ok, f_prop, f_next)
                accepted |= ok
                trial = np.where(~accepted, trial * 0.5, trial)

        if cfg.method == "adam":
            # adaptive direction first; records it cannot improve retry
            # along the raw gradient, whose safe step shrinks with the
            # gradient itself near a mode
            ladder(d_x, d_w, half_budget, cfg.step_size)
            ladder(gx, gw, half_budget, cfg.step_size)
        elif cfg.method == "bfgs":
            # the secant direction carries its own scale; unit trial first
            ladder(d_x, d_w, half_budget, 1.0)
            ladder(gx, gw, half_budget, cfg.step_size)
        else:
            ladder(d_x, d_w, _MAX_HALVINGS, cfg.step_size)
        stalled = active & ~accepted
        moved = active & accepted

        # exhausted backtracking: drop the step, forget curvature, go finer
        if stalled.any():
            m_x[stalled] = 0.0
            v_x[stalled] = 0.0
            m_w[stalled] = 0.0
            v_w[stalled] = 0.0
            step_count[stalled] = 0.0
            curvature[stalled] = np.eye(n_dim)
            lr_scale[stalled] *= 0.5
        stalls = np.where(moved, 0, stalls)
        stalls = np.where(stalled, stalls + 1, stalls)

        rel = np.abs(f_next - f_cur) / np.maximum(1.0, np.abs(f_cur))
        newly_done = (moved & (rel < cfg.tol)) | (stalls >= _STALL_LIMIT)
        iterations = np.where(active, it, iterations)
        if cfg.method == "bfgs":
            prev_step = np.concatenate(
                [(next_ux - ux)[:, None], next_uw - uw], axis=1)
            prev_grad = np.concatenate([gx[:, None], gw], axis=1)
        ux, uw, f_cur = next_ux, next_uw, f_next
        trajectory.append(f_cur.copy())
        converged = converged | newly_done
        if converged.all():
            break
        f_cur, gx, gw = obj.value_and_grads(ux, uw)

    x_hat, w_hat = obj.decode(ux, uw)
    path = np.stack(trajectory, axis=1)
    results = []
    for r in range(B):
        stop = iterations[r] + 1
        results.append(MapResult(
            x_hat=float(x_hat[r]), w_hat=w_hat[r].copy(),
            trajectory=path[r, :stop].copy(),
            converged=bool(converged[r]), iterations=int(iterations[r])))
    return results


def map_estimate(model: SemModel, y: float, z: np.ndarray, k: int,
                 config: MapConfig | None = None) -> MapResult:
    """Single-record wrapper around the batched ascent."""
    return map_estimate_batch(
        model, np.array([float(y)]),
        np.asarray(z, dtype=np.float64).reshape(1, -1), k, config)[0]
