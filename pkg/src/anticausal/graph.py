"""Variable roster and adjacency machinery for the layered causal graph.

The roster orders variables as confounders Z, mechanism variables W, causes X,
outcomes Y. Adjacency matrices follow the row-parent convention: A[i, j] = 1
means j is a direct cause of i, so row i lists the parents of variable i.

Structure is split into a fixed part (edges the model always keeps: X feeds
every W, all W feed each Y) and a masked learnable part (which confounders
parent each X and each W). Everything else is forbidden.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, _sigmoid
from .errors import CyclicGraphError, InvalidSpecError, ShapeError, TaskIndexError

ROLES = ("confounder", "mechanism", "cause", "outcome")


@dataclass(frozen=True)
class Variable:
    """Roster entry: a named node with a role and, for per-task nodes, a task.

    Causes and outcomes carry a 1-based task index; confounders and mechanism
    variables carry None.
    """

    name: str
    role: str
    task: int | None = None


@dataclass(frozen=True)
class GraphSpec:
    """Ordered variable roster with the three structural counts.

    n_tasks is K, n_confounders is L, n_mechanisms is the number of mechanism
    variables shared by every task.
    """

    variables: tuple[Variable, ...]
    n_tasks: int
    n_confounders: int
    n_mechanisms: int

    def __post_init__(self):
        _validate_spec(self)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def size(self) -> int:
        return len(self.variables)

    def index(self, name: str) -> int:
        for i, v in enumerate(self.variables):
            if v.name == name:
                return i
        raise InvalidSpecError(f"no variable named {name!r}")

    def confounder_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.role == "confounder"]

    def mechanism_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.role == "mechanism"]

    def cause_index(self, task: int) -> int:
        return self._task_node("cause", task)

    def outcome_index(self, task: int) -> int:
        return self._task_node("outcome", task)

    def _task_node(self, role: str, task: int) -> int:
        if not 1 <= task <= self.n_tasks:
            raise TaskIndexError(f"task {task} outside 1..{self.n_tasks}")
        for i, v in enumerate(self.variables):
            if v.role == role and v.task == task:
                return i
        raise InvalidSpecError(f"no {role} for task {task}")


def _validate_spec(spec: GraphSpec) -> None:
    if spec.n_tasks < 1 or spec.n_confounders < 1 or spec.n_mechanisms < 1:
        raise InvalidSpecError(
            f"counts must be >= 1, got K={spec.n_tasks} L={spec.n_confounders} "
            f"M={spec.n_mechanisms}")
    names = [v.name for v in spec.variables]
    if len(set(names)) != len(names):
        raise InvalidSpecError("variable names must be unique")
    by_role: dict[str, list[Variable]] = {r: [] for r in ROLES}
    for v in spec.variables:
        if v.role not in ROLES:
            raise InvalidSpecError(f"unknown role {v.role!r} on {v.name!r}")
        if v.role in ("cause", "outcome"):
            if v.task is None or not 1 <= v.task <= spec.n_tasks:
                raise InvalidSpecError(
                    f"{v.name!r} needs a task index in 1..{spec.n_tasks}")
        elif v.task is not None:
            raise InvalidSpecError(f"{v.name!r} must not carry a task index")
        by_role[v.role].append(v)
    if len(by_role["confounder"]) != spec.n_confounders:
        raise InvalidSpecError("confounder count does not match roster")
    if len(by_role["mechanism"]) != spec.n_mechanisms:
        raise InvalidSpecError("mechanism count does not match roster")
    for role in ("cause", "outcome"):
        tasks = sorted(v.task for v in by_role[role])
        if tasks != list(range(1, spec.n_tasks + 1)):
            raise InvalidSpecError(f"need exactly one {role} per task, got {tasks}")


def make_spec(n_tasks: int, n_confounders: int, n_mechanisms: int) -> GraphSpec:
    """Canonical roster: Z1..ZL, W1..WM, X1..XK, Y1..YK."""
    roster = [Variable(f"Z{l}", "confounder") for l in range(1, n_confounders + 1)]
    roster += [Variable(f"W{i}", "mechanism") for i in range(1, n_mechanisms + 1)]
    roster += [Variable(f"X{k}", "cause", k) for k in range(1, n_tasks + 1)]
    roster += [Variable(f"Y{k}", "outcome", k) for k in range(1, n_tasks + 1)]
    return GraphSpec(tuple(roster), n_tasks, n_confounders, n_mechanisms)


def build_structure(spec: GraphSpec) -> tuple[np.ndarray, np.ndarray]:
    """Mask of learnable edges and matrix of fixed edges for the roster.

    Fixed: every cause X_k parents every mechanism W_i, and every W_i parents
    every outcome Y_k. Learnable: confounders as candidate parents of each
    X_k and each W_i. All other edges are forbidden, which in particular
    leaves confounders parentless and outcomes childless.
    """
    n = spec.size
    mask = np.zeros((n, n))
    fixed = np.zeros((n, n))
    z_cols = spec.confounder_indices()
    w_rows = spec.mechanism_indices()
    for k in range(1, spec.n_tasks + 1):
        x = spec.cause_index(k)
        y = spec.outcome_index(k)
        mask[x, z_cols] = 1.0
        fixed[w_rows, x] = 1.0
        fixed[y, w_rows] = 1.0
    for w in w_rows:
        mask[w, z_cols] = 1.0
    return mask, fixed


@dataclass
class AdjacencyModel:
    """Learnable-edge logits plus the fixed structure they sit inside.

    Soft adjacency is sigmoid(logits) * mask + fixed; hardening snaps each
    masked entry to 1 when its sigmoid clears the threshold.
    """

    logits: np.ndarray
    mask: np.ndarray
    fixed: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.fixed = np.asarray(self.fixed, dtype=np.float64)
        n = self.logits.shape[0]
        for arr, label in ((self.logits, "logits"), (self.mask, "mask"),
                           (self.fixed, "fixed")):
            if arr.shape != (n, n):
                raise ShapeError(f"{label} must be {n}x{n}, got {arr.shape}")
        if np.any((self.mask != 0) & (self.fixed != 0)):
            raise InvalidSpecError("mask and fixed supports must be disjoint")
        if np.any(np.diag(self.mask) != 0) or np.any(np.diag(self.fixed) != 0):
            raise InvalidSpecError("self-loops are forbidden")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidSpecError(f"threshold must be in (0,1), got {self.threshold}")


def adjacency_init(spec: GraphSpec, threshold: float = 0.5) -> AdjacencyModel:
    """Adjacency for a spec with every learnable logit at 0 (edge prior 0.5)."""
    mask, fixed = build_structure(spec)
    return AdjacencyModel(np.zeros_like(mask), mask, fixed, threshold)


def soft_adjacency(model: AdjacencyModel, logits=None):
    """Continuous adjacency sigmoid(logits) * mask + fixed.

    `logits` may override the stored array; passing a Tensor yields a Tensor
    so gradients reach the logits during training.
    """
    if logits is None:
        logits = model.logits
    if isinstance(logits, Tensor):
        return logits.sigmoid() * model.mask + model.fixed
    return _sigmoid(np.asarray(logits, dtype=np.float64)) * model.mask + model.fixed


def acyclicity_penalty(A):
    """tr(exp(A o A)) - n through a truncated power series.

    Zero exactly when A (binary or soft) wires a graph with no directed
    cycles; strictly positive otherwise. Accepts a numpy array (returns
    float) or a Tensor (returns a scalar Tensor with gradients intact).
    The series runs to max(n, 16) terms so small matrices still match the
    true matrix exponential to near machine precision, while nilpotent
    inputs give exactly zero at any truncation beyond n.
    """
    is_tensor = isinstance(A, Tensor)
    data = A.data if is_tensor else np.asarray(A, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ShapeError(f"adjacency must be square, got {data.shape}")
    n = data.shape[0]
    t = A if is_tensor else Tensor(data)
    B = t * t
    diag = (np.arange(n), np.arange(n))
    order = max(n, 16)
    power = B
    factorial = 1.0
    total = power[diag].sum()
    for p in range(2, order + 1):
        power = power @ B
        factorial *= p
        total = total + power[diag].sum() * (1.0 / factorial)
    return total if is_tensor else total.item()


def harden(model: AdjacencyModel) -> np.ndarray:
    """Binary adjacency: masked edges kept iff sigmoid(logit) > threshold.

    Validates the result is acyclic; raises on any directed cycle.
    """
    keep = (_sigmoid(model.logits) > model.threshold) & (model.mask != 0)
    hard = np.where(keep | (model.fixed != 0), 1.0, 0.0)
    topological_order(hard)
    return hard


def topological_order(A) -> list[int]:
    """Parents-first ordering of a binary adjacency, ties broken by index.

    Raises CyclicGraphError carrying one offending cycle when no such
    ordering exists.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got {A.shape}")
    if np.any((A != 0.0) & (A != 1.0)):
        raise ShapeError("topological order needs a binary adjacency")
    n = A.shape[0]
    indegree = A.sum(axis=1).astype(int)
    children = [np.nonzero(A[:, j])[0] for j in range(n)]
    ready = [i for i in range(n) if indegree[i] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, int(child))
    if len(order) < n:
        raise CyclicGraphError(_find_cycle(A, set(range(n)) - set(order)))
    return order


def _find_cycle(A: np.ndarray, remaining: set[int]) -> list[int]:
    """Walk parent links inside the leftover subgraph until a node repeats."""
    node = min(remaining)
    path: list[int] = []
    seen_at: dict[int, int] = {}
    while node not in seen_at:
        seen_at[node] = len(path)
        path.append(node)
        parents = [j for j in np.nonzero(A[node])[0] if j in remaining]
        node = int(min(parents))
    loop = path[seen_at[node]:]
    # path walked child -> parent; reverse to present edges forward
    loop.reverse()
    return loop + [loop[0]]
