"""Differentiable scalar-loss core: array tensors with reverse-mode gradients,
MLP evaluation, a finite-difference checker, and an Adam step.

Everything runs in 64-bit floats on numpy arrays. A :class:`Tensor` records the
operations applied to it; calling :meth:`GradientTape.gradients` on a scalar
result replays the record backwards and accumulates exact partial derivatives
for every registered leaf (parameters and free inputs alike).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidSpecError, ShapeError


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) written so neither branch overflows
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcast up from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the recorded computation: a float64 array plus backward rule.

    Operators build new nodes; no gradient flows until a tape asks for it.
    Arrays are never mutated in place, so a Tensor may be shared freely.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    # keep numpy from absorbing Tensor operands into object arrays; binary
    # ops with an ndarray on the left then defer to the reflected methods
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _bump(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def back(g):
            self._bump(_unbroadcast(g, self.data.shape))
            other._bump(_unbroadcast(g, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._bump(-g)
        return out

    def __sub__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data - other.data, (self, other))

        def back(g):
            self._bump(_unbroadcast(g, self.data.shape))
            other._bump(_unbroadcast(-g, other.data.shape))

        out._backward = back
        return out

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def back(g):
            self._bump(_unbroadcast(g * other.data, self.data.shape))
            other._bump(_unbroadcast(g * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data / other.data, (self, other))

        def back(g):
            self._bump(_unbroadcast(g / other.data, self.data.shape))
            other._bump(_unbroadcast(-g * self.data / (other.data * other.data),
                                     other.data.shape))

        out._backward = back
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __matmul__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data @ other.data, (self, other))

        def back(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 2:      # (n,) @ (n,m)
                self._bump(g @ b.T)
                other._bump(np.outer(a, g))
            elif a.ndim == 2 and b.ndim == 1:    # (m,n) @ (n,)
                self._bump(np.outer(g, b))
                other._bump(a.T @ g)
            else:                                # (b,n) @ (n,m)
                self._bump(g @ b.T)
                other._bump(a.T @ g)

        out._backward = back
        return out

    def __rmatmul__(self, other):
        return _as_tensor(other) @ self

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._bump(g.reshape(self.data.shape))
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, (self,))
        out._backward = lambda g: self._bump(g.T)
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,))

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._bump(full)

        out._backward = back
        return out

    # -- elementwise functions ----------------------------------------------

    def square(self):
        out = Tensor(self.data * self.data, (self,))
        out._backward = lambda g: self._bump(2.0 * self.data * g)
        return out

    def exp(self):
        out = Tensor(np.exp(self.data), (self,))
        out._backward = lambda g: self._bump(g * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda g: self._bump(g / self.data)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), (self,))
        out._backward = lambda g: self._bump(g * (1.0 - out.data * out.data))
        return out

    def sigmoid(self):
        out = Tensor(_sigmoid(self.data), (self,))
        out._backward = lambda g: self._bump(g * out.data * (1.0 - out.data))
        return out

    def softplus(self):
        out = Tensor(_softplus(self.data), (self,))
        out._backward = lambda g: self._bump(g * _sigmoid(self.data))
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), (self,))

        def back(g):
            if axis is None:
                self._bump(np.broadcast_to(g, self.data.shape).copy())
            else:
                self._bump(np.broadcast_to(np.expand_dims(g, axis),
                                           self.data.shape).copy())

        out._backward = back
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    """Wrap `x` as a constant Tensor; Tensors pass through unchanged."""
    return _as_tensor(x)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along `axis`, differentiable w.r.t. every part."""
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._bump(piece)

    out._backward = back
    return out


class GradientTape:
    """Registry of leaf tensors plus the backward pass over one scalar result.

    Leaves are registered by name; after the forward computation produces a
    scalar Tensor, :meth:`gradients` returns exact partials for every leaf,
    including leaves the result does not depend on (their gradient is zero).
    """

    def __init__(self):
        self._leaves: dict[str, Tensor] = {}

    def leaf(self, name: str, value) -> Tensor:
        if name in self._leaves:
            raise ContractError(f"leaf {name!r} registered twice")
        t = Tensor(value)
        self._leaves[name] = t
        return t

    def leaf_dict(self, values: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.leaf(k, v) for k, v in values.items()}

    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        if loss.data.size != 1:
            raise ContractError(
                f"gradients require a scalar loss, got shape {loss.data.shape}")
        order = _toposort(loss)
        loss.grad = np.ones_like(loss.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        out = {}
        for name, leaf in self._leaves.items():
            out[name] = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        return out


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the graph below `root` (iterative DFS)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def value_and_gradients(fn, params: dict[str, np.ndarray]):
    """Evaluate `fn` on tensor-wrapped `params` and return (value, gradients).

    `fn` receives a dict of leaf Tensors (same keys as `params`) and must
    return a scalar Tensor. The result pairs the loss value with one gradient
    array per key; keys the loss does not touch get zero gradients. Free
    inputs (values optimized with parameters held fixed, or vice versa) are
    simply additional entries of `params` - the caller decides which
    gradients to apply.
    """
    tape = GradientTape()
    loss = fn(tape.leaf_dict(params))
    if not isinstance(loss, Tensor):
        raise ContractError("loss evaluation must return a Tensor")
    value = loss.item()
    return value, tape.gradients(loss)


def finite_difference_check(fn, params: dict[str, np.ndarray], step: float) -> float:
    """Max relative error between analytic gradients of `fn` and central
    differences with the given step.

    Relative error per coordinate uses denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    _, grads = value_and_gradients(fn, params)

    def evaluate(p):
        tape = GradientTape()
        return fn(tape.leaf_dict(p)).item()

    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = dict(params)
            plus = base.copy().reshape(-1)
            plus[i] += step
            bumped[name] = plus.reshape(base.shape)
            f_plus = evaluate(bumped)
            minus = base.copy().reshape(-1)
            minus[i] -= step
            bumped[name] = minus.reshape(base.shape)
            f_minus = evaluate(bumped)
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = grads[name].reshape(-1)[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# -- MLP -----------------------------------------------------------------


@dataclass
class Mlp:
    """Fully connected network; hidden layers use `activation`, output is affine.

    weights[j] has shape (layer_sizes[j+1], layer_sizes[j]); biases[j] matches
    the layer's output width.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"


_ACTIVATIONS = {
    "tanh": (np.tanh, Tensor.tanh),
    "softplus": (_softplus, Tensor.softplus),
}


def mlp_init(layer_sizes: list[int], seed: int, activation: str = "tanh") -> Mlp:
    """Seeded MLP: weights uniform in +-1/sqrt(fan_in), biases zero."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise InvalidSpecError(f"layer_sizes must have >= 2 entries >= 1, got {sizes}")
    if activation not in _ACTIVATIONS:
        raise InvalidSpecError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, activation)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Pure forward pass; accepts a vector (n_in,) or a batch (B, n_in)."""
    x = np.asarray(x, dtype=np.float64)
    n_in = mlp.layer_sizes[0]
    if x.shape[-1] != n_in:
        raise ShapeError(f"input width {x.shape[-1]} != layer width {n_in}")
    act = _ACTIVATIONS[mlp.activation][0]
    last = len(mlp.weights) - 1
    for j, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        x = x @ w.T + b
        if j < last:
            x = act(x)
    return x


def mlp_apply(weights: list[Tensor], biases: list[Tensor], activation: str,
              x: Tensor) -> Tensor:
    """Tensor-graph forward pass mirroring :func:`mlp_forward`."""
    act = _ACTIVATIONS[activation][1]
    last = len(weights) - 1
    for j, (w, b) in enumerate(zip(weights, biases)):
        x = x @ w.T + b
        if j < last:
            x = act(x)
    return x


# -- Adam ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam accumulators keyed like the parameter dict they serve."""

    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update, applied to `params` in place.

    Returns (params, state). Accumulators for unseen keys start at zero;
    update rule: p -= step_size * m_hat / sqrt(v_hat + eps).
    """
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.step_size * (m / bc1) / np.sqrt(v / bc2 + state.eps)
    return params, state
