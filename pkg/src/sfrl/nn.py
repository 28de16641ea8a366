"""Dense-network numerics: layers, MLP stacks, losses, Adam and gradient checking.

Arrays are plain numpy ndarrays. Batches are row-major ``[batch, features]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

ACTIVATIONS = ("linear", "relu")


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A parameter, gradient or loss became NaN/Inf."""

    def __init__(self, name: str, step: int, what: str = "gradient"):
        self.name = name
        self.step = step
        super().__init__(f"non-finite {what} for parameter {name!r} at step {step}")


@dataclass
class DenseLayer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} incompatible with bias {self.bias.shape}"
            )

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator,
             dtype=np.float64) -> "DenseLayer":
        # uniform(+-1/sqrt(fan_in)), zero bias
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        return cls(w, np.zeros(n_out, dtype=dtype), activation)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise DimensionError(f"input {x.shape} does not match layer input dim {layer.n_in}")
    z = x @ layer.weights.T + layer.bias
    if layer.activation == "relu":
        return np.maximum(z, 0)
    return z


def dense_backward(layer: DenseLayer, x: np.ndarray, grad_out: np.ndarray,
                   out: np.ndarray | None = None):
    """Reverse-mode gradients of one layer.

    ``out`` is the forward output; it is recomputed when not supplied. The
    ReLU subgradient at exactly zero is 0.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    expected = (x.shape[0], layer.n_out)
    if grad_out.shape != expected:
        raise DimensionError(f"upstream gradient {grad_out.shape} != output shape {expected}")
    if layer.activation == "relu":
        if out is None:
            out = dense_forward(layer, x)
        grad_out = grad_out * (out > 0)
    gw = grad_out.T @ x
    gb = grad_out.sum(axis=0)
    gx = grad_out @ layer.weights
    return gx, gw, gb


class MLP:
    """Feed-forward stack of dense layers with named parameters ``L{i}.W`` / ``L{i}.b``."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer sizes do not chain: {a.n_out} -> {b.n_in}")
        self.layers = layers

    @classmethod
    def build(cls, sizes: Iterable[int], rng: np.random.Generator, *,
              hidden_activation: str = "relu", out_activation: str = "linear",
              dtype=np.float64) -> "MLP":
        sizes = list(sizes)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            act = out_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer.init(n_in, n_out, act, rng, dtype))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def sizes(self) -> list[int]:
        return [self.n_in] + [l.n_out for l in self.layers]

    def copy(self) -> "MLP":
        return MLP([l.copy() for l in self.layers])

    def forward(self, x: np.ndarray, keep: bool = False):
        """Output of the stack; with ``keep`` also the list of layer activations."""
        acts = [x]
        for layer in self.layers:
            x = dense_forward(layer, x)
            acts.append(x)
        return (x, acts) if keep else x

    __call__ = forward

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray, need_input_grad: bool = True):
        """Backpropagate through the stack given the activations kept by ``forward``.

        Returns ``(grad_input, grads)`` where grads maps parameter names to arrays.
        """
        grads = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x, out = acts[i], acts[i + 1]
            if layer.activation == "relu":
                g = g * (out > 0)
            grads[f"L{i}.W"] = g.T @ x
            grads[f"L{i}.b"] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ layer.weights
        return (g if need_input_grad else None), grads

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"L{i}.W"] = layer.weights
            out[f"L{i}.b"] = layer.bias
        return out

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            w, b = params[f"L{i}.W"], params[f"L{i}.b"]
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise DimensionError(f"shape mismatch loading layer {i}")
            layer.weights[...] = w
            layer.bias[...] = b

    def assign(self, other: "MLP") -> None:
        self.load_parameters(other.parameters())


def mse_and_grad(pred: np.ndarray, target: np.ndarray):
    """Mean over all elements of ``(pred - target)**2`` and its gradient wrt ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff


def softmax_xent_and_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over the batch and the gradient wrt the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    idx = np.arange(n)
    loss = -float(np.mean(logp[idx, labels]))
    g = np.exp(logp)
    g[idx, labels] -= 1.0
    return loss, g / n


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    learning_rate: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, name: str = "param"):
    """In-place Adam update of ``params``; returns ``(params, state)``.

    An exactly-zero gradient still advances the moments and step count but
    leaves ``params`` untouched. Raises NonFiniteError naming the parameter if the gradient is not finite.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError(f"{name}: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    total = grads.sum()
    if not np.isfinite(total) and not np.all(np.isfinite(grads)):
        raise NonFiniteError(name, state.step_count + 1)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    if total == 0 and not grads.any():
        # an all-zero gradient (frozen or unused parameter) never moves params
        return params, state
    # bias corrections folded into the step size and epsilon
    c2 = np.sqrt(1.0 - b2**t)
    step_size = state.learning_rate * c2 / (1.0 - b1**t)
    denom = np.sqrt(state.v)
    denom += state.epsilon * c2
    params -= step_size * (state.m / denom)
    return params, state


class Adam:
    """Adam over a dict of named arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 2.5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.states = {k: AdamState.zeros_like(p, learning_rate=lr, beta1=beta1,
                                               beta2=beta2, epsilon=eps)
                       for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            adam_step(self.params[name], g, self.states[name], name)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: int = -1
    analytic: np.ndarray = field(default=None, repr=False)
    numeric: np.ndarray = field(default=None, repr=False)


def numeric_gradient(f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat float64 vector."""
    p = np.array(params, dtype=np.float64)
    g = np.zeros_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + h
        fp = f(p)
        p[i] = old - h
        fm = f(p)
        p[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray,
               h: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient returned by ``loss_fn(p) -> (loss, grad)``
    against central differences, coordinate by coordinate."""
    params = np.asarray(params, dtype=np.float64).ravel()
    _, analytic = loss_fn(params.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = numeric_gradient(lambda p: loss_fn(p)[0], params, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else -1
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel <= tol, worst, analytic, numeric)


def flatten(params: dict[str, np.ndarray], names: list[str] | None = None) -> np.ndarray:
    names = list(params) if names is None else names
    return np.concatenate([params[n].ravel() for n in names]) if names else np.zeros(0)


def unflatten_into(vec: np.ndarray, params: dict[str, np.ndarray], names: list[str] | None = None) -> None:
    names = list(params) if names is None else names
    i = 0
    for n in names:
        p = params[n]
        p[...] = vec[i:i + p.size].reshape(p.shape)
        i += p.size
    if i != vec.size:
        raise DimensionError(f"flat vector has {vec.size} entries, parameters need {i}")


def all_finite(params: dict[str, np.ndarray]) -> str | None:
    """Name of the first non-finite parameter, or None."""
    for k, p in params.items():
        if not np.all(np.isfinite(p)):
            return k
    return None
