"""Multilayer perceptrons over flat parameter vectors, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigurationError, ParameterVector, Var, segment, softplus, tanh

ACTIVATIONS = ("tanh", "smooth-rectifier")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("all layer dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        dims = self.dims()
        out = []
        for i in range(len(dims) - 1):
            out.append((f"w{i}", (dims[i], dims[i + 1])))
            out.append((f"b{i}", (dims[i + 1],)))
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], tuple(d["hidden_dims"]), d["output_dim"], d["activation"])


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator, scale: float = 1.0) -> ParameterVector:
    """Fan-in scaled Gaussian weights, zero biases; deterministic given rng state."""
    pv = ParameterVector.zeros(spec.layout())
    dims = spec.dims()
    for i in range(len(dims) - 1):
        w = rng.standard_normal((dims[i], dims[i + 1])) * (scale / np.sqrt(dims[i]))
        pv.set(f"w{i}", w)
    return pv


def _activation(name: str):
    return tanh if name == "tanh" else softplus


def mlp_apply(params: Var, offsets: dict, spec: MlpSpec, x: Var) -> Var:
    """Forward pass with autodiff; ``x`` is a (batch, input_dim) Var."""
    act = _activation(spec.activation)
    n_layers = len(spec.dims()) - 1
    h = x
    for i in range(n_layers):
        start_w, shape_w = offsets[f"w{i}"]
        start_b, shape_b = offsets[f"b{i}"]
        h = h @ segment(params, start_w, shape_w) + segment(params, start_b, shape_b)
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_forward(params: ParameterVector, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass; accepts a single vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"input dim {x.shape[1]} does not match spec input_dim {spec.input_dim}"
        )
    if params.values.size != spec.param_count():
        raise ConfigurationError("parameter vector does not match spec layout")
    out = mlp_apply(Var(params.values), params.offsets(), spec, Var(x)).data
    return out[0] if single else out


class TrainingError(RuntimeError):
    """Raised when training state becomes unusable (non-finite values)."""


@dataclass
class AdamState:
    """Bias-corrected Adam; weight decay is intentionally zero at this scale."""

    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(state: AdamState, params: ParameterVector, grads: np.ndarray) -> None:
    """One in-place Adam update on ``params``; increments the step counter."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise ConfigurationError("gradient length does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient at step {state.step + 1}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
