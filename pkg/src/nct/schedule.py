"""Variance-preserving latent interpolation: noise schedules, latent
diffusion, coupled (z, c) sampling, and adjacent-level pair construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigurationError
from .models import ConditionModel, GeneratorModel, extract_condition, generate

SCHEDULE_KINDS = ("linear-sigma",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete grid of noise levels with alpha^2 + sigma^2 = 1 at every level."""

    N: int
    sigma: np.ndarray
    alpha: np.ndarray
    kind: str = "linear-sigma"

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "alpha", alpha)
        if sigma.shape != (self.N + 1,) or alpha.shape != (self.N + 1,):
            raise ConfigurationError("schedule arrays must have N+1 entries")
        if sigma[0] != 0.0 or sigma[-1] != 1.0:
            raise ConfigurationError("sigma must start at 0 and end at 1")
        if np.any(np.diff(sigma) <= 0):
            raise ConfigurationError("sigma must be strictly increasing")
        if np.max(np.abs(alpha**2 + sigma**2 - 1.0)) > 1e-12:
            raise ConfigurationError("alpha^2 + sigma^2 must equal 1")

    def to_dict(self) -> dict:
        return {"N": self.N, "kind": self.kind}


def make_schedule(N: int, kind: str = "linear-sigma") -> NoiseSchedule:
    if N < 1:
        raise ConfigurationError("schedule needs at least one interval")
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    sigma = np.arange(N + 1, dtype=np.float64) / N
    alpha = np.sqrt(1.0 - sigma**2)
    return NoiseSchedule(N, sigma, alpha, kind)


def diffuse(z: np.ndarray, eps: np.ndarray, k: int, sched: NoiseSchedule) -> np.ndarray:
    """alpha_k * z + sigma_k * eps; keeps a standard Gaussian marginal."""
    if not 0 <= k <= sched.N:
        raise IndexError(f"noise level {k} outside [0, {sched.N}]")
    return sched.alpha[k] * np.asarray(z) + sched.sigma[k] * np.asarray(eps)


def adjacent_pair(
    z: np.ndarray, eps: np.ndarray, k: int, sched: NoiseSchedule
) -> tuple[np.ndarray, np.ndarray]:
    """(noisier, less noisy) latents at levels k+1 and k sharing one eps."""
    if not 0 <= k <= sched.N - 1:
        raise IndexError(f"pair index {k} outside [0, {sched.N - 1}]")
    return diffuse(z, eps, k + 1, sched), diffuse(z, eps, k, sched)


@dataclass
class LatentBatch:
    """Aligned standard-Gaussian draws of base latents and diffusion noise."""

    z: np.ndarray
    eps: np.ndarray
    seed: int | None = None


@dataclass
class CoupledBatch:
    """Rows (z, x, c) with x = f(z) and c drawn from the condition model."""

    z: np.ndarray
    x: np.ndarray
    c: np.ndarray


def sample_latents(n: int, dim: int, rng: np.random.Generator) -> LatentBatch:
    return LatentBatch(rng.standard_normal((n, dim)), rng.standard_normal((n, dim)))


def sample_coupled(
    gen: GeneratorModel, cm: ConditionModel, n: int, rng: np.random.Generator
) -> CoupledBatch:
    z = rng.standard_normal((n, gen.spec.input_dim))
    x = generate(gen, z)
    c = extract_condition(cm, x, rng)
    return CoupledBatch(z, x, c)
