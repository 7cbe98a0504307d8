"""Statistical evaluation machinery: kernel two-sample statistics with
permutation nulls, a rejection-sampling conditional oracle, the
controllability consistency metric, and gradient checking."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import ConfigurationError, finite_diff_grad
from .models import ConditionModel, GeneratorModel, embed_condition, extract_condition, generate

KERNEL_KINDS = ("rbf-mixture", "neg-squared-distance", "shifted-sqrt")

# neg-squared-distance and shifted-sqrt are at best conditionally positive
# definite; estimates under them can go negative and are flagged as such
NON_PSD_KINDS = ("neg-squared-distance", "shifted-sqrt")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf-mixture"
    bandwidths: tuple[float, ...] | None = None  # None -> median heuristic
    bandwidth_factors: tuple[float, ...] = (0.5, 1.0, 2.0)
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigurationError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidths is not None:
            object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))

    @property
    def is_psd(self) -> bool:
        return self.kind not in NON_PSD_KINDS

    def describe(self) -> str:
        tag = "psd" if self.is_psd else "non-psd"
        if self.kind == "rbf-mixture":
            bw = "median" if self.bandwidths is None else ",".join(map(str, self.bandwidths))
            return f"rbf-mixture[{bw}]({tag})"
        if self.kind == "shifted-sqrt":
            return f"shifted-sqrt[c={self.c}]({tag})"
        return f"{self.kind}({tag})"


@dataclass
class EmpiricalDistribution:
    """A sample set standing in for a distribution."""

    samples: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.size == 0:
            raise ConfigurationError("empirical distribution must be nonempty")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigurationError("empirical distribution contains non-finite values")


@dataclass
class MetricsRow:
    metric: str
    value: float
    n_x: int = 0
    n_y: int = 0
    kernel: str = ""
    seed: str = ""


def _as_samples(x) -> np.ndarray:
    if isinstance(x, EmpiricalDistribution):
        return x.samples
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def pairwise_sqdists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xn = np.sum(x * x, axis=1)[:, None]
    yn = np.sum(y * y, axis=1)[None, :]
    return np.maximum(xn + yn - 2.0 * (x @ y.T), 0.0)


def median_bandwidth(x, y) -> float:
    """Median pairwise distance over the pooled set; 1.0 if degenerate."""
    pooled = np.vstack([_as_samples(x), _as_samples(y)])
    if pooled.shape[0] < 2:
        raise ConfigurationError("median heuristic needs at least two points")
    d = np.sqrt(pairwise_sqdists(pooled, pooled))
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


def resolve_bandwidths(k: KernelSpec, x, y) -> tuple[float, ...]:
    if k.bandwidths is not None:
        return k.bandwidths
    med = median_bandwidth(x, y)
    return tuple(f * med for f in k.bandwidth_factors)


def kernel_matrix(sqd: np.ndarray, k: KernelSpec, bandwidths=None) -> np.ndarray:
    if k.kind == "rbf-mixture":
        out = np.zeros_like(sqd)
        for h in bandwidths:
            out += np.exp(-sqd / (2.0 * h * h))
        return out / len(bandwidths)
    if k.kind == "neg-squared-distance":
        return -sqd
    return k.c - np.sqrt(sqd + k.c * k.c)


def mmd2_vstat(x, y, k: KernelSpec = KernelSpec()) -> float:
    """Diagonal-inclusive (biased) squared-MMD estimate; symmetric in (x, y)."""
    xs, ys = _as_samples(x), _as_samples(y)
    if xs.shape[1] != ys.shape[1]:
        raise ConfigurationError("sample sets have mismatched dimensions")
    bw = resolve_bandwidths(k, xs, ys) if k.kind == "rbf-mixture" else None
    kxx = kernel_matrix(pairwise_sqdists(xs, xs), k, bw)
    kyy = kernel_matrix(pairwise_sqdists(ys, ys), k, bw)
    kxy = kernel_matrix(pairwise_sqdists(xs, ys), k, bw)
    return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("NCT_THREADS", "1")))
    except ValueError:
        return 1


def mmd_permutation_test(
    x,
    y,
    k: KernelSpec = KernelSpec(),
    n_permutations: int = 200,
    rng: np.random.Generator | None = None,
) -> tuple[float, float, np.ndarray]:
    """V-statistic MMD^2 with a pooled-assignment permutation null.

    Returns (statistic, p_value, null_statistics). The pooled kernel matrix
    is computed once; each permutation only reassigns rows, so the null is
    exchangeable under H0: same distribution.
    """
    xs, ys = _as_samples(x), _as_samples(y)
    if rng is None:
        rng = np.random.default_rng(0)
    n, m = xs.shape[0], ys.shape[0]
    pooled = np.vstack([xs, ys])
    bw = resolve_bandwidths(k, xs, ys) if k.kind == "rbf-mixture" else None
    K = kernel_matrix(pairwise_sqdists(pooled, pooled), k, bw)

    def stat_for(idx: np.ndarray) -> float:
        a, b = idx[:n], idx[n:]
        kaa = K[np.ix_(a, a)].mean()
        kbb = K[np.ix_(b, b)].mean()
        kab = K[np.ix_(a, b)].mean()
        return float(kaa + kbb - 2.0 * kab)

    observed = stat_for(np.arange(n + m))
    perms = [rng.permutation(n + m) for _ in range(n_permutations)]
    threads = _eval_threads()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            null = np.fromiter(ex.map(stat_for, perms), dtype=np.float64)
    else:
        null = np.fromiter((stat_for(p) for p in perms), dtype=np.float64)
    p_value = (1.0 + np.sum(null >= observed)) / (1.0 + n_permutations)
    return observed, float(p_value), null


def consistency_metric(
    samples: np.ndarray, conditions: np.ndarray, cm: ConditionModel
) -> float:
    """Mean L1 distance between the extracted and requested conditions,
    both in embedded form (labels via one-hot). Uses the noise-free
    extractor regardless of the condition model's training noise."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    clean = replace(cm, noise_scale=0.0, flip_prob=0.0)
    extracted = extract_condition(clean, samples)
    if samples.shape[0] != np.atleast_1d(conditions).shape[0]:
        raise ConfigurationError("samples and conditions are misaligned")
    eh = np.atleast_2d(embed_condition(cm, extracted))
    ec = np.atleast_2d(embed_condition(cm, conditions))
    return float(np.abs(eh - ec).sum(axis=1).mean())


def mismatch_rate(samples: np.ndarray, labels: np.ndarray, cm: ConditionModel) -> float:
    """Fraction of samples whose extracted label differs from the request."""
    clean = replace(cm, noise_scale=0.0, flip_prob=0.0)
    extracted = np.atleast_1d(extract_condition(clean, np.atleast_2d(samples)))
    return float(np.mean(extracted != np.atleast_1d(labels)))


class OracleInfeasibleError(RuntimeError):
    """Rejection budget exhausted; carries the observed acceptance rate."""

    def __init__(self, message: str, acceptance_rate: float):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


def default_rejection_tolerance(cm: ConditionModel) -> float:
    if cm.kind == "coarse-grid":
        return cm.grid_size / 2.0
    return 0.1


def conditional_oracle(
    gen: GeneratorModel,
    cm: ConditionModel,
    c,
    n: int,
    rng: np.random.Generator,
    tolerance: float | None = None,
    max_draws: int = 2_000_000,
) -> EmpiricalDistribution:
    """Brute-force conditional sampler by rejection on extracted conditions.

    Labels are matched exactly; continuous conditions within ``tolerance``.
    The accepted samples are exact draws from the generator's conditional.
    """
    if tolerance is None and cm.kind != "quadrant-label":
        tolerance = default_rejection_tolerance(cm)
    accepted: list[np.ndarray] = []
    total_drawn = 0
    total_accepted = 0
    chunk = max(1024, 4 * n)
    while total_accepted < n:
        if total_drawn >= max_draws:
            rate = total_accepted / max(total_drawn, 1)
            raise OracleInfeasibleError(
                f"rejection budget exhausted after {total_drawn} draws "
                f"(acceptance rate {rate:.2e})",
                rate,
            )
        z = rng.standard_normal((chunk, gen.spec.input_dim))
        x = generate(gen, z)
        drawn_c = extract_condition(cm, x, rng)
        if cm.kind == "quadrant-label":
            ok = drawn_c == int(c)
        elif cm.kind == "coarse-grid":
            ok = np.all(np.abs(drawn_c - np.asarray(c)) <= tolerance, axis=1)
        else:
            ok = np.abs(drawn_c - float(c)) <= tolerance
        accepted.append(x[ok])
        total_drawn += chunk
        total_accepted += int(ok.sum())
    out = np.vstack(accepted)[:n]
    return EmpiricalDistribution(out, provenance=f"rejection-oracle[{cm.kind}, c={c}]")


def independence_gap(
    z_batch: np.ndarray,
    c_batch: np.ndarray,
    cm: ConditionModel,
    k: KernelSpec = KernelSpec(),
    rng: np.random.Generator | None = None,
    n_permutations: int = 200,
) -> tuple[float, float]:
    """Joint-vs-product test: MMD between (z, c) rows under the identity
    pairing and under a fresh random pairing, with a permutation p-value."""
    z_batch = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    if z_batch.shape[0] < 100:
        raise ConfigurationError("independence gap needs a batch of at least 100")
    if rng is None:
        rng = np.random.default_rng(0)
    e = np.atleast_2d(embed_condition(cm, c_batch))
    joint = np.hstack([z_batch, e])
    shuffled = np.hstack([z_batch, e[rng.permutation(e.shape[0])]])
    gap, p_value, _ = mmd_permutation_test(joint, shuffled, k, n_permutations, rng)
    return gap, p_value


def grad_check(
    loss: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    values: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Worst-coordinate relative error of an analytic gradient against the
    central-difference oracle."""
    fd = finite_diff_grad(loss, values, h)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic_grad)), 1e-6)
    return float(np.max(np.abs(analytic_grad - fd) / denom))
