import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nct.autodiff import ConfigurationError
from nct.evaluation import (
    EmpiricalDistribution,
    KernelSpec,
    OracleInfeasibleError,
    conditional_oracle,
    consistency_metric,
    grad_check,
    independence_gap,
    median_bandwidth,
    mismatch_rate,
    mmd2_vstat,
    mmd_permutation_test,
)
from nct.models import ConditionModel, GeneratorModel, extract_condition
from nct.nn import MlpSpec
from nct.autodiff import ParameterVector

ALL_KERNELS = (
    KernelSpec("rbf-mixture"),
    KernelSpec("rbf-mixture", bandwidths=(1.0,)),
    KernelSpec("neg-squared-distance"),
    KernelSpec("shifted-sqrt"),
)


def identity_generator():
    """Single linear layer f(z) = z: an exactly quadrant-symmetric generator."""
    spec = MlpSpec(2, (), 2)
    theta = ParameterVector.zeros(spec.layout())
    theta.set("w0", np.eye(2))
    return GeneratorModel(theta, spec)


class TestMmd:
    @pytest.mark.parametrize("kernel", ALL_KERNELS, ids=lambda k: k.describe())
    def test_identical_sets_give_zero(self, kernel):
        x = np.random.default_rng(0).standard_normal((40, 2))
        assert abs(mmd2_vstat(x, x.copy(), kernel)) < 1e-12

    def test_singleton_neg_squared_distance(self):
        x, y = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])
        assert abs(mmd2_vstat(x, y, KernelSpec("neg-squared-distance")) - 2.0) < 1e-12

    def test_singleton_rbf_bandwidth_one(self):
        x, y = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])
        got = mmd2_vstat(x, y, KernelSpec("rbf-mixture", bandwidths=(1.0,)))
        assert abs(got - (2.0 - 2.0 * np.exp(-0.5))) < 1e-9

    def test_singleton_shifted_sqrt(self):
        # k(a,b) = c - sqrt(d^2 + c^2); for points distance 1 apart, c = 1:
        # mmd2 = 2*(c - c) - 2*(c - sqrt(2)) = 2*sqrt(2) - 2
        x, y = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])
        got = mmd2_vstat(x, y, KernelSpec("shifted-sqrt", c=1.0))
        assert abs(got - (2.0 * np.sqrt(2.0) - 2.0)) < 1e-12

    def test_symmetry_in_arguments(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((30, 2)), rng.standard_normal((25, 2)) + 1.0
        for kernel in ALL_KERNELS:
            assert mmd2_vstat(x, y, kernel) == pytest.approx(mmd2_vstat(y, x, kernel))

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            mmd2_vstat(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_psd_flags(self):
        assert KernelSpec("rbf-mixture").is_psd
        assert not KernelSpec("neg-squared-distance").is_psd
        assert not KernelSpec("shifted-sqrt").is_psd
        assert "non-psd" in KernelSpec("shifted-sqrt").describe()

    def test_accepts_empirical_distributions(self):
        x = EmpiricalDistribution(np.zeros((5, 2)), "a")
        y = EmpiricalDistribution(np.ones((5, 2)), "b")
        assert mmd2_vstat(x, y, KernelSpec("neg-squared-distance")) > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_rbf_mmd_nonnegative_and_shuffle_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((20, 2))
    y = rng.standard_normal((17, 2)) + rng.standard_normal(2)
    k = KernelSpec("rbf-mixture")
    v = mmd2_vstat(x, y, k)
    assert v >= -1e-12  # PSD kernel: V-statistic cannot go negative
    perm = rng.permutation(20)
    assert mmd2_vstat(x[perm], y, k) == pytest.approx(v)


class TestMedianBandwidth:
    def test_two_points(self):
        assert median_bandwidth(np.array([[0.0, 0.0]]), np.array([[3.0, 0.0]])) == 3.0

    def test_degenerate_fallback(self):
        x = np.zeros((4, 2))
        assert median_bandwidth(x, x) == 1.0

    def test_duplication_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
        a = median_bandwidth(x, y)
        b = median_bandwidth(np.vstack([x, x]), np.vstack([y, y]))
        # duplication only adds zero-distance pairs and repeats; the median
        # over a symmetric duplication stays within the original spread
        assert abs(a - b) <= a * 0.5


class TestPermutationTest:
    def test_same_distribution_p_value_not_small(self):
        rng = np.random.default_rng(0)
        rejections = 0
        for _ in range(20):
            x = rng.standard_normal((60, 2))
            y = rng.standard_normal((60, 2))
            _, p, _ = mmd_permutation_test(x, y, n_permutations=200, rng=rng)
            rejections += p < 0.05
        assert rejections <= 4  # expect ~1 at the 5% level

    def test_shifted_distribution_detected(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((100, 2))
        y = rng.standard_normal((100, 2)) + 2.0
        stat, p, null = mmd_permutation_test(x, y, n_permutations=200, rng=rng)
        assert p <= 1 / 201 + 1e-12
        assert stat > np.max(null)

    def test_p_value_bounds(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((30, 2)), rng.standard_normal((30, 2))
        _, p, null = mmd_permutation_test(x, y, n_permutations=50, rng=rng)
        assert 1 / 51 <= p <= 1.0
        assert null.shape == (50,)

    def test_threaded_matches_serial(self, monkeypatch):
        rng_args = dict(n_permutations=64)
        x = np.random.default_rng(3).standard_normal((40, 2))
        y = np.random.default_rng(4).standard_normal((40, 2))
        monkeypatch.delenv("NCT_THREADS", raising=False)
        s1 = mmd_permutation_test(x, y, rng=np.random.default_rng(7), **rng_args)
        monkeypatch.setenv("NCT_THREADS", "4")
        s2 = mmd_permutation_test(x, y, rng=np.random.default_rng(7), **rng_args)
        assert s1[0] == s2[0]
        assert np.array_equal(s1[2], s2[2])


class TestConsistencyMetric:
    def test_oracle_samples_score_zero(self):
        cm = ConditionModel("quadrant-label")
        gen = identity_generator()
        oracle = conditional_oracle(gen, cm, 1, 200, np.random.default_rng(0))
        labels = np.full(200, 1)
        assert consistency_metric(oracle.samples, labels, cm) == 0.0
        assert mismatch_rate(oracle.samples, labels, cm) == 0.0

    def test_one_mismatch_among_four(self):
        cm = ConditionModel("quadrant-label")
        x = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])  # labels 0,1,2,3
        requested = np.array([0, 1, 2, 0])  # last row wrong
        assert consistency_metric(x, requested, cm) == pytest.approx(0.5)
        assert mismatch_rate(x, requested, cm) == pytest.approx(0.25)

    def test_projection_perfect_samples(self):
        cm = ConditionModel("noisy-projection", projection=(1.0, 0.0), noise_scale=0.3)
        x = np.array([[2.0, 5.0], [-1.0, 0.0]])
        c = np.array([2.0, -1.0])
        # scored with the noise-free extractor even though the model is noisy
        assert consistency_metric(x, c, cm) == 0.0

    def test_misaligned_shapes(self):
        cm = ConditionModel("quadrant-label")
        with pytest.raises(ConfigurationError):
            consistency_metric(np.zeros((3, 2)), np.zeros(2), cm)


class TestConditionalOracle:
    def test_quadrant_symmetry(self):
        gen = identity_generator()
        cm = ConditionModel("quadrant-label")
        rng = np.random.default_rng(0)
        for label in range(4):
            out = conditional_oracle(gen, cm, label, 400, rng)
            got = extract_condition(cm, out.samples)
            assert np.all(got == label)

    def test_acceptance_rate_one_quarter(self):
        # standard normal through the identity map: each quadrant has mass 1/4
        gen = identity_generator()
        cm = ConditionModel("quadrant-label")
        out = conditional_oracle(gen, cm, 2, 2000, np.random.default_rng(1))
        assert out.samples.shape == (2000, 2)
        assert np.all(out.samples[:, 0] < 0)
        assert np.all(out.samples[:, 1] < 0)
        frac_neg = np.mean(np.all(np.random.default_rng(2).standard_normal((20000, 2)) < 0, axis=1))
        assert abs(frac_neg - 0.25) < 0.02

    def test_exact_match_for_noiseless_labels(self):
        gen = identity_generator()
        cm = ConditionModel("quadrant-label", flip_prob=0.0)
        out = conditional_oracle(gen, cm, 0, 100, np.random.default_rng(3))
        assert np.all(extract_condition(cm, out.samples) == 0)

    def test_doubling_self_consistency(self):
        gen = identity_generator()
        cm = ConditionModel("quadrant-label")
        small = conditional_oracle(gen, cm, 0, 1000, np.random.default_rng(4))
        big = conditional_oracle(gen, cm, 0, 2000, np.random.default_rng(5))
        se = small.samples.std(axis=0) / np.sqrt(1000) + big.samples.std(axis=0) / np.sqrt(2000)
        assert np.all(np.abs(small.samples.mean(axis=0) - big.samples.mean(axis=0)) < 4 * se)

    def test_infeasible_condition_raises_with_rate(self):
        gen = identity_generator()
        cm = ConditionModel("noisy-projection", projection=(1.0, 0.0))
        with pytest.raises(OracleInfeasibleError) as exc:
            conditional_oracle(gen, cm, 100.0, 10, np.random.default_rng(6), max_draws=20_000)
        assert exc.value.acceptance_rate == 0.0

    def test_grid_tolerance_default(self):
        gen = identity_generator()
        cm = ConditionModel("coarse-grid", grid_size=1.0)
        out = conditional_oracle(gen, cm, np.array([0.5, 0.5]), 200, np.random.default_rng(7))
        # accepted points sit in the cell around the requested center
        assert np.all(np.abs(out.samples - 0.5) <= 0.5 + 1e-12)


class TestIndependenceGap:
    def test_coupled_conditions_detected(self):
        # c computed from z itself: strongly dependent at the clean endpoint
        rng = np.random.default_rng(0)
        z = rng.standard_normal((500, 2))
        cm = ConditionModel("quadrant-label")
        c = extract_condition(cm, z)
        gap, p = independence_gap(z, c, cm, rng=rng)
        assert p < 0.01

    def test_independent_conditions_not_detected(self):
        rng = np.random.default_rng(1)
        hits = 0
        runs = 20
        for _ in range(runs):
            z = rng.standard_normal((300, 2))
            c = rng.integers(0, 4, size=300)
            cm = ConditionModel("quadrant-label")
            _, p = independence_gap(z, c, cm, rng=rng)
            hits += p >= 0.01
        assert hits >= runs - 1

    def test_constant_condition_gap_near_zero(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((300, 2))
        cm = ConditionModel("quadrant-label")
        gap, p = independence_gap(z, np.full(300, 2), cm, rng=rng)
        assert p >= 0.01
        assert abs(gap) < 1e-6  # shuffling a constant changes nothing

    def test_small_batch_rejected(self):
        cm = ConditionModel("quadrant-label")
        with pytest.raises(ConfigurationError):
            independence_gap(np.zeros((50, 2)), np.zeros(50), cm)


class TestGradCheck:
    def test_exact_gradient_scores_near_zero(self):
        values = np.array([0.5, -1.0, 2.0])
        err = grad_check(lambda v: float(np.sum(v**2)), 2 * values, values)
        assert err < 1e-9

    def test_wrong_gradient_flagged(self):
        values = np.array([0.5, -1.0, 2.0])
        err = grad_check(lambda v: float(np.sum(v**2)), values, values)  # missing factor 2
        assert err > 0.4
