"""End-to-end statistical acceptance suite.

Each test prints one PASS/FAIL line. The heavy fixtures (one full adapter
training run, two ablations, two baselines) are trained once per session on
the shared pretrained generator; expect the whole module to take tens of
minutes.
"""

import numpy as np
import pytest

from nct.autodiff import Var, backward
from nct.cli import run
from nct.evaluation import (
    KernelSpec,
    conditional_oracle,
    grad_check,
    independence_gap,
    mismatch_rate,
    mmd2_vstat,
    mmd_permutation_test,
)
from nct.models import (
    AdapterModel,
    ConditionModel,
    generate,
    generate_conditional,
    make_generator,
)
from nct.nn import MlpSpec
from nct.schedule import diffuse, make_schedule, sample_coupled, sample_latents
from nct.training import (
    DistanceMetric,
    NctConfig,
    baseline_coupled,
    baseline_naive,
    boundary_loss,
    nct_train,
    noise_consistency_loss,
)

# marginal-collapse ratio for the boundary-loss ablation, frozen after one
# calibration run (test_criterion_7 measured ablated/full marginal mmd2 of
# 0.104 / 0.00066 = 158x; the floor leaves a wide margin for seed noise)
COLLAPSE_RATIO_MIN = 10.0

EVAL_SEED = 20240901


def report(num: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {num:2d}] {'PASS' if ok else 'FAIL'} - {detail}")


def training_config(**overrides) -> NctConfig:
    # the frozen full-budget configuration used by every acceptance run
    return NctConfig(seed=0, **overrides)


def ema_model(ad, ema) -> AdapterModel:
    return AdapterModel(ema.shadow, ad.base_spec, ad.cond_dim, ad.embed_dim, ad.width)


@pytest.fixture(scope="module")
def nct_run(pretrained_generator, quadrant_condition):
    cfg = training_config()
    ad, ema, log = nct_train(pretrained_generator, quadrant_condition, cfg)
    return ad, ema, log, cfg


@pytest.fixture(scope="module")
def ablate_consistency_run(pretrained_generator, quadrant_condition):
    cfg = training_config(use_consistency=False)
    ad, ema, _ = nct_train(pretrained_generator, quadrant_condition, cfg)
    return ad, ema


@pytest.fixture(scope="module")
def ablate_boundary_run(pretrained_generator, quadrant_condition):
    cfg = training_config(use_boundary=False)
    ad, ema, _ = nct_train(pretrained_generator, quadrant_condition, cfg)
    return ad, ema


@pytest.fixture(scope="module")
def naive_run(pretrained_generator, quadrant_condition):
    ad, ema, _ = baseline_naive(pretrained_generator, quadrant_condition, training_config())
    return ad, ema


@pytest.fixture(scope="module")
def coupled_run(pretrained_generator, quadrant_condition):
    ad, ema, _ = baseline_coupled(pretrained_generator, quadrant_condition, training_config())
    return ad, ema


@pytest.fixture(scope="module")
def chance_stats(pretrained_generator, quadrant_condition):
    """Chance mismatch rate when conditions are ignored: 1 - sum_c p(c)^2."""
    batch = sample_coupled(
        pretrained_generator, quadrant_condition, 100_000, np.random.default_rng(77)
    )
    p = np.bincount(batch.c, minlength=4) / batch.c.size
    return 1.0 - float(np.sum(p**2))


def independent_eval_samples(gen, cm, ad, ema, n, seed=EVAL_SEED):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, gen.spec.input_dim))
    c = sample_coupled(gen, cm, n, rng).c  # requested labels from the marginal
    out = generate_conditional(gen, ema_model(ad, ema), z, c, cm)
    return out, c


def test_criterion_1_variance_preservation():
    sched = make_schedule(16)
    rng = np.random.default_rng(0)
    batch = sample_latents(100_000, 2, rng)
    worst_mean, worst_cov = 0.0, 0.0
    for k in range(sched.N + 1):
        zk = diffuse(batch.z, batch.eps, k, sched)
        worst_mean = max(worst_mean, float(np.max(np.abs(zk.mean(axis=0)))))
        worst_cov = max(worst_cov, float(np.max(np.abs(np.cov(zk.T) - np.eye(2)))))
    ok = worst_mean < 0.02 and worst_cov < 0.05
    report(1, ok, f"variance preservation: |mean| {worst_mean:.4f} < 0.02, "
                  f"|cov - I| {worst_cov:.4f} < 0.05 across all 17 levels")
    assert ok


def test_criterion_2_interpolation_endpoints(pretrained_generator, quadrant_condition):
    gen, cm = pretrained_generator, quadrant_condition
    sched = make_schedule(16)
    rng = np.random.default_rng(1)

    batch = sample_coupled(gen, cm, 1000, rng)
    _, p_clean = independence_gap(batch.z, batch.c, cm, rng=rng)

    independent = 0
    runs = 50
    for _ in range(runs):
        b = sample_coupled(gen, cm, 1000, rng)
        eps = rng.standard_normal(b.z.shape)
        z_top = diffuse(b.z, eps, sched.N, sched)  # fully diffused: pure noise
        _, p = independence_gap(z_top, b.c, cm, rng=rng)
        independent += p >= 0.01
    ok = p_clean < 0.01 and independent >= int(0.98 * runs)
    report(2, ok, f"interpolation endpoints: coupled p {p_clean:.4f} < 0.01; "
                  f"fully diffused independent in {independent}/{runs} runs (need >= 49)")
    assert ok


def test_criterion_3_gradient_correctness():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        spec = MlpSpec(2, (8,), 2)
        gen = make_generator(spec, rng)
        cm = ConditionModel("quadrant-label")
        ad = AdapterModel.zero_init(spec, cm.condition_dim(), rng, embed_dim=4, width=6)
        ad.phi.values += 0.05 * rng.standard_normal(ad.phi.values.size)
        batch = sample_coupled(gen, cm, 8, rng)
        sched = make_schedule(4)
        metric = DistanceMetric("squared-l2")
        frozen = ad.phi.copy()

        def l_con(phi_var):
            return noise_consistency_loss(
                gen, ad, cm, batch, 1, sched, metric, 1, np.random.default_rng(seed),
                phi_var=phi_var, target_phi=frozen,
            )

        def l_bound(phi_var):
            return boundary_loss(gen, ad, cm, batch, metric, phi_var=phi_var)

        for builder in (l_con, l_bound, lambda v: l_con(v) + 0.7 * l_bound(v)):
            phi_var = Var(ad.phi.values, requires_grad=True)
            backward(builder(phi_var))
            err = grad_check(
                lambda vals, b=builder: float(b(Var(vals)).data),
                phi_var.grad,
                ad.phi.values.copy(),
            )
            worst = max(worst, err)
    ok = worst < 1e-4
    report(3, ok, f"gradient correctness: worst relative error {worst:.2e} < 1e-4 "
                  f"over 20 seeds x 3 objectives")
    assert ok


def test_criterion_4_zero_init_boundary_optimum(pretrained_generator, quadrant_condition):
    gen, cm = pretrained_generator, quadrant_condition
    ad = AdapterModel.zero_init(gen.spec, cm.condition_dim(), np.random.default_rng(0))
    rng = np.random.default_rng(2)
    batch = sample_coupled(gen, cm, 10_000, rng)
    loss = float(boundary_loss(gen, ad, cm, batch, DistanceMetric()).data)
    z = rng.standard_normal((10_000, 2))
    c = rng.integers(0, 4, size=10_000)
    bitwise = np.array_equal(generate_conditional(gen, ad, z, c, cm), generate(gen, z))
    ok = loss == 0.0 and bitwise
    report(4, ok, f"zero-init optimum: boundary loss == {loss} exactly, conditional "
                  f"output bitwise-identical to base on 10^4 (z, c): {bitwise}")
    assert ok


def test_criterion_5_end_to_end_conditional(pretrained_generator, quadrant_condition, nct_run):
    gen, cm = pretrained_generator, quadrant_condition
    ad, ema, _, _ = nct_run
    samples, requested = independent_eval_samples(gen, cm, ad, ema, 2000)
    rate = mismatch_rate(samples, requested, cm)

    rng = np.random.default_rng(EVAL_SEED + 1)
    kernel = KernelSpec("rbf-mixture")
    details = []
    below = True
    for label in range(4):
        oracle = conditional_oracle(gen, cm, label, 2000, rng)
        z = rng.standard_normal((2000, 2))
        ours = generate_conditional(gen, ema_model(ad, ema), z, np.full(2000, label), cm)
        stat, _, null = mmd_permutation_test(ours, oracle.samples, kernel, 200, rng)
        q99 = float(np.percentile(null, 99))
        below = below and stat < q99
        details.append(f"c={label}: {stat:.5f} vs null99 {q99:.5f}")
    ok = rate < 0.05 and below
    report(5, ok, f"end-to-end conditionals: mismatch rate {rate:.4f} < 0.05; "
                  f"per-label mmd2 below permutation null 99th pct: {below} "
                  f"({'; '.join(details)})")
    assert ok


def test_criterion_6_consistency_ablation(
    pretrained_generator, quadrant_condition, nct_run, ablate_consistency_run, chance_stats
):
    gen, cm = pretrained_generator, quadrant_condition
    ad, ema, _, _ = nct_run
    full_samples, full_req = independent_eval_samples(gen, cm, ad, ema, 2000)
    full_rate = mismatch_rate(full_samples, full_req, cm)

    a_ad, a_ema = ablate_consistency_run
    abl_samples, abl_req = independent_eval_samples(gen, cm, a_ad, a_ema, 2000)
    abl_rate = mismatch_rate(abl_samples, abl_req, cm)
    se = float(np.sqrt(chance_stats * (1 - chance_stats) / 2000))
    ok = abs(abl_rate - chance_stats) <= 2 * se and full_rate < 0.05
    report(6, ok, f"consistency ablation: ablated mismatch {abl_rate:.4f} within 2 SE "
                  f"({2 * se:.4f}) of chance {chance_stats:.4f}; full NCT {full_rate:.4f} < 0.05")
    assert ok


def test_criterion_7_boundary_ablation(
    pretrained_generator, quadrant_condition, nct_run, ablate_boundary_run
):
    gen, cm = pretrained_generator, quadrant_condition
    kernel = KernelSpec("rbf-mixture")
    rng = np.random.default_rng(EVAL_SEED + 2)
    base = generate(gen, rng.standard_normal((2000, 2)))

    def marginal_mmd2(ad, ema):
        samples, _ = independent_eval_samples(gen, cm, ad, ema, 2000, seed=EVAL_SEED + 3)
        return mmd2_vstat(samples, base, kernel)

    ad, ema, _, _ = nct_run
    full = marginal_mmd2(ad, ema)
    a_ad, a_ema = ablate_boundary_run
    ablated = marginal_mmd2(a_ad, a_ema)
    ratio = ablated / max(full, 1e-12)
    ok = ratio >= COLLAPSE_RATIO_MIN
    report(7, ok, f"boundary ablation: marginal mmd2 {ablated:.5f} vs full {full:.5f}, "
                  f"ratio {ratio:.1f}x >= {COLLAPSE_RATIO_MIN}x")
    assert ok


def test_criterion_8_failure_mode_baselines(
    pretrained_generator, quadrant_condition, naive_run, coupled_run, chance_stats
):
    gen, cm = pretrained_generator, quadrant_condition
    rng = np.random.default_rng(EVAL_SEED + 4)

    # mean collapse: per-label output variance vs the oracle's
    n_ad, n_ema = naive_run
    ratios = []
    for label in range(4):
        oracle = conditional_oracle(gen, cm, label, 2000, rng)
        z = rng.standard_normal((2000, 2))
        ours = generate_conditional(gen, ema_model(n_ad, n_ema), z, np.full(2000, label), cm)
        ratios.append(np.sum(ours.var(axis=0)) / np.sum(oracle.samples.var(axis=0)))
    var_ratio = float(np.mean(ratios))

    c_ad, c_ema = coupled_run
    samples, requested = independent_eval_samples(gen, cm, c_ad, c_ema, 2000)
    rate = mismatch_rate(samples, requested, cm)
    se = float(np.sqrt(chance_stats * (1 - chance_stats) / 2000))
    ok = var_ratio < 0.2 and abs(rate - chance_stats) <= 2 * se
    report(8, ok, f"failure modes: naive variance ratio {var_ratio:.3f} < 0.2 "
                  f"(per-label {np.round(ratios, 3).tolist()}); coupled mismatch "
                  f"{rate:.4f} within 2 SE ({2 * se:.4f}) of chance {chance_stats:.4f}")
    assert ok


def test_criterion_9_dual_dynamics(nct_run):
    _, _, log, cfg = nct_run
    lambdas = np.array([row["lambda"] for row in log.rows])
    # reconstruct the exponentially smoothed constraint signal from the log
    smoothed = None
    for row in log.rows:
        smoothed = row["L_bound"] if smoothed is None else (
            cfg.smoothing * smoothed + (1 - cfg.smoothing) * row["L_bound"]
        )
    ok = bool(np.all(lambdas >= 0.0)) and smoothed <= 1.5 * cfg.xi
    report(9, ok, f"dual dynamics: min lambda {lambdas.min():.4f} >= 0; final smoothed "
                  f"boundary loss {smoothed:.5f} <= 1.5*xi = {1.5 * cfg.xi:.5f} "
                  f"(final lambda {lambdas[-1]:.3f})")
    assert ok


def test_criterion_10_determinism(generator_ckpt_path, tmp_path):
    # representative acceptance runs repeated with one seed must produce
    # byte-identical metrics CSVs (training-free here; full training
    # determinism is covered by the unit suite)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"gc_{name}"
        assert run(["gradcheck", "--out", str(out), "--seed", "11"]) == 0
        outs.append((out / "metrics.csv").read_bytes())
    gc_same = outs[0] == outs[1]

    evals = []
    for name in ("a", "b"):
        out = tmp_path / f"ev_{name}"
        train_out = tmp_path / f"tr_{name}"
        args = [
            "--set", f"run.generator={generator_ckpt_path}",
            "--set", "nct.total_steps=40",
            "--seed", "11",
        ]
        assert run(["train-adapter", "--out", str(train_out), *args]) == 0
        assert run([
            "eval", "--out", str(out), *args,
            "--set", f"run.adapter={train_out / 'adapter.ckpt'}",
            "--set", "eval.n_samples=500",
            "--set", "eval.per_label_n=200",
            "--set", "eval.n_permutations=50",
        ]) == 0
        evals.append((out / "metrics.csv").read_bytes())
    eval_same = evals[0] == evals[1]
    ok = gc_same and eval_same
    report(10, ok, f"determinism: gradcheck metrics byte-identical {gc_same}; "
                   f"train+eval metrics byte-identical {eval_same}")
    assert ok
