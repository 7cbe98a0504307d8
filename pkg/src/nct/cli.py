"""Command-line entry points: pretraining, adapter training, baselines,
ablations, evaluation, gradient checking, and figures."""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np
import tomli

from .autodiff import ConfigurationError, ParameterVector, Var, backward, finite_diff_grad
from .evaluation import (
    KernelSpec,
    MetricsRow,
    OracleInfeasibleError,
    conditional_oracle,
    consistency_metric,
    grad_check,
    mismatch_rate,
    mmd2_vstat,
    mmd_permutation_test,
)
from .io import (
    FigureSpec,
    atomic_replace_write,
    render_scatter_svg,
    write_manifest,
    write_metrics_csv,
    write_trainlog_csv,
)
from .models import (
    AdapterModel,
    CheckpointError,
    ConditionModel,
    EmaState,
    GeneratorModel,
    generate,
    generate_conditional,
    load_adapter,
    load_generator,
    save_adapter,
    save_generator,
)
from .nn import MlpSpec, TrainingError
from .schedule import sample_coupled
from .training import (
    DistanceMetric,
    NctConfig,
    PretrainConfig,
    PretrainingFailedError,
    _substream,
    baseline_coupled,
    baseline_naive,
    boundary_loss,
    nct_train,
    noise_consistency_loss,
    primal_step,
)
from .schedule import make_schedule

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_CONFIG = 2


DEFAULT_CONFIG: dict = {
    "run": {
        "out": "runs/out",
        "seed": 0,
        "generator": "",
        "adapter": "",
    },
    "pretrain": {
        "target": "eight-gaussians",
        "latent_dim": 2,
        "hidden_dims": [128, 128],
        "activation": "tanh",
        "batch_size": 256,
        "lr": 1e-3,
        "total_steps": 4000,
        "holdout_n": 2000,
        "mmd_threshold": 0.01,
    },
    "condition": {
        "kind": "quadrant-label",
        "grid_size": 1.0,
        "projection": [1.0, 0.0],
        "noise_scale": 0.0,
        "flip_prob": 0.0,
    },
    "nct": {
        "xi": 1e-3,
        "eta": 0.1,
        "lambda0": 1.0,
        "particles": 1,
        "N": 8,
        "schedule_kind": "linear-sigma",
        "batch_size": 128,
        "lr": 1e-3,
        "total_steps": 20000,
        "distance_kind": "squared-l2",
        "huber_c": 1.0,
        "dual_signal": "constraint",
        "sg_target": "live",
        "smoothing": 0.9,
        "ema_decay": 0.999,
        "adapter_width": 64,
        "adapter_embed_dim": 16,
    },
    "eval": {
        "n_samples": 2000,
        "n_permutations": 200,
        "per_label_n": 1000,
    },
}


class ConfigError(Exception):
    pass


def _merge_checked(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            out[key] = _merge_checked(base[key], value, where)
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{where} expects a boolean")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool):
            raise ConfigError(f"{where} expects an integer")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects an integer") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects a number") from None
    if isinstance(default, list):
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, list):
            raise ConfigError(f"{where} expects a list")
        return value
    return str(value)


def load_config(config_path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        try:
            with open(config_path, "rb") as f:
                user = tomli.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {config_path}: {exc}") from None
        cfg = _merge_checked(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[leaf] = _coerce(node[leaf], value, key)
    return cfg


def _condition_model(cfg: dict) -> ConditionModel:
    c = cfg["condition"]
    return ConditionModel(
        c["kind"],
        grid_size=c["grid_size"],
        projection=tuple(c["projection"]),
        noise_scale=c["noise_scale"],
        flip_prob=c["flip_prob"],
    )


def _nct_config(cfg: dict, seed: int, **flag_overrides) -> NctConfig:
    n = cfg["nct"]
    return NctConfig(
        xi=n["xi"],
        eta=n["eta"],
        lambda0=n["lambda0"],
        particles=n["particles"],
        N=n["N"],
        schedule_kind=n["schedule_kind"],
        batch_size=n["batch_size"],
        lr=n["lr"],
        total_steps=n["total_steps"],
        distance=DistanceMetric(n["distance_kind"], n["huber_c"]),
        dual_signal=n["dual_signal"],
        sg_target=n["sg_target"],
        smoothing=n["smoothing"],
        ema_decay=n["ema_decay"],
        adapter_width=n["adapter_width"],
        adapter_embed_dim=n["adapter_embed_dim"],
        seed=seed,
        **flag_overrides,
    )


def _pretrain_config(cfg: dict, seed: int) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(
        target=p["target"],
        latent_dim=p["latent_dim"],
        hidden_dims=tuple(p["hidden_dims"]),
        activation=p["activation"],
        batch_size=p["batch_size"],
        lr=p["lr"],
        total_steps=p["total_steps"],
        holdout_n=p["holdout_n"],
        mmd_threshold=p["mmd_threshold"],
        seed=seed,
    )


def _require_generator(cfg: dict) -> GeneratorModel:
    path = cfg["run"]["generator"]
    if not path:
        raise ConfigError("run.generator must point to a generator checkpoint")
    gen, _ = load_generator(path)
    return gen


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg, out, command, overrides):
    write_manifest(out / "manifest.json", cfg, cfg["run"]["seed"], command, overrides)


def cmd_pretrain(cfg: dict, args, overrides) -> int:
    out = _out_dir(cfg)
    seed = cfg["run"]["seed"]
    gen, log = pretrain_with_log(cfg, seed)
    atomic_replace_write(
        out / "generator.ckpt", lambda p: save_generator(p, gen, rng_seed=seed)
    )
    write_trainlog_csv(out / "pretrain_log.csv", log)
    rows = [
        MetricsRow(
            "pretrain_holdout_mmd2",
            gen.meta["holdout_mmd2"],
            n_x=cfg["pretrain"]["holdout_n"],
            n_y=cfg["pretrain"]["holdout_n"],
            kernel=KernelSpec("rbf-mixture").describe(),
            seed=str(seed),
        ),
        MetricsRow("pretrain_mmd_threshold", gen.meta["mmd_threshold"], seed=str(seed)),
    ]
    write_metrics_csv(out / "metrics.csv", rows)
    _finish(cfg, out, "pretrain", overrides)
    return EXIT_OK


def pretrain_with_log(cfg, seed):
    from .training import pretrain_generator

    return pretrain_generator(_pretrain_config(cfg, seed))


def _train_and_save(cfg, overrides, command, trainer, ckpt_name, **nct_flags) -> int:
    out = _out_dir(cfg)
    seed = cfg["run"]["seed"]
    gen = _require_generator(cfg)
    cm = _condition_model(cfg)
    ncfg = _nct_config(cfg, seed, **nct_flags)
    ad, ema, log = trainer(gen, cm, ncfg)
    sched = {"N": ncfg.N, "kind": ncfg.schedule_kind}
    atomic_replace_write(
        out / f"{ckpt_name}.ckpt",
        lambda p: save_adapter(p, ad, cm, schedule=sched, rng_seed=seed, step=ncfg.total_steps),
    )
    ema_model = AdapterModel(ema.shadow, ad.base_spec, ad.cond_dim, ad.embed_dim, ad.width)
    atomic_replace_write(
        out / f"{ckpt_name}_ema.ckpt",
        lambda p: save_adapter(
            p, ema_model, cm, schedule=sched, rng_seed=seed, step=ncfg.total_steps
        ),
    )
    write_trainlog_csv(out / "trainlog.csv", log)
    if log.events:
        (out / "events.log").write_text("\n".join(log.events) + "\n")
    _finish(cfg, out, command, overrides)
    return EXIT_OK


def cmd_train_adapter(cfg, args, overrides) -> int:
    return _train_and_save(cfg, overrides, "train-adapter", nct_train, "adapter")


def cmd_baseline(cfg, args, overrides) -> int:
    trainer = baseline_naive if args.mode == "naive" else baseline_coupled
    return _train_and_save(
        cfg, overrides, f"baseline --mode {args.mode}", trainer, f"baseline_{args.mode}"
    )


def cmd_ablate(cfg, args, overrides) -> int:
    flags = {
        "consistency": {"use_consistency": False},
        "boundary": {"use_boundary": False},
        # fixed lambda: the dual variable stays at lambda0
        "primal-dual": {"use_dual": False},
    }[args.drop]
    return _train_and_save(
        cfg,
        overrides,
        f"ablate --drop {args.drop}",
        nct_train,
        f"ablate_{args.drop.replace('-', '_')}",
        **flags,
    )


def _load_adapter_for_eval(cfg) -> tuple[AdapterModel, ConditionModel]:
    path = cfg["run"]["adapter"]
    if not path:
        raise ConfigError("run.adapter must point to an adapter checkpoint")
    ad, cm, _ = load_adapter(path)
    return ad, cm


def cmd_eval(cfg, args, overrides) -> int:
    out = _out_dir(cfg)
    seed = cfg["run"]["seed"]
    gen = _require_generator(cfg)
    ad, cm = _load_adapter_for_eval(cfg)
    ecfg = cfg["eval"]
    n = ecfg["n_samples"]
    rng = _substream(seed, "evaluation")
    kernel = KernelSpec("rbf-mixture")
    rows: list[MetricsRow] = []

    # independent (z, c): condition drawn from its marginal via fresh couples
    z = rng.standard_normal((n, gen.spec.input_dim))
    c_marginal = sample_coupled(gen, cm, n, rng).c
    samples = generate_conditional(gen, ad, z, c_marginal, cm)
    rows.append(
        MetricsRow(
            "consistency_metric",
            consistency_metric(samples, c_marginal, cm),
            n_x=n,
            seed=str(seed),
        )
    )
    if cm.kind == "quadrant-label":
        rows.append(
            MetricsRow(
                "mismatch_rate", mismatch_rate(samples, c_marginal, cm), n_x=n, seed=str(seed)
            )
        )

    # boundary check on coupled pairs
    coupled = sample_coupled(gen, cm, n, rng)
    cond_out = generate_conditional(gen, ad, coupled.z, coupled.c, cm)
    bmr = float(np.mean(np.any(cond_out != coupled.x, axis=1)))
    rows.append(MetricsRow("boundary_mismatch_rate", bmr, n_x=n, seed=str(seed)))
    rows.append(
        MetricsRow(
            "boundary_mean_distance",
            float(np.mean(np.sum((cond_out - coupled.x) ** 2, axis=1))),
            n_x=n,
            seed=str(seed),
        )
    )

    # marginal fidelity: adapter outputs vs base generator outputs
    base_out = generate(gen, rng.standard_normal((n, gen.spec.input_dim)))
    rows.append(
        MetricsRow(
            "marginal_mmd2_vs_base",
            mmd2_vstat(samples, base_out, kernel),
            n_x=n,
            n_y=n,
            kernel=kernel.describe(),
            seed=str(seed),
        )
    )

    if cm.kind == "quadrant-label":
        n_lab = ecfg["per_label_n"]
        for label in range(cm.n_labels):
            oracle = conditional_oracle(gen, cm, label, n_lab, rng)
            zl = rng.standard_normal((n_lab, gen.spec.input_dim))
            adapter_samples = generate_conditional(
                gen, ad, zl, np.full(n_lab, label), cm
            )
            stat, pval, _ = mmd_permutation_test(
                adapter_samples, oracle.samples, kernel, ecfg["n_permutations"], rng
            )
            rows.append(
                MetricsRow(
                    f"per_label_mmd2[c={label}]",
                    stat,
                    n_x=n_lab,
                    n_y=n_lab,
                    kernel=kernel.describe(),
                    seed=str(seed),
                )
            )
            rows.append(
                MetricsRow(f"per_label_mmd2_pvalue[c={label}]", pval, n_x=n_lab, seed=str(seed))
            )

    write_metrics_csv(out / "metrics.csv", rows)
    _finish(cfg, out, "eval", overrides)
    return EXIT_OK


def cmd_gradcheck(cfg, args, overrides) -> int:
    out = _out_dir(cfg)
    seed = cfg["run"]["seed"]
    rng = _substream(seed, "gradcheck")
    from .models import make_generator
    from .nn import MlpSpec

    spec = MlpSpec(2, (8,), 2)
    gen = make_generator(spec, rng)
    cm = _condition_model(cfg)
    ad = AdapterModel.zero_init(spec, cm.condition_dim(), rng, embed_dim=4, width=6)
    ad.phi.values += 0.05 * rng.standard_normal(ad.phi.values.size)
    batch = sample_coupled(gen, cm, 8, rng)
    sched = make_schedule(4)
    metric = DistanceMetric("squared-l2")
    frozen = ad.phi.copy()  # the stop-gradient target stays at these weights
    rows = []
    for name, builder in (
        (
            "noise_consistency_loss",
            lambda phi_var, r: noise_consistency_loss(
                gen, ad, cm, batch, 1, sched, metric, 1, r, phi_var=phi_var, target_phi=frozen
            ),
        ),
        ("boundary_loss", lambda phi_var, r: boundary_loss(gen, ad, cm, batch, metric, phi_var)),
        (
            "saddle_objective",
            lambda phi_var, r: noise_consistency_loss(
                gen, ad, cm, batch, 1, sched, metric, 1, r, phi_var=phi_var, target_phi=frozen
            )
            + 0.7 * boundary_loss(gen, ad, cm, batch, metric, phi_var),
        ),
    ):
        def loss_at(values, _b=builder):
            return float(_b(Var(values), _substream(seed, "gc-noise")).data)

        phi_var = Var(ad.phi.values, requires_grad=True)
        loss = builder(phi_var, _substream(seed, "gc-noise"))
        phi_var.grad = None
        backward(loss)
        err = grad_check(loss_at, phi_var.grad, ad.phi.values.copy())
        rows.append(MetricsRow(f"gradcheck_max_rel_err[{name}]", err, seed=str(seed)))
        print(f"gradcheck {name}: max relative error {err:.3e}")
    write_metrics_csv(out / "metrics.csv", rows)
    _finish(cfg, out, "gradcheck", overrides)
    return EXIT_OK


def cmd_figures(cfg, args, overrides) -> int:
    out = _out_dir(cfg)
    seed = cfg["run"]["seed"]
    gen = _require_generator(cfg)
    rng = _substream(seed, "figures")
    n = cfg["eval"]["n_samples"]
    base = generate(gen, rng.standard_normal((n, gen.spec.input_dim)))
    layers = [("base generator", base)]
    if cfg["run"]["adapter"]:
        ad, cm = _load_adapter_for_eval(cfg)
        if cm.kind == "quadrant-label":
            for label in range(cm.n_labels):
                z = rng.standard_normal((n // 4, gen.spec.input_dim))
                pts = generate_conditional(gen, ad, z, np.full(n // 4, label), cm)
                layers.append((f"adapter c={label}", pts))
        else:
            coupled = sample_coupled(gen, cm, n, rng)
            z = rng.standard_normal((n, gen.spec.input_dim))
            layers.append(
                ("adapter (marginal c)", generate_conditional(gen, ad, z, coupled.c, cm))
            )
    render_scatter_svg(FigureSpec(layers, str(out / "samples.svg")))
    _finish(cfg, out, "figures", overrides)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nct", description="noise-consistency adapter training laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides"
        )
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", help="overrides run.out")

    common(sub.add_parser("pretrain", help="train and checkpoint the base generator"))
    common(sub.add_parser("train-adapter", help="noise-consistency adapter training"))
    p = sub.add_parser("baseline", help="failure-mode baselines")
    p.add_argument("--mode", choices=("naive", "coupled"), required=True)
    common(p)
    p = sub.add_parser("ablate", help="drop one training component")
    p.add_argument("--drop", choices=("consistency", "boundary", "primal-dual"), required=True)
    common(p)
    common(sub.add_parser("eval", help="full metric suite"))
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    common(sub.add_parser("figures", help="render sample scatter figures"))
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-adapter": cmd_train_adapter,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "figures": cmd_figures,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args, overrides)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        TrainingError,
        PretrainingFailedError,
        CheckpointError,
        OracleInfeasibleError,
        OSError,
    ) as exc:
        print(f"error: compute: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
