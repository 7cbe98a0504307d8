"""Noise-consistency adapter training laboratory for one-step generators
on low-dimensional synthetic distributions."""

__version__ = "0.1.0"

from .autodiff import ParameterVector, Var, backward, finite_diff_grad
from .models import (
    AdapterModel,
    ConditionModel,
    EmaState,
    GeneratorModel,
    embed_condition,
    ema_update,
    extract_condition,
    generate,
    generate_conditional,
)
from .nn import AdamState, MlpSpec, adam_step, mlp_forward
from .schedule import NoiseSchedule, adjacent_pair, diffuse, make_schedule, sample_coupled
from .training import (
    DistanceMetric,
    DualState,
    NctConfig,
    PretrainConfig,
    baseline_coupled,
    baseline_naive,
    boundary_loss,
    distance,
    dual_step,
    nct_train,
    noise_consistency_loss,
    pretrain_generator,
    primal_step,
)
from .evaluation import (
    EmpiricalDistribution,
    KernelSpec,
    conditional_oracle,
    consistency_metric,
    grad_check,
    independence_gap,
    median_bandwidth,
    mismatch_rate,
    mmd2_vstat,
    mmd_permutation_test,
)
