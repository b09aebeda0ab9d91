"""Differentially private federated fine-tuning of low-rank adapters, desk scale.

Library layout:

- ``linalg``: dense matrix primitives and keyed random streams
- ``privacy``: norm clipping, Gaussian noise calibration, privatization
- ``adapters``: low-rank factor pairs and the stacking aggregation
- ``simulation``: synthetic tasks, local training, the federated round loop
- ``noise_stats``: expectation/variance analysis of noisy factor products
- ``attacks``: membership-inference game and the privacy-bound check
- ``config`` / ``runner`` / ``cli``: experiment configuration and orchestration
"""

from .adapters import (
    ClientUpdate,
    FrozenBase,
    GlobalAdapter,
    LoraAdapter,
    adapter_delta,
    aggregate_stack,
    forward,
    global_delta,
    init_adapter,
    stacking_equivalence_residual,
)
from .linalg import RngStream, frobenius_norm, matmul, sample_gaussian, stack_h, stack_v
from .noise_stats import (
    NoiseModel,
    exact_total_variance,
    mc_expectation_diff,
    mc_total_variance,
    rank_sweep,
    size_sweep,
    variance_bound,
)
from .privacy import (
    MechanismParams,
    PrivacyBudget,
    calibrate_sigma,
    clip_frobenius,
    compose_budget,
    privatize,
)
from .simulation import (
    STRATEGIES,
    ExperimentResult,
    SyntheticTask,
    TrainConfig,
    generate_task,
    local_train,
    run_experiment,
    run_round,
)

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "frobenius_norm",
    "matmul",
    "stack_h",
    "stack_v",
    "sample_gaussian",
    "PrivacyBudget",
    "MechanismParams",
    "clip_frobenius",
    "calibrate_sigma",
    "privatize",
    "compose_budget",
    "LoraAdapter",
    "ClientUpdate",
    "GlobalAdapter",
    "FrozenBase",
    "adapter_delta",
    "forward",
    "aggregate_stack",
    "global_delta",
    "stacking_equivalence_residual",
    "init_adapter",
    "NoiseModel",
    "mc_expectation_diff",
    "mc_total_variance",
    "exact_total_variance",
    "variance_bound",
    "rank_sweep",
    "size_sweep",
    "STRATEGIES",
    "TrainConfig",
    "SyntheticTask",
    "ExperimentResult",
    "generate_task",
    "local_train",
    "run_round",
    "run_experiment",
    "__version__",
]
