"""Contrastive variational inference toolkit.

Fits a variational distribution to an unnormalized posterior by casting the
problem as soft-label classification over K proposal samples, alongside ELBO
and self-normalized forward-KL baselines, benchmark tasks, reference-posterior
oracles, and calibration/accuracy/SNR metrics.

Everything is computed in float64; importing this package enables JAX x64 mode.
"""

import jax

jax.config.update("jax_enable_x64", True)

from .core import (  # noqa: E402
    AdamState,
    DegenerateWeightsError,
    DivergedOptimizationError,
    ConfigurationError,
    NonFiniteGradientError,
    ParamVector,
    RngKey,
    SupportError,
    adam_init,
    adam_step,
    finite_diff_grad,
    fold_in,
    key_from_seed,
    log_sum_exp,
    softmax,
    split,
)

__all__ = [
    "AdamState",
    "DegenerateWeightsError",
    "DivergedOptimizationError",
    "ConfigurationError",
    "NonFiniteGradientError",
    "ParamVector",
    "RngKey",
    "SupportError",
    "adam_init",
    "adam_step",
    "finite_diff_grad",
    "fold_in",
    "key_from_seed",
    "log_sum_exp",
    "softmax",
    "split",
]
