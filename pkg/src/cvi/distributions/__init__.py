"""Distribution zoo: base densities, monotone spline transforms, conditioners,
and composed variational families with sampling / log-density / gradient
support."""

from .bases import (
    folded_student_t_logpdf,
    half_cauchy_logpdf,
    lognormal_logpdf,
    normal_logpdf,
    student_t_logpdf,
    uniform_logpdf,
)
from .spline import RqsTransform, rqs_forward, rqs_inverse
from .conditioners import DenseConditioner, MaskedConditioner
from .families import (
    EightSchoolsFamily,
    FullCovNormal,
    GarchFamily,
    MeanFieldNormal,
    SplineAutoregressiveFlow,
    Support,
    VariationalFamily,
    build_family,
    default_family_for_task,
    grad_params_log_prob,
    log_prob,
    log_prob_batch,
    sample,
    sample_pathwise,
)

__all__ = [
    "DenseConditioner",
    "EightSchoolsFamily",
    "FullCovNormal",
    "GarchFamily",
    "MaskedConditioner",
    "MeanFieldNormal",
    "RqsTransform",
    "SplineAutoregressiveFlow",
    "Support",
    "VariationalFamily",
    "build_family",
    "default_family_for_task",
    "folded_student_t_logpdf",
    "grad_params_log_prob",
    "half_cauchy_logpdf",
    "log_prob",
    "log_prob_batch",
    "lognormal_logpdf",
    "normal_logpdf",
    "rqs_forward",
    "rqs_inverse",
    "sample",
    "sample_pathwise",
    "student_t_logpdf",
    "uniform_logpdf",
]
