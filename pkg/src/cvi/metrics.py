"""Evaluation of a fitted variational distribution against a reference.

Coverage calibration through highest-density regions (density-quantile
thresholds), average reference log-probability (a forward-KL surrogate up to
the reference entropy), standardized posterior-mean accuracy, and the
gradient signal-to-noise diagnostic. All density work happens in log space;
hdr_threshold exposes the density-scale threshold for callers that want it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, ParamVector, RngKey, split
from .distributions.families import VariationalFamily, log_prob_batch, sample
from .objectives import ObjectiveSpec, grads_over_keys
from .core import step_key_words

GAMMA_GRID = np.round(np.linspace(0.05, 0.95, 19), 2)
DEFAULT_N_MC = 10_000
SNR_TINY = 1e-12


@dataclass
class CoverageCurve:
    levels: np.ndarray
    actual: np.ndarray

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.actual = np.asarray(self.actual, dtype=np.float64)
        if self.levels.shape != self.actual.shape:
            raise ConfigurationError("coverage levels/actual shape mismatch")
        if np.any((self.actual < 0) | (self.actual > 1)):
            raise ConfigurationError("actual coverage frequencies must lie in [0, 1]")

    @property
    def mean_signed_miscalibration(self) -> float:
        return float(np.mean(self.actual - self.levels))

    @property
    def mean_abs_miscalibration(self) -> float:
        return float(np.mean(np.abs(self.actual - self.levels)))


@dataclass
class MetricReport:
    coverage: CoverageCurve
    mean_ref_log_prob: float
    posterior_mean_accuracy: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "coverage_levels": self.coverage.levels.tolist(),
            "coverage_actual": self.coverage.actual.tolist(),
            "mean_ref_log_prob": self.mean_ref_log_prob,
            "posterior_mean_accuracy": self.posterior_mean_accuracy,
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------------------
# Highest-density regions and coverage
# ---------------------------------------------------------------------------


def hdr_log_threshold(family: VariationalFamily, phi: ParamVector, gamma: float,
                      n_mc: int = DEFAULT_N_MC, key: RngKey | None = None) -> float:
    """Log-density cut of the gamma highest-density region of q.

    The empirical (1-gamma)-quantile of log q over n_mc fresh draws; a point
    lies inside the region iff its log density reaches the cut.
    """
    if not 0.0 < gamma < 1.0:
        raise ConfigurationError("gamma must lie in (0, 1)")
    if n_mc < 1000:
        raise ConfigurationError("n_mc >= 1000 required for a stable quantile")
    if key is None:
        raise ConfigurationError("hdr threshold needs an explicit key")
    draws = sample(family, phi, key, n_mc)
    logq = log_prob_batch(family, phi, draws)
    return float(np.quantile(logq, 1.0 - gamma))


def hdr_threshold(family: VariationalFamily, phi: ParamVector, gamma: float,
                  n_mc: int = DEFAULT_N_MC, key: RngKey | None = None) -> float:
    """Density-scale version of hdr_log_threshold (goes to 0 as gamma -> 1)."""
    return float(np.exp(hdr_log_threshold(family, phi, gamma, n_mc, key)))


def coverage_curve(family: VariationalFamily, phi: ParamVector, reference,
                   gammas=GAMMA_GRID, n_mc: int = DEFAULT_N_MC,
                   key: RngKey | None = None) -> CoverageCurve:
    """Fraction of reference samples inside the gamma-HDR of q, per gamma.

    One shared set of q draws fixes the density-quantile thresholds for every
    level, which keeps the curve monotone.
    """
    ref_samples = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if ref_samples.size == 0:
        raise ConfigurationError("reference is empty")
    if key is None:
        raise ConfigurationError("coverage_curve needs an explicit key")
    gammas = np.asarray(gammas, dtype=np.float64)
    draws = sample(family, phi, key, n_mc)
    logq_mc = log_prob_batch(family, phi, draws)
    logq_ref = log_prob_batch(family, phi, ref_samples)
    thresholds = np.quantile(logq_mc, 1.0 - gammas)
    actual = np.array([(logq_ref >= t).mean() for t in thresholds])
    return CoverageCurve(gammas, actual)


def mean_reference_log_prob(family: VariationalFamily, phi: ParamVector, reference) -> float:
    """Average log q over the reference samples; -inf if any lies outside q's
    support (flagged by the caller via metric_report, not fatal)."""
    ref_samples = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if ref_samples.size == 0:
        raise ConfigurationError("reference is empty")
    logq = log_prob_batch(family, phi, ref_samples)
    return float(np.mean(logq))


def posterior_mean_accuracy(reference_samples, q_samples) -> float:
    """Negative L2 norm of the standardized posterior-mean difference."""
    ref = np.asarray(reference_samples, dtype=np.float64)
    qs = np.asarray(q_samples, dtype=np.float64)
    if ref.size == 0 or qs.size == 0:
        raise ConfigurationError("need non-empty sample sets")
    std = ref.std(axis=0)
    bad = np.flatnonzero(std == 0)
    if bad.size:
        raise ConfigurationError(f"reference has zero std in dimension {int(bad[0])}")
    diff = (ref.mean(axis=0) - qs.mean(axis=0)) / std
    return float(-np.linalg.norm(diff))


# ---------------------------------------------------------------------------
# Gradient signal-to-noise
# ---------------------------------------------------------------------------


def grad_snr(objective, task, family: VariationalFamily, phi: ParamVector,
             n_seeds: int = 1000, key: RngKey | None = None) -> dict:
    """Per-parameter |mean|, std and their ratio for a stochastic gradient.

    objective is an ObjectiveSpec (evaluated through the estimator machinery)
    or a callable (phi_values, key_words) -> (n, phi_dim) gradient matrix.
    Non-finite gradients are excluded and counted. Entries where both signal
    and noise vanish are flagged degenerate (zero over zero) with snr NaN.
    """
    if n_seeds < 100:
        raise ConfigurationError("n_seeds >= 100 required")
    if key is None:
        raise ConfigurationError("grad_snr needs an explicit key")
    words = step_key_words(key, n_seeds)
    if isinstance(objective, ObjectiveSpec):
        grads = grads_over_keys(task, family, objective, phi, words)
    else:
        grads = np.asarray(objective(phi.values, words))

    finite = np.all(np.isfinite(grads), axis=1)
    n_excluded = int((~finite).sum())
    grads = grads[finite]
    if grads.shape[0] < 2:
        raise ConfigurationError("not enough finite gradients for an SNR estimate")

    signal = np.abs(grads.mean(axis=0))
    noise = grads.std(axis=0, ddof=1)
    degenerate = (signal < SNR_TINY) & (noise < SNR_TINY)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = np.where(degenerate, np.nan, signal / noise)
    valid = ~degenerate
    return {
        "signal": signal,
        "noise": noise,
        "snr": snr,
        "degenerate": degenerate,
        "n_excluded": n_excluded,
        "mean_signal": float(signal.mean()),
        "mean_noise": float(noise.mean()),
        "mean_snr": float(np.mean(snr[valid])) if valid.any() else float("nan"),
    }


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------


def metric_report(family: VariationalFamily, phi: ParamVector, reference,
                  key: RngKey, n_mc: int = DEFAULT_N_MC) -> MetricReport:
    """Coverage, reference log-probability and posterior-mean accuracy."""
    k_cov, k_q = split(key, 2)
    curve = coverage_curve(family, phi, reference, key=k_cov, n_mc=n_mc)
    ref_samples = np.asarray(getattr(reference, "samples", reference))
    logq_ref = log_prob_batch(family, phi, ref_samples)
    n_outside = int(np.sum(~np.isfinite(logq_ref)))
    mrlp = float(np.mean(logq_ref))
    q_samples = sample(family, phi, k_q, min(n_mc, 10_000))
    accuracy = posterior_mean_accuracy(ref_samples, q_samples)
    return MetricReport(
        coverage=curve,
        mean_ref_log_prob=mrlp,
        posterior_mean_accuracy=accuracy,
        diagnostics={
            "calibration_mean_signed": curve.mean_signed_miscalibration,
            "calibration_mean_abs": curve.mean_abs_miscalibration,
            "n_reference_outside_support": n_outside,
            "n_mc": n_mc,
        },
    )
