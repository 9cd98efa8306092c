"""Loss and gradient estimators for fitting the variational distribution.

Four estimators share one calling convention:

* softcvi     -- soft-label classification over K proposal samples. Samples are
                 drawn from q itself and then treated as constants; ground-truth
                 labels come from softmax of log p(theta_k, x_obs) minus the
                 log negative density, and the classifier logits are
                 log q_phi(theta_k) minus the same (constant) negative term.
* elbo        -- reverse-KL Monte Carlo estimator with reparameterized draws;
                 the gradient is the full pathwise derivative.
* snis-fkl    -- forward-KL estimate with self-normalized importance weights;
                 weights and proposal are held constant under differentiation.
* lv-snis-fkl -- the snis-fkl gradient plus the mean score over the same
                 sample set, which per seed equals softcvi with alpha = 1 and a
                 proposal-power negative.

The negative density and the labels are always evaluated into constants before
loss assembly (stop-gradient convention), so autodiff sees gradients flowing
only through the live log q_phi(theta_k) factors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from .core import (
    ConfigurationError,
    DegenerateWeightsError,
    DivergedOptimizationError,
    ParamVector,
    RngKey,
    softmax,
    to_jax_key,
)
from .distributions.families import VariationalFamily, _check_phi
from .models import ModelTask, log_joint_batch


class DegenerateLabelsError(DegenerateWeightsError):
    """Every classification label underflowed; carries the offending set."""

    def __init__(self, message, theta_set=None):
        super().__init__(message)
        self.theta_set = theta_set


@dataclass(frozen=True)
class NegativeSpec:
    """Negative-distribution choice: pi(theta)^alpha or p(theta, x_obs)^alpha."""

    kind: str = "proposal-power"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("proposal-power", "joint-power"):
            raise ConfigurationError(f"unknown negative kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which estimator to run, with K and the negative choice (softcvi only)."""

    kind: str = "softcvi"
    k: int = 8
    negative: NegativeSpec = field(default_factory=NegativeSpec)

    def __post_init__(self):
        if self.kind not in ("softcvi", "elbo", "snis-fkl", "lv-snis-fkl"):
            raise ConfigurationError(f"unknown estimator {self.kind!r}")
        if self.k < 1:
            raise ConfigurationError("K must be >= 1")
        if self.kind != "elbo" and self.k < 2:
            raise ConfigurationError(f"{self.kind} forms labels/weights and needs K >= 2")


def _batched(task: ModelTask, family: VariationalFamily):
    logq = jax.vmap(family.log_prob_single, in_axes=(None, 0))
    joint = jax.vmap(task.log_joint_single)
    return logq, joint


def _label_diagnostics(y, z):
    y_safe = jnp.clip(y, 1e-300, 1.0)
    return {
        "label_entropy": -jnp.sum(y * jnp.log(y_safe)),
        "max_label": jnp.max(y),
        "label_ess": 1.0 / jnp.sum(y * y),
        "max_abs_log_ratio": jnp.max(jnp.abs(z)),
    }


def build_loss(task: ModelTask, family: VariationalFamily, spec: ObjectiveSpec):
    """(phi_values, jax_key) -> (loss, diagnostics); pure jnp, not jitted.

    For lv-snis-fkl the returned loss is the quantity whose gradient is the
    low-variance estimator; the reported value in the diagnostics is the plain
    snis-fkl loss.
    """
    logq_b, joint_b = _batched(task, family)
    k = spec.k

    if spec.kind == "elbo":

        def loss_fn(phi, key):
            theta = family.sample_path(phi, key, k)
            loss = jnp.mean(logq_b(phi, theta) - joint_b(theta))
            return loss, {"loss": loss}

        return loss_fn

    if spec.kind == "softcvi":
        alpha = spec.negative.alpha
        proposal_power = spec.negative.kind == "proposal-power"
        if proposal_power and alpha == 0.0:
            warnings.warn(
                "flat negative distribution (alpha=0): mass can leak into "
                "regions of negligible posterior density",
                stacklevel=3,
            )

        def loss_fn(phi, key):
            theta = jax.lax.stop_gradient(family.sample_path(phi, key, k))
            logq = logq_b(phi, theta)
            logjoint = joint_b(theta)
            if proposal_power:
                log_neg = alpha * jax.lax.stop_gradient(logq)
                z = logjoint - log_neg
            else:
                # algebraically logjoint - alpha*logjoint; this form keeps the
                # labels exactly uniform at alpha=1
                log_neg = alpha * logjoint
                z = (1.0 - alpha) * logjoint
            y = jax.nn.softmax(z)
            zhat = logq - log_neg
            loss = -jnp.sum(y * jax.nn.log_softmax(zhat))
            diag = _label_diagnostics(y, z)
            diag["loss"] = loss
            return loss, diag

        return loss_fn

    # snis-fkl and lv-snis-fkl share the weighted forward-KL core
    def snis_core(phi, key):
        theta = jax.lax.stop_gradient(family.sample_path(phi, key, k))
        logq = logq_b(phi, theta)
        logjoint = joint_b(theta)
        logw = logjoint - jax.lax.stop_gradient(logq)
        w = jax.lax.stop_gradient(jax.nn.softmax(logw))
        loss = jnp.sum(w * (logjoint - logq))
        diag = _label_diagnostics(w, logw)
        diag["loss"] = loss
        return loss, logq, diag

    if spec.kind == "snis-fkl":

        def loss_fn(phi, key):
            loss, _, diag = snis_core(phi, key)
            return loss, diag

        return loss_fn

    def loss_fn(phi, key):  # lv-snis-fkl
        loss, logq, diag = snis_core(phi, key)
        return loss + jnp.mean(logq), diag

    return loss_fn


def build_value_and_grad(task: ModelTask, family: VariationalFamily, spec: ObjectiveSpec):
    """(phi_values, jax_key) -> (reported_loss, grad, diagnostics); not jitted."""
    loss_fn = build_loss(task, family, spec)
    vg = jax.value_and_grad(loss_fn, has_aux=True)

    def fn(phi, key):
        (_, diag), grad = vg(phi, key)
        return diag["loss"], grad, diag

    return fn


def _compiled_value_and_grad(task, family, spec):
    tag = ("value_and_grad", id(task), spec)

    def builder():
        fn = jax.jit(build_value_and_grad(task, family, spec))
        return (fn, task)  # keep the task alive so id() stays unique

    return family._get(tag, builder)[0]


# ---------------------------------------------------------------------------
# Checked operations
# ---------------------------------------------------------------------------


def _check_finite_z(z, theta_set):
    z = np.asarray(z, dtype=np.float64)
    if np.all(z == -np.inf):
        raise DegenerateLabelsError(
            "all log ratios are -inf; labels are degenerate", theta_set=theta_set
        )
    return z


def compute_labels(task: ModelTask, theta_set, neg: NegativeSpec, log_pi=None) -> np.ndarray:
    """Ground-truth soft labels: softmax of log p(theta_k, x_obs) - log p-(theta_k).

    log_pi supplies log pi(theta_k) values and is required for a proposal-power
    negative with alpha > 0. Invariant to positive rescaling of the joint or
    the negative.
    """
    theta_set = np.asarray(theta_set, dtype=np.float64).reshape(-1, task.dim)
    logjoint = log_joint_batch(task, theta_set)
    if neg.kind == "proposal-power":
        if neg.alpha == 0.0:
            z = logjoint
        else:
            if log_pi is None:
                raise ConfigurationError(
                    "proposal-power negative needs log pi values for the sample set"
                )
            z = logjoint - neg.alpha * np.asarray(log_pi, dtype=np.float64)
    else:
        z = (1.0 - neg.alpha) * logjoint
    return softmax(_check_finite_z(z, theta_set))


def classifier_logits(family: VariationalFamily, phi: ParamVector, theta_set,
                      neg: NegativeSpec, log_pi=None, log_joint_values=None) -> np.ndarray:
    """Classifier logits log q_phi(theta_k) - log p-(theta_k), with the negative
    density treated as a constant (its values are taken as given numbers)."""
    from .distributions.families import log_prob_batch

    theta_set = np.asarray(theta_set, dtype=np.float64).reshape(-1, family.dim)
    logq = log_prob_batch(family, phi, theta_set)
    if neg.kind == "proposal-power":
        if neg.alpha == 0.0:
            return logq
        if log_pi is None:
            raise ConfigurationError(
                "proposal-power negative needs log pi values for the sample set"
            )
        return logq - neg.alpha * np.asarray(log_pi, dtype=np.float64)
    if log_joint_values is None:
        raise ConfigurationError("joint-power negative needs log joint values")
    return logq - neg.alpha * np.asarray(log_joint_values, dtype=np.float64)


def _run(task, family, phi, key, spec):
    values = _check_phi(family, phi)
    fn = _compiled_value_and_grad(task, family, spec)
    loss, grad, diag = fn(values, to_jax_key(key))
    loss = float(loss)
    grad = np.asarray(grad)
    diag = {k: float(v) for k, v in diag.items()}
    if not np.isfinite(loss):
        raise DegenerateLabelsError(f"{spec.kind} loss is non-finite ({loss})")
    if not np.all(np.isfinite(grad)):
        raise DivergedOptimizationError(f"{spec.kind} gradient is non-finite")
    return loss, grad, diag


def softcvi_loss_grad(task: ModelTask, family: VariationalFamily, phi: ParamVector,
                      key: RngKey, spec: ObjectiveSpec):
    """Classification loss, its phi-gradient, and label diagnostics."""
    if spec.kind != "softcvi":
        raise ConfigurationError("spec.kind must be 'softcvi'")
    return _run(task, family, phi, key, spec)


def elbo_loss_grad(task: ModelTask, family: VariationalFamily, phi: ParamVector,
                   key: RngKey, k: int):
    """Negative ELBO estimate and its pathwise gradient."""
    loss, grad, _ = _run(task, family, phi, key, ObjectiveSpec("elbo", k))
    return loss, grad


def snis_fkl_loss_grad(task: ModelTask, family: VariationalFamily, phi: ParamVector,
                       key: RngKey, k: int):
    """Self-normalized forward-KL loss and gradient (weights held constant)."""
    loss, grad, _ = _run(task, family, phi, key, ObjectiveSpec("snis-fkl", k))
    return loss, grad


def lv_snis_fkl_grad(task: ModelTask, family: VariationalFamily, phi: ParamVector,
                     key: RngKey, k: int) -> np.ndarray:
    """snis-fkl gradient plus the mean score over the same sample set."""
    _, grad, _ = _run(task, family, phi, key, ObjectiveSpec("lv-snis-fkl", k))
    return grad


def normalization_term_grad_identity_check(family: VariationalFamily, phi: ParamVector,
                                           theta_set, tol: float = 1e-10) -> bool:
    """Verify grad log sum_k q(theta_k)/p-(theta_k) == mean_k grad log q(theta_k)
    when the negative equals q valuewise with its gradient stopped."""
    values = jnp.asarray(_check_phi(family, phi))
    thetas = jnp.asarray(np.asarray(theta_set, dtype=np.float64).reshape(-1, family.dim))
    logq_b = jax.vmap(family.log_prob_single, in_axes=(None, 0))

    def norm_term(p):
        logq = logq_b(p, thetas)
        return logsumexp(logq - jax.lax.stop_gradient(logq))

    lhs = np.asarray(jax.grad(norm_term)(values))
    scores = jax.vmap(jax.grad(family.log_prob_single, argnums=0), in_axes=(None, 0))(
        values, thetas
    )
    rhs = np.asarray(jnp.mean(scores, axis=0))
    return bool(np.max(np.abs(lhs - rhs)) <= tol * (1.0 + np.max(np.abs(rhs))))


# ---------------------------------------------------------------------------
# Finite-difference targets (the audit's frozen-loss construction)
# ---------------------------------------------------------------------------


def frozen_loss_for_fd(task: ModelTask, family: VariationalFamily, spec: ObjectiveSpec,
                       phi: ParamVector, key: RngKey):
    """The same-key, same-stop-gradient loss as a plain function of phi values.

    Sampled-set estimators freeze the samples, labels/weights and negative
    densities at phi; only the live log q factors vary. The pathwise elbo
    re-runs the full loss under common random numbers.
    """
    from .distributions.families import log_prob_batch, sample

    values = _check_phi(family, phi)
    if spec.kind == "elbo":
        tag = ("fd_loss", id(task), spec)

        def builder():
            loss = build_loss(task, family, spec)
            return (jax.jit(lambda p, kk: loss(p, kk)[0]), task)

        loss_fn = family._get(tag, builder)[0]
        jkey = to_jax_key(key)

        def f(vals):
            return float(loss_fn(jnp.asarray(vals), jkey))

        return f

    theta = sample(family, phi, key, spec.k)
    logq0 = log_prob_batch(family, phi, theta)
    logjoint = log_joint_batch(task, theta)

    if spec.kind == "softcvi":
        alpha = spec.negative.alpha
        if spec.negative.kind == "proposal-power":
            log_neg = alpha * logq0
            z = logjoint - log_neg
        else:
            log_neg = alpha * logjoint
            z = (1.0 - alpha) * logjoint
        y = softmax(_check_finite_z(z, theta))

        def f(vals):
            logq = log_prob_batch(family, phi.with_values(vals), theta)
            zhat = logq - log_neg
            log_yhat = zhat - (np.max(zhat) + np.log(np.sum(np.exp(zhat - np.max(zhat)))))
            return float(-(y @ log_yhat))

        return f

    w = softmax(logjoint - logq0)

    def snis_f(vals):
        logq = log_prob_batch(family, phi.with_values(vals), theta)
        return float(w @ (logjoint - logq))

    if spec.kind == "snis-fkl":
        return snis_f

    def f(vals):  # lv-snis-fkl composite
        logq = log_prob_batch(family, phi.with_values(vals), theta)
        return float(w @ (logjoint - logq) + logq.mean())

    return f


def grads_over_keys(task: ModelTask, family: VariationalFamily, spec: ObjectiveSpec,
                    phi: ParamVector, key_words: np.ndarray) -> np.ndarray:
    """Gradients at fixed phi across many seeds, vmapped: (n, phi_dim)."""
    values = _check_phi(family, phi)
    tag = ("grads_over_keys", id(task), spec)

    def builder():
        vg = jax.value_and_grad(build_loss(task, family, spec), has_aux=True)

        def one(p, kw):
            (_, _), g = vg(p, jax.random.wrap_key_data(kw))
            return g

        return (jax.jit(jax.vmap(one, in_axes=(None, 0))), task)

    fn = family._get(tag, builder)[0]
    out = []
    key_words = np.asarray(key_words, dtype=np.uint32).reshape(-1, 2)
    chunk = 20000
    for i in range(0, key_words.shape[0], chunk):
        out.append(np.asarray(fn(values, key_words[i : i + chunk])))
    return np.concatenate(out, axis=0)
