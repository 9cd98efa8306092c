import math

import numpy as np
import pytest

import cvi  # noqa: F401
import jax.numpy as jnp

from cvi.core import (
    ConfigurationError,
    finite_diff_directional,
    key_from_seed,
    fold_in,
    split,
    step_key_words,
)
from cvi.distributions import build_family, log_prob_batch, sample
from cvi.models import ModelTask, make_task
from cvi.objectives import (
    DegenerateLabelsError,
    NegativeSpec,
    ObjectiveSpec,
    build_loss,
    classifier_logits,
    compute_labels,
    elbo_loss_grad,
    frozen_loss_for_fd,
    grads_over_keys,
    lv_snis_fkl_grad,
    normalization_term_grad_identity_check,
    snis_fkl_loss_grad,
    softcvi_loss_grad,
)
from cvi.distributions.families import unbounded

KEY = key_from_seed(99)


class StubTask(ModelTask):
    """1-d task with log p(theta, x) = log(theta); for hand-computable labels."""

    def __init__(self):
        super().__init__()
        self.name = "stub"
        self.dim = 1
        self.support = unbounded(1)
        self.blocks = (("theta", 1),)

    def log_joint_single(self, theta):
        return jnp.log(theta[0])


class ShiftedTask(ModelTask):
    """Wraps a task, multiplying the joint by a positive constant."""

    def __init__(self, base, log_c):
        super().__init__()
        self.base = base
        self.log_c = log_c
        self.name = base.name + "-shifted"
        self.dim = base.dim
        self.support = base.support
        self.blocks = base.blocks

    def log_joint_single(self, theta):
        return self.base.log_joint_single(theta) + self.log_c


def toy_setup(dim=1):
    task = make_task("toy-normal", dim=dim)
    family = build_family({"name": "mean-field-normal", "dim": dim})
    phi = family.init_params(KEY)
    return task, family, phi


def optimum_phi(family, task):
    return (
        family.init_params(KEY)
        .replace_block("mean", task.posterior_mean)
        .replace_block("log_scale", np.full(task.dim, 0.5 * math.log(0.8)))
    )


class TestComputeLabels:
    def test_identical_ratios_give_uniform(self):
        task, family, phi = toy_setup()
        theta = np.full((4, 1), 0.3)
        logq = log_prob_batch(family, phi, theta)
        y = compute_labels(task, theta, NegativeSpec("proposal-power", 1.0), logq)
        np.testing.assert_allclose(y, 0.25, atol=1e-15)

    def test_joint_power_alpha_one_exactly_uniform(self):
        task, family, phi = toy_setup()
        rng = np.random.default_rng(0)
        for k in (2, 3, 8):
            theta = rng.normal(size=(k, 1))
            y = compute_labels(task, theta, NegativeSpec("joint-power", 1.0))
            np.testing.assert_array_equal(y, np.full(k, 1.0 / k))

    def test_hand_softmax_flat_negative(self):
        # joints 2 and 1 with a flat negative -> labels (2/3, 1/3)
        task = StubTask()
        theta = np.array([[2.0], [1.0]])
        y = compute_labels(task, theta, NegativeSpec("proposal-power", 0.0))
        np.testing.assert_allclose(y, [2 / 3, 1 / 3], atol=1e-14)

    def test_scaling_invariance(self):
        task, family, phi = toy_setup()
        rng = np.random.default_rng(1)
        theta = rng.normal(size=(8, 1))
        logq = log_prob_batch(family, phi, theta)
        neg = NegativeSpec("proposal-power", 0.75)
        y = compute_labels(task, theta, neg, logq)
        shifted = ShiftedTask(task, 123.4)
        y2 = compute_labels(shifted, theta, neg, logq)
        np.testing.assert_allclose(y2, y, atol=1e-12)
        # rescaling the negative by a constant likewise changes nothing
        y3 = compute_labels(task, theta, neg, logq + 7.7 / neg.alpha)
        np.testing.assert_allclose(y3, y, atol=1e-12)

    def test_permutation_equivariance(self):
        task, family, phi = toy_setup()
        rng = np.random.default_rng(2)
        theta = rng.normal(size=(6, 1))
        logq = log_prob_batch(family, phi, theta)
        neg = NegativeSpec("proposal-power", 0.75)
        y = compute_labels(task, theta, neg, logq)
        perm = rng.permutation(6)
        y_perm = compute_labels(task, theta[perm], neg, logq[perm])
        np.testing.assert_allclose(y_perm, y[perm], atol=1e-14)

    def test_degenerate_labels_error_carries_set(self):
        task = make_task("slcp", KEY)
        theta = np.full((3, 5), 4.0)  # outside the box: joint is -inf
        with pytest.raises(DegenerateLabelsError) as err:
            compute_labels(task, theta, NegativeSpec("proposal-power", 0.0))
        assert err.value.theta_set.shape == (3, 5)

    def test_missing_log_pi_is_config_error(self):
        task, _, _ = toy_setup()
        with pytest.raises(ConfigurationError):
            compute_labels(task, np.zeros((2, 1)), NegativeSpec("proposal-power", 0.5))


class TestClassifierLogits:
    def test_q_equals_negative_gives_uniform(self):
        _, family, phi = toy_setup()
        theta = np.array([[0.1], [0.9], [-1.2]])
        logq = log_prob_batch(family, phi, theta)
        zhat = classifier_logits(family, phi, theta, NegativeSpec("proposal-power", 1.0), logq)
        np.testing.assert_allclose(zhat, 0.0, atol=1e-15)

    def test_tempered_logits_hand_evaluation(self):
        _, family, phi = toy_setup()
        theta = np.array([[0.5], [1.5]])
        logq = log_prob_batch(family, phi, theta)
        zhat = classifier_logits(family, phi, theta, NegativeSpec("proposal-power", 0.75), logq)
        np.testing.assert_allclose(zhat, 0.25 * logq, atol=1e-13)


class TestSoftCvi:
    @pytest.mark.parametrize("alpha", [0.75, 1.0])
    def test_zero_gradient_at_optimum(self, alpha):
        task, family, _ = toy_setup()
        phi = optimum_phi(family, task)
        spec = ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", alpha))
        for i in range(10):
            _, grad, _ = softcvi_loss_grad(task, family, phi, fold_in(KEY, i), spec)
            assert np.max(np.abs(grad)) < 1e-12

    def test_loss_log2_for_symmetric_pair(self):
        task, family, _ = toy_setup()
        phi = optimum_phi(family, task)
        spec = ObjectiveSpec("softcvi", 2, NegativeSpec("proposal-power", 1.0))
        loss, _, _ = softcvi_loss_grad(task, family, phi, KEY, spec)
        assert loss == pytest.approx(math.log(2.0), abs=1e-10)

    def test_grad_matches_frozen_loss_fd(self):
        task, family, phi = toy_setup(dim=2)
        rng = np.random.default_rng(3)
        phi = phi.with_values(phi.values + 0.3 * rng.normal(size=phi.dim))
        for neg in (NegativeSpec("proposal-power", 0.75), NegativeSpec("joint-power", 0.5)):
            spec = ObjectiveSpec("softcvi", 8, neg)
            _, grad, _ = softcvi_loss_grad(task, family, phi, KEY, spec)
            f = frozen_loss_for_fd(task, family, spec, phi, KEY)
            for _ in range(5):
                v = rng.normal(size=phi.dim)
                v /= np.linalg.norm(v)
                fd = finite_diff_directional(f, phi.values, v)
                assert abs(grad @ v - fd) / max(abs(fd), 1e-6) < 1e-4

    def test_diagnostics_present(self):
        task, family, phi = toy_setup()
        spec = ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 0.75))
        _, _, diag = softcvi_loss_grad(task, family, phi, KEY, spec)
        for name in ("label_entropy", "max_label", "label_ess", "max_abs_log_ratio"):
            assert name in diag

    def test_flat_negative_warns(self):
        task, family, phi = toy_setup()
        spec = ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 0.0))
        with pytest.warns(UserWarning, match="leak"):
            softcvi_loss_grad(task, family, phi, KEY, spec)

    def test_loss_invariant_to_joint_scaling(self):
        task, family, phi = toy_setup()
        spec = ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 0.75))
        loss, grad, _ = softcvi_loss_grad(task, family, phi, KEY, spec)
        shifted = ShiftedTask(task, 55.5)
        loss2, grad2, _ = softcvi_loss_grad(shifted, family, phi, KEY, spec)
        assert loss2 == pytest.approx(loss, abs=1e-12)
        np.testing.assert_allclose(grad2, grad, atol=1e-12)


class TestElbo:
    def test_exact_negative_evidence_at_optimum(self):
        # at q = posterior the per-sample loss is exactly -log p(x_obs)
        task, family, _ = toy_setup()
        phi = optimum_phi(family, task)
        evidence = -0.5 * math.log(2 * math.pi * 5.0) - 0.5 * (1.0**2) / 5.0
        for i in range(5):
            loss, _ = elbo_loss_grad(task, family, phi, fold_in(KEY, i), 4)
            assert loss == pytest.approx(-evidence, abs=1e-10)

    def test_small_scale_loss_minimized_near_map(self):
        task, family, _ = toy_setup()
        mus = np.linspace(-1.0, 2.5, 29)
        losses = []
        for mu in mus:
            phi = (
                family.init_params(KEY)
                .replace_block("mean", [mu])
                .replace_block("log_scale", [math.log(0.01)])
            )
            loss, _ = elbo_loss_grad(task, family, phi, KEY, 64)
            losses.append(loss)
        best = mus[int(np.argmin(losses))]
        assert abs(best - 0.8) < 0.15

    def test_grad_matches_common_random_number_fd(self):
        task, family, phi = toy_setup(dim=3)
        rng = np.random.default_rng(4)
        phi = phi.with_values(phi.values + 0.2 * rng.normal(size=phi.dim))
        _, grad = elbo_loss_grad(task, family, phi, KEY, 8)
        f = frozen_loss_for_fd(task, family, ObjectiveSpec("elbo", 8), phi, KEY)
        for _ in range(5):
            v = rng.normal(size=phi.dim)
            v /= np.linalg.norm(v)
            fd = finite_diff_directional(f, phi.values, v)
            assert abs(grad @ v - fd) / max(abs(fd), 1e-6) < 1e-4


class TestSnisFkl:
    def test_weights_match_softcvi_labels(self):
        task, family, phi = toy_setup()
        theta = sample(family, phi, KEY, 8)
        logq = log_prob_batch(family, phi, theta)
        labels = compute_labels(task, theta, NegativeSpec("proposal-power", 1.0), logq)
        from cvi.models import log_joint_batch

        weights = np.asarray(cvi.core.softmax(log_joint_batch(task, theta) - logq))
        np.testing.assert_array_equal(labels, weights)

    def test_uniform_weights_at_optimum(self):
        task, family, _ = toy_setup()
        phi = optimum_phi(family, task)
        _, _, diag = softcvi_loss_grad(
            task, family, phi, KEY, ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 1.0))
        )
        assert diag["max_label"] == pytest.approx(1 / 8, abs=1e-12)
        assert diag["label_ess"] == pytest.approx(8.0, abs=1e-9)

    def test_grad_matches_frozen_loss_fd(self):
        task, family, phi = toy_setup(dim=2)
        rng = np.random.default_rng(5)
        phi = phi.with_values(phi.values + 0.3 * rng.normal(size=phi.dim))
        _, grad = snis_fkl_loss_grad(task, family, phi, KEY, 8)
        f = frozen_loss_for_fd(task, family, ObjectiveSpec("snis-fkl", 8), phi, KEY)
        for _ in range(5):
            v = rng.normal(size=phi.dim)
            v /= np.linalg.norm(v)
            fd = finite_diff_directional(f, phi.values, v)
            assert abs(grad @ v - fd) / max(abs(fd), 1e-6) < 1e-4

    def test_expectation_matches_softcvi_alpha_one(self):
        # gradients equal in expectation; the per-seed difference is the
        # control variate, so test its mean against its own standard error
        task, family, phi = toy_setup()
        rng = np.random.default_rng(6)
        phi = phi.with_values(phi.values + 0.3 * rng.normal(size=phi.dim))
        words = step_key_words(KEY, 20000)
        g_soft = grads_over_keys(
            task, family, ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 1.0)), phi, words
        )
        g_snis = grads_over_keys(task, family, ObjectiveSpec("snis-fkl", 8), phi, words)
        diff = g_soft - g_snis
        mean = diff.mean(axis=0)
        se = diff.std(axis=0) / math.sqrt(diff.shape[0])
        assert np.all(np.abs(mean) <= 3.0 * se + 1e-12)


class TestLvSnisFkl:
    def test_per_seed_equality_with_softcvi(self):
        task, family, phi = toy_setup(dim=2)
        rng = np.random.default_rng(7)
        spec = ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 1.0))
        for i in range(20):
            p = phi.with_values(phi.values + 0.3 * rng.normal(size=phi.dim))
            k = fold_in(KEY, i)
            _, g_soft, _ = softcvi_loss_grad(task, family, p, k, spec)
            g_lv = lv_snis_fkl_grad(task, family, p, k, 8)
            denom = np.maximum(np.abs(g_soft), 1e-300)
            assert np.max(np.abs(g_lv - g_soft) / denom) < 1e-12

    def test_zero_gradient_at_optimum(self):
        task, family, _ = toy_setup()
        phi = optimum_phi(family, task)
        for i in range(10):
            g = lv_snis_fkl_grad(task, family, phi, fold_in(KEY, i), 8)
            assert np.max(np.abs(g)) < 1e-12

    def test_control_variate_is_mean_zero(self):
        task, family, phi = toy_setup()
        rng = np.random.default_rng(8)
        phi = phi.with_values(phi.values + 0.2 * rng.normal(size=phi.dim))
        words = step_key_words(KEY, 20000)
        g_lv = grads_over_keys(task, family, ObjectiveSpec("lv-snis-fkl", 8), phi, words)
        g_snis = grads_over_keys(task, family, ObjectiveSpec("snis-fkl", 8), phi, words)
        cv = g_lv - g_snis  # (1/K) sum grad log q, the added control variate
        mean = cv.mean(axis=0)
        se = cv.std(axis=0) / math.sqrt(cv.shape[0])
        assert np.all(np.abs(mean) <= 3.0 * se)


class TestNormalizationIdentity:
    def test_single_sample(self):
        _, family, phi = toy_setup()
        assert normalization_term_grad_identity_check(family, phi, np.array([[0.7]]))

    def test_random_mean_field_k8(self):
        _, family, phi = toy_setup(dim=3)
        rng = np.random.default_rng(9)
        phi = phi.with_values(phi.values + rng.normal(size=phi.dim))
        theta = sample(family, phi, KEY, 8)
        assert normalization_term_grad_identity_check(family, phi, theta)

    def test_holds_for_any_theta_provenance(self):
        _, family, phi = toy_setup(dim=2)
        rng = np.random.default_rng(10)
        theta = rng.uniform(-5, 5, size=(8, 2))  # not q samples
        assert normalization_term_grad_identity_check(family, phi, theta)


class TestZeroVarianceContrast:
    def test_softcvi_zero_variance_snis_positive_variance(self):
        task, family, _ = toy_setup()
        phi = optimum_phi(family, task)
        words = step_key_words(KEY, 200)
        g_soft = grads_over_keys(
            task, family, ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 1.0)), phi, words
        )
        g_snis = grads_over_keys(task, family, ObjectiveSpec("snis-fkl", 8), phi, words)
        assert g_soft.std(axis=0).max() < 1e-9
        assert g_snis.std(axis=0).min() > 1e-2


class TestObjectiveSpecValidation:
    def test_k_and_kind_validation(self):
        with pytest.raises(ConfigurationError):
            ObjectiveSpec("softcvi", 1)
        with pytest.raises(ConfigurationError):
            ObjectiveSpec("nonsense", 8)
        with pytest.raises(ConfigurationError):
            NegativeSpec("proposal-power", 1.5)
        ObjectiveSpec("elbo", 1)  # single-sample elbo is fine
