"""Benchmark probabilistic models ("tasks").

Each task carries its observation and fixed hyperparameters, evaluates the
unnormalized log-joint log p(theta, x_obs) on the constrained parameter space,
and exposes an unconstrained reparameterization (with Jacobian-corrected
density) for the MCMC reference sampler. Tasks are immutable after
construction and all evaluation is pure.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np

from .core import ConfigurationError, RngKey, SupportError, generator, key_from_seed
from .distributions.bases import (
    LOG_2PI,
    half_cauchy_logpdf,
    normal_logpdf,
    uniform_logpdf,
)
from .distributions.families import Support, unbounded

# classic eight-schools data: treatment effects and their standard errors
EIGHT_SCHOOLS_EFFECTS = np.array([28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0])
EIGHT_SCHOOLS_SIGMAS = np.array([15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0])

GARCH_LENGTH = 200
GARCH_SIGMA0_SQ = 0.25
GARCH_TRUE = {"mu": 1.0, "alpha0": 0.5, "alpha1": 0.3, "beta1": 0.45}


class ModelTask:
    """Base class: fixed observation, unnormalized log-joint, support."""

    name: str
    dim: int
    support: Support
    blocks: tuple

    def __init__(self):
        self._compiled = {}

    def log_joint_single(self, theta):
        raise NotImplementedError

    # -- unconstrained reparameterization (for MCMC references) --------------

    def to_constrained(self, u):
        return u

    def log_joint_unconstrained(self, u):
        return self.log_joint_single(u)

    def observation(self) -> dict:
        return {}

    def hyperparams(self) -> dict:
        return {}

    def export(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "blocks": [list(b) for b in self.blocks],
            "support": {
                "lower": [float(x) for x in self.support.lower],
                "upper": [float(x) for x in self.support.upper],
            },
            "observation": {k: np.asarray(v).tolist() for k, v in self.observation().items()},
            "hyperparams": self.hyperparams(),
        }

    def _get(self, tag, builder):
        if tag not in self._compiled:
            self._compiled[tag] = builder()
        return self._compiled[tag]


class ToyNormalTask(ModelTask):
    """theta ~ N(0, 4 I_d), x ~ N(theta, I_d), observed x = 1_d.

    Conjugate: posterior is N(4/5 x, 4/5 I_d).
    """

    def __init__(self, dim: int = 1):
        super().__init__()
        if dim < 1:
            raise ConfigurationError("toy-normal needs d >= 1")
        self.name = "toy-normal"
        self.dim = dim
        self.support = unbounded(dim)
        self.blocks = (("theta", dim),)
        self.x_obs = np.ones(dim)

    def log_joint_single(self, theta):
        lp = jnp.sum(normal_logpdf(theta, 0.0, 2.0))
        lp += jnp.sum(normal_logpdf(jnp.asarray(self.x_obs), theta, 1.0))
        return lp

    @property
    def posterior_mean(self):
        return 0.8 * self.x_obs

    @property
    def posterior_cov(self):
        return 0.8 * np.eye(self.dim)

    def observation(self):
        return {"x_obs": self.x_obs}

    def hyperparams(self):
        return {"prior_variance": 4.0, "likelihood_variance": 1.0}


class LinearRegressionTask(ModelTask):
    """beta_i, mu ~ N(0, 1); y ~ N(X beta + mu, 1); X regenerated per key."""

    def __init__(self, p: int = 50, n: int = 200, key: RngKey | None = None):
        super().__init__()
        if p < 1 or n < 0:
            raise ConfigurationError("linear-regression needs p >= 1, n >= 0")
        self.name = "linear-regression"
        self.dim = p + 1
        self.p = p
        self.n = n
        self.support = unbounded(self.dim)
        self.blocks = (("beta", p), ("bias", 1))
        gen = generator(key if key is not None else key_from_seed(0))
        self.X = gen.standard_normal((n, p))
        self.true_theta = gen.standard_normal(p + 1)
        mean = self.X @ self.true_theta[:p] + self.true_theta[p]
        self.y = mean + gen.standard_normal(n)

    def log_joint_single(self, theta):
        beta, mu = theta[: self.p], theta[self.p]
        lp = jnp.sum(normal_logpdf(theta, 0.0, 1.0))
        mean = jnp.asarray(self.X) @ beta + mu
        lp += jnp.sum(normal_logpdf(jnp.asarray(self.y), mean, 1.0))
        return lp

    def _design(self):
        return np.concatenate([self.X, np.ones((self.n, 1))], axis=1)

    @property
    def posterior_cov(self):
        A = self._design()
        return np.linalg.inv(A.T @ A + np.eye(self.dim))

    @property
    def posterior_mean(self):
        A = self._design()
        return self.posterior_cov @ (A.T @ self.y)

    def observation(self):
        return {"X": self.X, "y": self.y}

    def hyperparams(self):
        return {"p": self.p, "n": self.n}


class EightSchoolsTask(ModelTask):
    """Hierarchical treatment-effect model on the classic dataset.

    mu ~ N(0, 5^2), tau ~ HalfCauchy(5), m_i ~ N(mu, tau^2),
    x_i ~ N(m_i, sigma_i^2). theta = (mu, tau, m).
    """

    def __init__(self):
        super().__init__()
        self.name = "eight-schools"
        self.dim = 10
        self.support = Support(
            (-np.inf, 0.0) + (-np.inf,) * 8, (np.inf,) * 10
        )
        self.blocks = (("mu", 1), ("tau", 1), ("effects", 8))
        self.effects = EIGHT_SCHOOLS_EFFECTS.copy()
        self.sigmas = EIGHT_SCHOOLS_SIGMAS.copy()

    def log_joint_single(self, theta):
        mu, tau, m = theta[0], theta[1], theta[2:]
        tau_s = jnp.where(tau > 0, tau, 1.0)
        lp = normal_logpdf(mu, 0.0, 5.0)
        lp += half_cauchy_logpdf(tau, 5.0)
        lp += jnp.sum(normal_logpdf(m, mu, tau_s))
        lp += jnp.sum(normal_logpdf(jnp.asarray(self.effects), m, jnp.asarray(self.sigmas)))
        return jnp.where(tau > 0, lp, -jnp.inf)

    # non-centered unconstrained parameterization: u = (mu, log tau, m_tilde)
    def to_constrained(self, u):
        mu, log_tau, m_tilde = u[0], u[1], u[2:]
        tau = jnp.exp(log_tau)
        return jnp.concatenate([jnp.array([mu, tau]), mu + tau * m_tilde])

    def log_joint_unconstrained(self, u):
        mu, log_tau, m_tilde = u[0], u[1], u[2:]
        tau = jnp.exp(log_tau)
        lp = normal_logpdf(mu, 0.0, 5.0)
        lp += half_cauchy_logpdf(tau, 5.0) + log_tau
        lp += jnp.sum(normal_logpdf(m_tilde, 0.0, 1.0))
        m = mu + tau * m_tilde
        lp += jnp.sum(normal_logpdf(jnp.asarray(self.effects), m, jnp.asarray(self.sigmas)))
        return lp

    def observation(self):
        return {"effects": self.effects, "sigmas": self.sigmas}

    def hyperparams(self):
        return {"mu_scale": 5.0, "tau_scale": 5.0}


def _slcp_cov_terms(theta):
    s1 = theta[2] ** 2
    s2 = theta[3] ** 2
    rho = jnp.tanh(theta[4])
    return s1, s2, rho


def _mvn2_logpdf(x, mean, s1, s2, rho):
    """Bivariate normal log-density with std devs (s1, s2) and correlation rho."""
    z1 = (x[0] - mean[0]) / s1
    z2 = (x[1] - mean[1]) / s2
    om = 1.0 - rho * rho
    quad = (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / om
    return -LOG_2PI - jnp.log(s1 * s2) - 0.5 * jnp.log(om) - 0.5 * quad


class SlcpTask(ModelTask):
    """Five parameters feed a bivariate Gaussian through squaring and tanh;
    the squaring makes the posterior four-way symmetric in (theta3, theta4)."""

    N_OBS = 4

    def __init__(self, key: RngKey | None = None):
        super().__init__()
        self.name = "slcp"
        self.dim = 5
        self.support = Support((-3.0,) * 5, (3.0,) * 5)
        self.blocks = (("theta", 5),)
        gen = generator(key if key is not None else key_from_seed(0))
        # generating truth is redrawn while either noise-scale parameter is
        # near zero: such observations make the likelihood needle-sharp and no
        # prior-proposal importance-resampling reference is feasible
        self.true_theta = gen.uniform(-3.0, 3.0, size=5)
        while min(abs(self.true_theta[2]), abs(self.true_theta[3])) < 0.5:
            self.true_theta = gen.uniform(-3.0, 3.0, size=5)
        s1, s2, rho = (
            self.true_theta[2] ** 2,
            self.true_theta[3] ** 2,
            np.tanh(self.true_theta[4]),
        )
        cov = np.array(
            [[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]]
        )
        chol = np.linalg.cholesky(cov)
        z = gen.standard_normal((self.N_OBS, 2))
        self.x_obs = self.true_theta[:2] + z @ chol.T

    def log_joint_single(self, theta):
        inside = jnp.all((theta > -3.0) & (theta < 3.0))
        s1, s2, rho = _slcp_cov_terms(theta)
        s1 = jnp.where(s1 > 0, s1, 1.0)
        s2 = jnp.where(s2 > 0, s2, 1.0)
        lp = 5.0 * uniform_logpdf(0.0, -3.0, 3.0)
        for j in range(self.N_OBS):
            lp += _mvn2_logpdf(jnp.asarray(self.x_obs[j]), theta[:2], s1, s2, rho)
        return jnp.where(inside, lp, -jnp.inf)

    def log_likelihood_batch(self, thetas):
        """Vectorized likelihood used by the SIR reference."""
        fn = self._get(
            "loglik",
            lambda: jax.jit(
                jax.vmap(
                    lambda t: self.log_joint_single(t) - 5.0 * uniform_logpdf(0.0, -3.0, 3.0)
                )
            ),
        )
        return np.asarray(fn(jnp.asarray(thetas)))

    def prior_sample(self, gen: np.random.Generator, n: int) -> np.ndarray:
        return gen.uniform(-3.0, 3.0, size=(n, self.dim))

    # logit-box transform per coordinate
    def to_constrained(self, u):
        return -3.0 + 6.0 * jax.nn.sigmoid(u)

    def log_joint_unconstrained(self, u):
        theta = self.to_constrained(u)
        s = jax.nn.sigmoid(u)
        log_jac = jnp.sum(jnp.log(6.0 * s * (1.0 - s)))
        return self.log_joint_single(theta) + log_jac

    def observation(self):
        return {"x_obs": self.x_obs, "true_theta": self.true_theta}


class GarchTask(ModelTask):
    """GARCH(1,1): x_t ~ N(mu, sigma_t^2) with
    sigma_t^2 = alpha0 + alpha1 (x_{t-1} - mu)^2 + beta1 sigma_{t-1}^2.

    Improper flat priors on mu and alpha0 > 0; alpha1 ~ U(0, 1);
    beta1 ~ U(0, 1 - alpha1). The recursion is seeded with sigma_0^2 = 0.25 and
    x_0 equal to the first observation element.
    """

    def __init__(self, key: RngKey | None = None):
        super().__init__()
        self.name = "garch"
        self.dim = 4
        self.support = Support((-np.inf, 0.0, 0.0, 0.0), (np.inf, np.inf, 1.0, 1.0))
        self.blocks = (("mu", 1), ("alpha0", 1), ("alpha1", 1), ("beta1", 1))
        gen = generator(key if key is not None else key_from_seed(0))
        t = GARCH_TRUE
        x = np.empty(GARCH_LENGTH)
        var = t["alpha0"] + t["beta1"] * GARCH_SIGMA0_SQ  # (x_0 - mu)^2 term is 0
        x[0] = t["mu"] + np.sqrt(var) * gen.standard_normal()
        for i in range(1, GARCH_LENGTH):
            var = (
                t["alpha0"]
                + t["alpha1"] * (x[i - 1] - t["mu"]) ** 2
                + t["beta1"] * var
            )
            x[i] = t["mu"] + np.sqrt(var) * gen.standard_normal()
        self.x_obs = x

    def log_joint_single(self, theta):
        mu, a0, a1, b1 = theta[0], theta[1], theta[2], theta[3]
        inside = (a0 > 0) & (a1 > 0) & (a1 < 1) & (b1 > 0) & (b1 < 1.0 - a1)
        a0_s = jnp.where(a0 > 0, a0, 1.0)
        a1_s = jnp.clip(a1, 0.0, 1.0)
        b1_s = jnp.clip(b1, 0.0, 1.0)
        x = jnp.asarray(self.x_obs)

        prior = -jnp.log(jnp.where(inside, 1.0 - a1_s, 1.0))  # beta1 | alpha1

        def step(var, x_pair):
            x_prev, x_t = x_pair
            var_t = a0_s + a1_s * (x_prev - mu) ** 2 + b1_s * var
            return var_t, normal_logpdf(x_t, mu, jnp.sqrt(var_t))

        x_prev = jnp.concatenate([x[:1], x[:-1]])  # x_0 := first observation
        _, lps = jax.lax.scan(step, GARCH_SIGMA0_SQ, (x_prev, x))
        return jnp.where(inside, prior + jnp.sum(lps), -jnp.inf)

    # unconstrained: (mu, log alpha0, logit alpha1, logit(beta1 / (1 - alpha1)))
    def to_constrained(self, u):
        mu = u[0]
        a0 = jnp.exp(u[1])
        a1 = jax.nn.sigmoid(u[2])
        b1 = (1.0 - a1) * jax.nn.sigmoid(u[3])
        return jnp.stack([mu, a0, a1, b1])

    def log_joint_unconstrained(self, u):
        theta = self.to_constrained(u)
        a1 = theta[2]
        s3 = jax.nn.sigmoid(u[2])
        s4 = jax.nn.sigmoid(u[3])
        log_jac = (
            u[1]
            + jnp.log(s3 * (1.0 - s3))
            + jnp.log((1.0 - a1) * s4 * (1.0 - s4))
        )
        return self.log_joint_single(theta) + log_jac

    def observation(self):
        return {"x_obs": self.x_obs}

    def hyperparams(self):
        return {"sigma0_sq": GARCH_SIGMA0_SQ, "true": dict(GARCH_TRUE)}


# ---------------------------------------------------------------------------
# Checked module-level operations
# ---------------------------------------------------------------------------


def log_joint(task: ModelTask, theta) -> float:
    """Unnormalized posterior log density; -inf outside the support."""
    theta = np.asarray(theta, dtype=np.float64).reshape(task.dim)
    fn = task._get("log_joint", lambda: jax.jit(task.log_joint_single))
    return float(fn(theta))


def log_joint_batch(task: ModelTask, thetas) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, task.dim)
    fn = task._get(
        "log_joint_batch", lambda: jax.jit(jax.vmap(task.log_joint_single))
    )
    return np.asarray(fn(thetas))


def grad_theta_log_joint(task: ModelTask, theta) -> np.ndarray:
    """d log p(theta, x_obs) / d theta at an interior point of the support."""
    theta = np.asarray(theta, dtype=np.float64).reshape(task.dim)
    if not task.support.contains(theta):
        raise SupportError(
            f"theta is outside or on the boundary of the {task.name!r} support; "
            "differentiate in the unconstrained parameterization instead"
        )
    fn = task._get("grad_log_joint", lambda: jax.jit(jax.grad(task.log_joint_single)))
    return np.asarray(fn(theta))


def make_task(name: str, key: RngKey | None = None, **options) -> ModelTask:
    """Instantiate a registered task; data-generating tasks use the key."""
    if name == "toy-normal":
        return ToyNormalTask(dim=int(options.pop("dim", options.pop("d", 1))), **options)
    if name == "linear-regression":
        return LinearRegressionTask(
            p=int(options.pop("p", 50)), n=int(options.pop("n", 200)), key=key, **options
        )
    if name == "eight-schools":
        return EightSchoolsTask(**options)
    if name == "slcp":
        return SlcpTask(key=key, **options)
    if name == "garch":
        return GarchTask(key=key, **options)
    raise ConfigurationError(f"unknown task {name!r}")


#: tasks whose observation is regenerated per run seed
REGENERATED_TASKS = ("linear-regression", "slcp")
