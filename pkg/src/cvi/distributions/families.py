"""Variational families: composed densities over the task parameter space.

Each family owns a documented flat parameter layout and exposes three
primitives on raw arrays (used inside jit): reparameterized sampling, a single
point log-density, and (derived by autodiff) the parameter gradient of the
log-density. Module-level wrappers provide the checked, numpy-facing API.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from ..core import (
    ConfigurationError,
    NonFiniteGradientError,
    ParamVector,
    RngKey,
    generator,
    to_jax_key,
)
from . import bases
from .conditioners import DenseConditioner, MaskedConditioner
from .spline import n_raw_params, realize_knots, rqs_forward_raw, rqs_inverse_raw

_CLIP = 1e-9  # shrink factor keeping clipped points strictly inside open intervals


@dataclass(frozen=True)
class Support:
    """Per-dimension open intervals; infinities allowed."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ConfigurationError("support bounds must have equal length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigurationError("support requires lower < upper in every dim")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta)
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return np.all((theta > lo) & (theta < hi), axis=-1)


def unbounded(dim: int) -> Support:
    return Support((-np.inf,) * dim, (np.inf,) * dim)


def _make_layout(blocks):
    layout = []
    offset = 0
    for name, length in blocks:
        layout.append((name, offset, length))
        offset += length
    return tuple(layout)


class VariationalFamily:
    """Base class; subclasses fill in layout, init, sampling and density."""

    name: str
    dim: int
    support: Support
    layout: tuple

    def __init__(self):
        self._compiled = {}

    @property
    def phi_dim(self) -> int:
        name, offset, length = self.layout[-1]
        return offset + length

    def init_params(self, key: RngKey) -> ParamVector:
        raise NotImplementedError

    def sample_path(self, phi, key, n: int):
        """(n, dim) reparameterized draws; differentiable in phi."""
        raise NotImplementedError

    def log_prob_single(self, phi, theta):
        """Log density at one point; -inf outside support; differentiable in phi."""
        raise NotImplementedError

    def _block(self, phi, name):
        for bname, offset, length in self.layout:
            if bname == name:
                return phi[offset : offset + length]
        raise KeyError(name)

    def _get(self, tag, builder):
        if tag not in self._compiled:
            self._compiled[tag] = builder()
        return self._compiled[tag]


# ---------------------------------------------------------------------------
# Concrete families
# ---------------------------------------------------------------------------


class MeanFieldNormal(VariationalFamily):
    """Independent normals: blocks are means and log-scales."""

    def __init__(self, dim: int, name: str = "mean-field-normal"):
        super().__init__()
        if dim < 1:
            raise ConfigurationError("mean-field-normal needs dim >= 1")
        self.name = name
        self.dim = dim
        self.support = unbounded(dim)
        self.layout = _make_layout([("mean", dim), ("log_scale", dim)])

    def init_params(self, key: RngKey) -> ParamVector:
        return ParamVector(np.zeros(2 * self.dim), self.layout)

    def sample_path(self, phi, key, n):
        mean = self._block(phi, "mean")
        scale = jnp.exp(self._block(phi, "log_scale"))
        z = jax.random.normal(key, (n, self.dim))
        return mean + scale * z

    def log_prob_single(self, phi, theta):
        mean = self._block(phi, "mean")
        log_scale = self._block(phi, "log_scale")
        return jnp.sum(bases.normal_logpdf(theta, mean, jnp.exp(log_scale)))


class FullCovNormal(VariationalFamily):
    """Multivariate normal with a Cholesky-parameterized covariance."""

    def __init__(self, dim: int):
        super().__init__()
        if dim < 1:
            raise ConfigurationError("full-normal needs dim >= 1")
        self.name = "full-normal"
        self.dim = dim
        self.support = unbounded(dim)
        self.layout = _make_layout(
            [("mean", dim), ("log_diag", dim), ("off_diag", dim * (dim - 1) // 2)]
        )
        self._tril = np.tril_indices(dim, -1)

    def init_params(self, key: RngKey) -> ParamVector:
        return ParamVector(np.zeros(self.phi_dim), self.layout)

    def _chol(self, phi):
        diag = jnp.exp(self._block(phi, "log_diag"))
        L = jnp.zeros((self.dim, self.dim))
        L = L.at[self._tril].set(self._block(phi, "off_diag"))
        return L + jnp.diag(diag)

    def sample_path(self, phi, key, n):
        mean = self._block(phi, "mean")
        L = self._chol(phi)
        z = jax.random.normal(key, (n, self.dim))
        return mean + z @ L.T

    def log_prob_single(self, phi, theta):
        mean = self._block(phi, "mean")
        log_diag = self._block(phi, "log_diag")
        L = self._chol(phi)
        w = jax.scipy.linalg.solve_triangular(L, theta - mean, lower=True)
        return -0.5 * (self.dim * bases.LOG_2PI + w @ w) - jnp.sum(log_diag)


class EightSchoolsFamily(VariationalFamily):
    """Normal for the population mean, folded Student-t for the scale,
    per-coordinate Student-t for the eight effects. theta = (mu, tau, m[8])."""

    N_GROUPS = 8

    def __init__(self):
        super().__init__()
        self.name = "eight-schools-family"
        self.dim = 2 + self.N_GROUPS
        self.support = Support(
            (-np.inf, 0.0) + (-np.inf,) * self.N_GROUPS,
            (np.inf,) * self.dim,
        )
        g = self.N_GROUPS
        self.layout = _make_layout(
            [
                ("mu_loc", 1),
                ("mu_log_scale", 1),
                ("tau_loc", 1),
                ("tau_log_scale", 1),
                ("tau_df_raw", 1),
                ("m_loc", g),
                ("m_log_scale", g),
                ("m_df_raw", g),
            ]
        )

    def init_params(self, key: RngKey) -> ParamVector:
        # broad start: scales near the prior scales, df = 5
        df_raw = float(np.log(np.expm1(4.0)))
        g = self.N_GROUPS
        values = np.concatenate(
            [
                [0.0, np.log(5.0)],
                [0.0, np.log(5.0), df_raw],
                np.zeros(g),
                np.full(g, np.log(10.0)),
                np.full(g, df_raw),
            ]
        )
        return ParamVector(values, self.layout)

    @staticmethod
    def _df(raw):
        return jax.nn.softplus(raw) + 1.0

    def sample_path(self, phi, key, n):
        k_mu, k_tau, k_m = jax.random.split(key, 3)
        mu = self._block(phi, "mu_loc") + jnp.exp(
            self._block(phi, "mu_log_scale")
        ) * jax.random.normal(k_mu, (n, 1))
        tau_noise = bases.student_t_noise(
            k_tau, self._df(self._block(phi, "tau_df_raw")), (n, 1)
        )
        tau = jnp.abs(
            self._block(phi, "tau_loc")
            + jnp.exp(self._block(phi, "tau_log_scale")) * tau_noise
        )
        m_noise = bases.student_t_noise(
            k_m, self._df(self._block(phi, "m_df_raw")), (n, self.N_GROUPS)
        )
        m = self._block(phi, "m_loc") + jnp.exp(self._block(phi, "m_log_scale")) * m_noise
        return jnp.concatenate([mu, tau, m], axis=-1)

    def log_prob_single(self, phi, theta):
        mu, tau, m = theta[0], theta[1], theta[2:]
        lp = bases.normal_logpdf(
            mu, self._block(phi, "mu_loc")[0], jnp.exp(self._block(phi, "mu_log_scale")[0])
        )
        lp += bases.folded_student_t_logpdf(
            tau,
            self._df(self._block(phi, "tau_df_raw")[0]),
            self._block(phi, "tau_loc")[0],
            jnp.exp(self._block(phi, "tau_log_scale")[0]),
        )
        lp += jnp.sum(
            bases.student_t_logpdf(
                m,
                self._df(self._block(phi, "m_df_raw")),
                self._block(phi, "m_loc"),
                jnp.exp(self._block(phi, "m_log_scale")),
            )
        )
        return lp


class GarchFamily(VariationalFamily):
    """theta = (mu, alpha0, alpha1, beta1): normal x lognormal x spline-warped
    uniforms, with beta1's spline conditioned on (log alpha0, alpha1) through a
    dense conditioner and rescaled onto (0, 1 - alpha1)."""

    N_BINS = 8

    def __init__(self):
        super().__init__()
        self.name = "garch-family"
        self.dim = 4
        self.support = Support((-np.inf, 0.0, 0.0, 0.0), (np.inf, np.inf, 1.0, 1.0))
        self.conditioner = DenseConditioner(2, n_raw_params(self.N_BINS))
        self.layout = _make_layout(
            [
                ("mu_loc", 1),
                ("mu_log_scale", 1),
                ("a0_loc", 1),
                ("a0_log_scale", 1),
                ("a1_knots", n_raw_params(self.N_BINS)),
                ("beta1_conditioner", self.conditioner.n_params),
            ]
        )

    def init_params(self, key: RngKey) -> ParamVector:
        values = np.zeros(self.phi_dim)
        start = self.layout[-1][1]
        values[start:] = self.conditioner.init(generator(key))
        return ParamVector(values, self.layout)

    def _a1_knots(self, phi):
        return realize_knots(self._block(phi, "a1_knots"), 0.0, 1.0, self.N_BINS)

    def _b1_knots(self, phi, a0, a1):
        feats = jnp.stack([jnp.log(a0), a1], axis=-1)
        raw = self.conditioner.apply(self._block(phi, "beta1_conditioner"), feats)
        return realize_knots(raw, 0.0, 1.0, self.N_BINS)

    def sample_path(self, phi, key, n):
        k_mu, k_a0, k_a1, k_b1 = jax.random.split(key, 4)
        mu = (
            self._block(phi, "mu_loc")[0]
            + jnp.exp(self._block(phi, "mu_log_scale")[0]) * jax.random.normal(k_mu, (n,))
        )
        a0 = jnp.exp(
            self._block(phi, "a0_loc")[0]
            + jnp.exp(self._block(phi, "a0_log_scale")[0]) * jax.random.normal(k_a0, (n,))
        )
        u1 = bases.open_uniform(k_a1, (n,))
        a1, _ = rqs_forward_raw(u1, *self._a1_knots(phi))

        u2 = bases.open_uniform(k_b1, (n,))

        def warp_one(a0_i, a1_i, u2_i):
            v, _ = rqs_forward_raw(u2_i, *self._b1_knots(phi, a0_i, a1_i))
            return v

        v = jax.vmap(warp_one)(a0, a1, u2)
        beta1 = v * (1.0 - a1)
        return jnp.stack([mu, a0, a1, beta1], axis=-1)

    def log_prob_single(self, phi, theta):
        mu, a0, a1, b1 = theta[0], theta[1], theta[2], theta[3]
        inside = (a0 > 0) & (a1 > 0) & (a1 < 1) & (b1 > 0) & (b1 < 1.0 - a1)
        a0_s = jnp.where(a0 > 0, a0, 1.0)
        a1_s = jnp.clip(a1, _CLIP, 1.0 - _CLIP)
        v = jnp.clip(b1 / (1.0 - a1_s), _CLIP, 1.0 - _CLIP)

        lp = bases.normal_logpdf(
            mu, self._block(phi, "mu_loc")[0], jnp.exp(self._block(phi, "mu_log_scale")[0])
        )
        lp += bases.lognormal_logpdf(
            a0_s, self._block(phi, "a0_loc")[0], jnp.exp(self._block(phi, "a0_log_scale")[0])
        )
        _, ld1 = rqs_inverse_raw(a1_s, *self._a1_knots(phi))
        lp += ld1  # uniform base density on (0, 1) contributes 0
        _, ld2 = rqs_inverse_raw(v, *self._b1_knots(phi, a0_s, a1_s))
        lp += ld2 - jnp.log(1.0 - a1_s)
        return jnp.where(inside, lp, -jnp.inf)


class SplineAutoregressiveFlow(VariationalFamily):
    """Masked autoregressive flow of per-coordinate splines on a box.

    Each layer permutes coordinates, then applies a spline to every coordinate
    whose knots come from a masked conditioner reading the preceding (permuted)
    coordinates. The base density is uniform on the box, so the support is the
    box exactly at every stage.
    """

    def __init__(self, dim: int = 5, n_layers: int = 4, n_bins: int = 8,
                 lo: float = -3.0, hi: float = 3.0):
        super().__init__()
        self.name = "slcp-flow"
        self.dim = dim
        self.n_layers = n_layers
        self.n_bins = n_bins
        self.lo = float(lo)
        self.hi = float(hi)
        self.support = Support((self.lo,) * dim, (self.hi,) * dim)
        self.conditioner = MaskedConditioner(dim, n_raw_params(n_bins))
        # fixed inter-layer permutations from a constant-seeded counter stream
        perm_rng = np.random.Generator(np.random.Philox(key=0x5CA1AB1E))
        self.perms = [perm_rng.permutation(dim) for _ in range(n_layers)]
        self.inv_perms = [np.argsort(p) for p in self.perms]
        self.layout = _make_layout(
            [(f"layer{i}_conditioner", self.conditioner.n_params) for i in range(n_layers)]
        )

    def init_params(self, key: RngKey) -> ParamVector:
        gen = generator(key)
        values = np.concatenate([self.conditioner.init(gen) for _ in range(self.n_layers)])
        return ParamVector(values, self.layout)

    def _layer_knots(self, phi, i, v):
        raw = self.conditioner.apply(self._block(phi, f"layer{i}_conditioner"), v)
        return realize_knots(raw, self.lo, self.hi, self.n_bins)

    def log_prob_single(self, phi, theta):
        inside = jnp.all((theta > self.lo) & (theta < self.hi))
        span = self.hi - self.lo
        eps = span * _CLIP
        v = jnp.clip(theta, self.lo + eps, self.hi - eps)
        total = 0.0
        for i in range(self.n_layers):
            v = v[jnp.asarray(self.perms[i])]
            v, ld = rqs_forward_raw(v, *self._layer_knots(phi, i, v))
            total = total + jnp.sum(ld)
        lp = total - self.dim * jnp.log(span)
        return jnp.where(inside, lp, -jnp.inf)

    def sample_path(self, phi, key, n):
        eps = bases.open_uniform(key, (n, self.dim), self.lo, self.hi)

        def invert_one(b):
            for i in reversed(range(self.n_layers)):
                a = jnp.zeros(self.dim)
                for j in range(self.dim):
                    xk, yk, dk = self._layer_knots(phi, i, a)
                    xj, _ = rqs_inverse_raw(b[j], xk[j], yk[j], dk[j])
                    a = a.at[j].set(xj)
                b = a[jnp.asarray(self.inv_perms[i])]
            return b

        return jax.vmap(invert_one)(eps)


# ---------------------------------------------------------------------------
# Checked module-level operations
# ---------------------------------------------------------------------------


def _check_phi(family: VariationalFamily, phi: ParamVector) -> np.ndarray:
    if phi.layout != family.layout:
        raise ConfigurationError(
            f"parameter layout does not match family {family.name!r}"
        )
    return phi.values


def sample(family: VariationalFamily, phi: ParamVector, key: RngKey, n: int) -> np.ndarray:
    """n draws from the family; deterministic given key; always in support."""
    values = _check_phi(family, phi)
    fn = family._get(
        ("sample", n), lambda: jax.jit(lambda p, k: family.sample_path(p, k, n))
    )
    return np.asarray(fn(values, to_jax_key(key)))


def log_prob(family: VariationalFamily, phi: ParamVector, theta) -> float:
    """Exact log density at one point, including all log-det-Jacobian terms."""
    values = _check_phi(family, phi)
    theta = np.asarray(theta, dtype=np.float64).reshape(family.dim)
    fn = family._get("log_prob", lambda: jax.jit(family.log_prob_single))
    return float(fn(values, theta))


def log_prob_batch(family: VariationalFamily, phi: ParamVector, thetas) -> np.ndarray:
    values = _check_phi(family, phi)
    thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, family.dim)
    fn = family._get(
        "log_prob_batch",
        lambda: jax.jit(jax.vmap(family.log_prob_single, in_axes=(None, 0))),
    )
    return np.asarray(fn(values, thetas))


def grad_params_log_prob(family: VariationalFamily, phi: ParamVector, theta) -> np.ndarray:
    """d log q_phi(theta) / d phi with theta held constant."""
    values = _check_phi(family, phi)
    theta = np.asarray(theta, dtype=np.float64).reshape(family.dim)
    fn = family._get(
        "grad_log_prob", lambda: jax.jit(jax.grad(family.log_prob_single, argnums=0))
    )
    g = np.asarray(fn(values, theta))
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteGradientError(
            f"non-finite log-density gradient in block {phi.block_of_index(bad)!r}"
        )
    return g


def sample_pathwise(family: VariationalFamily, phi: ParamVector, key: RngKey):
    """One reparameterized draw and a vjp handle: cotangent wrt theta -> phi
    gradient through the sampling path (base noise fixed by the key)."""
    values = _check_phi(family, phi)

    def path(p):
        return family.sample_path(p, to_jax_key(key), 1)[0]

    theta, vjp = jax.vjp(path, jnp.asarray(values))

    def pullback(cotangent):
        return np.asarray(vjp(jnp.asarray(cotangent, dtype=jnp.float64))[0])

    return np.asarray(theta), pullback


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def build_family(spec, task=None) -> VariationalFamily:
    """Instantiate a registered family from a declarative spec.

    spec is a name or a dict with a "name" key plus options; when a task is
    given, the family's dimension defaults to the task's and the supports must
    match exactly.
    """
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    try:
        name = spec.pop("name")
    except KeyError:
        raise ConfigurationError("family spec needs a 'name'") from None

    if name == "mean-field-normal":
        dim = spec.pop("dim", task.dim if task is not None else None)
        if dim is None:
            raise ConfigurationError("mean-field-normal needs a dim (or a task)")
        family = MeanFieldNormal(int(dim))
    elif name == "full-normal":
        dim = spec.pop("dim", task.dim if task is not None else None)
        if dim is None:
            raise ConfigurationError("full-normal needs a dim (or a task)")
        family = FullCovNormal(int(dim))
    elif name == "eight-schools-family":
        family = EightSchoolsFamily()
    elif name == "garch-family":
        family = GarchFamily()
    elif name == "slcp-flow":
        family = SplineAutoregressiveFlow(
            n_layers=int(spec.pop("n_layers", 4)), n_bins=int(spec.pop("n_bins", 8))
        )
    else:
        raise ConfigurationError(f"unknown family {name!r}")
    if spec:
        raise ConfigurationError(f"unused family options: {sorted(spec)}")

    if task is not None:
        if family.dim != task.dim:
            raise ConfigurationError(
                f"family dim {family.dim} != task dim {task.dim}"
            )
        if (tuple(family.support.lower), tuple(family.support.upper)) != (
            tuple(task.support.lower),
            tuple(task.support.upper),
        ):
            raise ConfigurationError(
                f"support of family {family.name!r} does not match task {task.name!r}"
            )
    return family


_DEFAULT_FAMILY = {
    "toy-normal": "mean-field-normal",
    "linear-regression": "mean-field-normal",
    "eight-schools": "eight-schools-family",
    "slcp": "slcp-flow",
    "garch": "garch-family",
}


def default_family_for_task(task) -> VariationalFamily:
    try:
        name = _DEFAULT_FAMILY[task.name]
    except KeyError:
        raise ConfigurationError(f"no default family for task {task.name!r}") from None
    return build_family(name, task=task)
