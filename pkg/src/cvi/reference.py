"""Reference-posterior oracles.

Closed-form posteriors for the conjugate tasks, sampling/importance-resampling
for tasks with a tractable likelihood and cheap prior sampler, and an adaptive
(Haario-style) Gaussian random-walk Metropolis sampler run in each task's
unconstrained parameterization for everything else. References are cached to
disk because they are the most expensive artifact in the metric sweeps.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .core import ConfigurationError, RngKey, fold_in, generator
from .models import ModelTask

DEFAULT_N_REF = 10_000
SIR_DEFAULT_N_PROP = 10_000_000
SIR_CHUNK = 1_000_000
RHAT_LIMIT = 1.05


class ReferenceRejectedError(RuntimeError):
    """The sampler failed its quality gate; carries the diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class ReferencePosterior:
    kind: str  # analytic | sir | mcmc
    samples: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    log_pdf: object | None = None  # callable(theta_batch) -> log densities

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ConfigurationError("reference needs a (N, dim) sample matrix")


# ---------------------------------------------------------------------------
# Closed-form posteriors
# ---------------------------------------------------------------------------


def gaussian_kl(mean0, cov0, mean1, cov1) -> float:
    """KL(N(mean0, cov0) || N(mean1, cov1)), closed form."""
    mean0, mean1 = np.asarray(mean0), np.asarray(mean1)
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    d = mean0.size
    sol = np.linalg.solve(cov1, cov0)
    diff = mean1 - mean0
    quad = diff @ np.linalg.solve(cov1, diff)
    _, ld1 = np.linalg.slogdet(cov1)
    _, ld0 = np.linalg.slogdet(cov0)
    return 0.5 * (np.trace(sol) + quad - d + ld1 - ld0)


def analytic_posterior(task: ModelTask, n_samples: int = DEFAULT_N_REF,
                       key: RngKey | None = None) -> ReferencePosterior:
    """Exact Gaussian posterior for the conjugate tasks, with sampler and
    density handle."""
    if not hasattr(task, "posterior_mean"):
        raise ConfigurationError(
            f"task {task.name!r} has no analytic posterior; use sir or mcmc"
        )
    mean = np.asarray(task.posterior_mean, dtype=np.float64)
    cov = np.asarray(task.posterior_cov, dtype=np.float64)
    chol = np.linalg.cholesky(cov)
    gen = generator(key if key is not None else fold_in(RngKey((0, 0, 0, 0)), 0))
    z = gen.standard_normal((n_samples, mean.size))
    samples = mean + z @ chol.T

    _, logdet = np.linalg.slogdet(cov)
    const = -0.5 * (mean.size * np.log(2 * np.pi) + logdet)

    def log_pdf(thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        w = np.linalg.solve(chol, (thetas - mean).T)
        return const - 0.5 * np.sum(w * w, axis=0)

    return ReferencePosterior(
        kind="analytic",
        samples=samples,
        diagnostics={"n_samples": n_samples},
        mean=mean,
        cov=cov,
        log_pdf=log_pdf,
    )


# ---------------------------------------------------------------------------
# Sampling / importance resampling
# ---------------------------------------------------------------------------


def sir_reference(task: ModelTask, n_prop: int = SIR_DEFAULT_N_PROP,
                  n_ref: int = DEFAULT_N_REF, key: RngKey | None = None,
                  chunk: int = SIR_CHUNK) -> ReferencePosterior:
    """Draw prior samples, weight by likelihood, resample with replacement.

    Proposals are generated chunk-by-chunk from per-chunk keys and regenerated
    in a second pass for gathering, so the full proposal set is never held in
    memory. Effective sample size below 100 is recorded as a warning; below 10
    it is an error.
    """
    if not (hasattr(task, "prior_sample") and hasattr(task, "log_likelihood_batch")):
        raise ConfigurationError(
            f"task {task.name!r} exposes no prior sampler / tractable likelihood"
        )
    if key is None:
        raise ConfigurationError("sir_reference needs an explicit key")
    if n_prop < n_ref:
        raise ConfigurationError("need n_prop >> n_ref")

    n_chunks = (n_prop + chunk - 1) // chunk
    log_w = np.empty(n_prop)
    for c in range(n_chunks):
        lo, hi = c * chunk, min((c + 1) * chunk, n_prop)
        gen = generator(fold_in(key, c))
        theta = task.prior_sample(gen, hi - lo)
        log_w[lo:hi] = task.log_likelihood_batch(theta)

    shift = log_w.max()
    w = np.exp(log_w - shift)
    w_norm = w / w.sum()
    ess = 1.0 / np.sum(w_norm**2)
    diagnostics = {"ess": float(ess), "n_prop": n_prop, "n_ref": n_ref}
    if ess < 10:
        raise ReferenceRejectedError(
            f"SIR effective sample size {ess:.1f} < 10", diagnostics
        )
    if ess < 100:
        diagnostics["low_ess_warning"] = True
        warnings.warn(f"SIR effective sample size is low ({ess:.1f})", stacklevel=2)

    resample_gen = generator(fold_in(key, n_chunks))
    idx = resample_gen.choice(n_prop, size=n_ref, replace=True, p=w_norm)
    idx.sort()

    samples = np.empty((n_ref, task.dim))
    pos = 0
    for c in range(n_chunks):
        lo, hi = c * chunk, min((c + 1) * chunk, n_prop)
        take = idx[(idx >= lo) & (idx < hi)]
        if take.size == 0:
            continue
        gen = generator(fold_in(key, c))
        theta = task.prior_sample(gen, hi - lo)
        samples[pos : pos + take.size] = theta[take - lo]
        pos += take.size
    assert pos == n_ref

    # shuffle away the sortedness so downstream subsetting stays unbiased
    perm = resample_gen.permutation(n_ref)
    return ReferencePosterior(kind="sir", samples=samples[perm], diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis
# ---------------------------------------------------------------------------


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-Rhat per dimension for chains shaped (n_chains, n_steps, dim)."""
    c, n, d = chains.shape
    half = n // 2
    seqs = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    m, n_half = seqs.shape[0], half
    means = seqs.mean(axis=1)
    b = n_half * means.var(axis=0, ddof=1)
    w = seqs.var(axis=1, ddof=1).mean(axis=0)
    var_hat = (n_half - 1) / n_half * w + b / n_half
    return np.sqrt(var_hat / w)


def _autocorr_fft(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f))[:n].real / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Geyer initial-positive-sequence ESS per dimension, pooled over chains."""
    c, n, d = chains.shape
    ess = np.empty(d)
    for j in range(d):
        rho = np.mean([_autocorr_fft(chains[i, :, j]) for i in range(c)], axis=0)
        # sum consecutive pairs until a pair goes non-positive
        tau = 1.0
        t = 1
        while t + 1 < n:
            pair = rho[t] + rho[t + 1]
            if pair <= 0:
                break
            tau += 2.0 * pair
            t += 2
        ess[j] = c * n / tau
    return ess


def adaptive_mh(task: ModelTask, n_chains: int = 8, n_steps: int = 5000,
                key: RngKey | None = None, warmup: int | None = None,
                init_scale: float = 0.1) -> ReferencePosterior:
    """Gaussian random-walk Metropolis in the task's unconstrained space.

    The proposal covariance is adapted toward 2.38^2/d times the pooled sample
    covariance during warmup (then frozen); warmup draws are discarded. The
    reference is rejected if split-Rhat exceeds 1.05 in any dimension.
    """
    if key is None:
        raise ConfigurationError("adaptive_mh needs an explicit key")
    if warmup is None:
        warmup = n_steps
    d = task.dim
    gen = generator(key)

    log_joint_u = jax.jit(jax.vmap(task.log_joint_unconstrained))

    u = init_scale * gen.standard_normal((n_chains, d))
    lp = np.asarray(log_joint_u(jnp.asarray(u)))
    if not np.all(np.isfinite(lp)):
        raise ConfigurationError("log joint is not finite at the MH initialization")

    # pooled Welford accumulators for the proposal covariance
    count = 0
    run_mean = np.zeros(d)
    run_m2 = np.zeros((d, d))

    def welford_update(x):
        nonlocal count, run_mean, run_m2
        for row in x:
            count += 1
            delta = row - run_mean
            run_mean += delta / count
            run_m2 += np.outer(delta, row - run_mean)

    base_scale = 2.38 / np.sqrt(d)
    prop_chol = base_scale * init_scale * np.eye(d)
    retained = np.empty((n_chains, n_steps, d))
    n_accept = 0

    total = warmup + n_steps
    for t in range(total):
        z = gen.standard_normal((n_chains, d))
        proposal = u + z @ prop_chol.T
        lp_prop = np.asarray(log_joint_u(jnp.asarray(proposal)))
        log_alpha = lp_prop - lp
        accept = np.log(gen.uniform(size=n_chains)) < log_alpha
        u = np.where(accept[:, None], proposal, u)
        lp = np.where(accept, lp_prop, lp)

        if t < warmup:
            welford_update(u)
            if t >= 200 and t % 50 == 0:
                cov = run_m2 / max(count - 1, 1)
                cov = base_scale**2 * cov + 1e-10 * np.eye(d)
                prop_chol = np.linalg.cholesky(cov)
        else:
            retained[:, t - warmup] = u
            n_accept += int(accept.sum())

    accept_rate = n_accept / (n_chains * n_steps)
    rhat = split_rhat(retained)
    ess = effective_sample_size(retained)
    diagnostics = {
        "accept_rate": float(accept_rate),
        "split_rhat": rhat.tolist(),
        "ess": ess.tolist(),
        "n_chains": n_chains,
        "n_steps": n_steps,
        "warmup": warmup,
    }
    if np.max(rhat) > RHAT_LIMIT:
        raise ReferenceRejectedError(
            f"split-Rhat {np.max(rhat):.3f} exceeds {RHAT_LIMIT}", diagnostics
        )

    flat_u = retained.reshape(-1, d)
    to_con = jax.jit(jax.vmap(task.to_constrained))
    samples = np.asarray(to_con(jnp.asarray(flat_u)))
    return ReferencePosterior(kind="mcmc", samples=samples, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Dispatch and disk cache
# ---------------------------------------------------------------------------

REFERENCE_KIND = {
    "toy-normal": "analytic",
    "linear-regression": "analytic",
    "slcp": "sir",
    "eight-schools": "mcmc",
    "garch": "mcmc",
}


def build_reference(task: ModelTask, key: RngKey, n_ref: int = DEFAULT_N_REF,
                    **options) -> ReferencePosterior:
    """Build the reference posterior appropriate for a task."""
    kind = REFERENCE_KIND.get(task.name)
    if kind == "analytic":
        return analytic_posterior(task, n_samples=n_ref, key=key)
    if kind == "sir":
        return sir_reference(
            task, n_prop=int(options.get("n_prop", SIR_DEFAULT_N_PROP)),
            n_ref=n_ref, key=key,
        )
    if kind == "mcmc":
        n_chains = int(options.get("n_chains", 8))
        n_steps = int(options.get("n_steps", max(2000, n_ref // n_chains)))
        ref = adaptive_mh(task, n_chains=n_chains, n_steps=n_steps, key=key)
        if ref.samples.shape[0] > n_ref:
            sub = generator(fold_in(key, 1)).choice(
                ref.samples.shape[0], size=n_ref, replace=False
            )
            ref.samples = ref.samples[np.sort(sub)]
        return ref
    raise ConfigurationError(f"no reference recipe for task {task.name!r}")


def cache_dir() -> Path:
    return Path(os.environ.get("CVI_CACHE_DIR", ".cvi_cache"))


def _cache_tag(task: ModelTask, seed: int, n_ref: int, options: dict) -> str:
    payload = json.dumps(
        {"task": task.name, "seed": seed, "n_ref": n_ref, "options": options,
         "observation": {k: np.asarray(v).tolist() for k, v in task.observation().items()}},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def cached_reference(task: ModelTask, key: RngKey, seed: int,
                     n_ref: int = DEFAULT_N_REF, directory: Path | None = None,
                     **options) -> ReferencePosterior:
    """Disk-cached build_reference, keyed by task, seed, size and options.

    Stores a raw little-endian float64 matrix next to a JSON sidecar; writes
    are atomic (temp file + rename).
    """
    directory = Path(directory) if directory is not None else cache_dir()
    directory.mkdir(parents=True, exist_ok=True)
    tag = _cache_tag(task, seed, n_ref, options)
    bin_path = directory / f"{task.name}-{tag}.f64"
    meta_path = directory / f"{task.name}-{tag}.json"

    if bin_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        data = np.fromfile(bin_path, dtype="<f8").reshape(meta["shape"])
        ref = ReferencePosterior(kind=meta["kind"], samples=data,
                                 diagnostics=meta["diagnostics"])
        if meta.get("mean") is not None:
            ref.mean = np.asarray(meta["mean"])
            ref.cov = np.asarray(meta["cov"])
        return ref

    ref = build_reference(task, key, n_ref=n_ref, **options)
    meta = {
        "task": task.name,
        "seed": seed,
        "kind": ref.kind,
        "shape": list(ref.samples.shape),
        "diagnostics": ref.diagnostics,
        "options": options,
        "mean": None if ref.mean is None else ref.mean.tolist(),
        "cov": None if ref.cov is None else ref.cov.tolist(),
    }
    tmp_bin = bin_path.with_suffix(".f64.tmp")
    ref.samples.astype("<f8").tofile(tmp_bin)
    tmp_bin.replace(bin_path)
    tmp_meta = meta_path.with_suffix(".json.tmp")
    tmp_meta.write_text(json.dumps(meta))
    tmp_meta.replace(meta_path)
    return ref
