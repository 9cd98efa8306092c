"""Numerical primitives shared by every module.

Stable log-space reductions, the Adam optimizer, a splittable counter-based
RNG, flat parameter vectors with named block layouts, and the central-difference
gradient oracle used to audit every analytic gradient in the toolkit.

All operations here are pure functions of their inputs; RNG state is passed
explicitly and never mutated in place.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DegenerateWeightsError(ValueError):
    """All log-weights are -inf; no normalization is possible."""


class DivergedOptimizationError(RuntimeError):
    """A non-finite loss or gradient was produced during optimization."""


class ConfigurationError(ValueError):
    """An experiment config referenced an unknown name or an invalid value."""


class SupportError(ValueError):
    """A point lies outside the support required by the operation."""


class NonFiniteGradientError(RuntimeError):
    """An analytic gradient came back non-finite; names the parameter block."""


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

Layout = tuple[tuple[str, int, int], ...]


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector with a named (name, offset, length) layout.

    Blocks must tile [0, len(values)) contiguously without gaps or overlaps,
    and every entry must be finite.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigurationError("parameter values must be a 1-d vector")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(tuple(b) for b in self.layout))
        expect = 0
        names = set()
        for name, offset, length in self.layout:
            if offset != expect or length <= 0:
                raise ConfigurationError(
                    f"layout block {name!r} at offset {offset} breaks contiguity"
                )
            if name in names:
                raise ConfigurationError(f"duplicate layout block {name!r}")
            names.add(name)
            expect = offset + length
        if expect != values.size:
            raise ConfigurationError(
                f"layout covers {expect} entries but values have {values.size}"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ConfigurationError(
                f"non-finite parameter at index {bad} (block {self.block_of_index(bad)!r})"
            )

    @property
    def dim(self) -> int:
        return self.values.size

    def block(self, name: str) -> np.ndarray:
        for bname, offset, length in self.layout:
            if bname == name:
                return self.values[offset : offset + length]
        raise KeyError(name)

    def block_of_index(self, i: int) -> str:
        for bname, offset, length in self.layout:
            if offset <= i < offset + length:
                return bname
        raise IndexError(i)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def replace_block(self, name: str, new: np.ndarray) -> "ParamVector":
        values = self.values.copy()
        for bname, offset, length in self.layout:
            if bname == name:
                new = np.asarray(new, dtype=np.float64).reshape(length)
                values[offset : offset + length] = new
                return self.with_values(values)
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Splittable counter-based RNG
# ---------------------------------------------------------------------------

# Domain tags select disjoint 256-bit Philox counter ranges so that split
# children, fold_in children, per-step key arrays, and host-side generators can
# never alias each other.
_DOMAIN_SPLIT = 0
_DOMAIN_FOLD = 1
_DOMAIN_STEPS = 2
_DOMAIN_DRAWS = 3


@dataclass(frozen=True)
class RngKey:
    """Opaque 128-bit key for the counter-based (Philox) RNG.

    Splitting is deterministic, distinct children give statistically
    independent streams, and the same key always reproduces the same draws.
    """

    words: tuple[int, int, int, int]

    def __post_init__(self):
        words = tuple(int(w) & 0xFFFFFFFF for w in self.words)
        if len(words) != 4:
            raise ConfigurationError("RngKey needs exactly four 32-bit words")
        object.__setattr__(self, "words", words)

    @property
    def state(self) -> int:
        w = self.words
        return w[0] | (w[1] << 32) | (w[2] << 64) | (w[3] << 96)

    def __repr__(self):
        return f"RngKey({self.state:032x})"


def key_from_seed(seed: int) -> RngKey:
    """Expand an integer seed into a full 128-bit key."""
    words = np.random.SeedSequence(int(seed)).generate_state(4, np.uint32)
    return RngKey(tuple(int(w) for w in words))


def _raw_words(key: RngKey, domain: int, offset: int, n_words: int) -> np.ndarray:
    counter = (domain << 192) | (int(offset) << 64)
    bitgen = np.random.Philox(key=key.state, counter=counter)
    gen = np.random.Generator(bitgen)
    return gen.integers(0, 1 << 32, size=n_words, dtype=np.uint32)


def split(key: RngKey, n: int = 2) -> tuple[RngKey, ...]:
    """Derive n independent child keys from a parent key."""
    if n < 1:
        raise ConfigurationError("split needs n >= 1")
    words = _raw_words(key, _DOMAIN_SPLIT, 0, 4 * n).reshape(n, 4)
    return tuple(RngKey(tuple(int(w) for w in row)) for row in words)


def fold_in(key: RngKey, data: int) -> RngKey:
    """Derive a child key indexed by an integer tag (order-free splitting)."""
    words = _raw_words(key, _DOMAIN_FOLD, int(data), 4)
    return RngKey(tuple(int(w) for w in words))


def step_key_words(key: RngKey, n: int, offset: int = 0) -> np.ndarray:
    """(n, 2) uint32 array of per-step sub-keys, for consumption inside scans.

    Row i is the 64-bit key for step offset + i; rows come from a counter range
    disjoint from split/fold_in children. Philox counters advance in whole
    4x64-bit blocks, so the stream is generated from the start and sliced.
    """
    words = _raw_words(key, _DOMAIN_STEPS, 0, 2 * (offset + n)).reshape(-1, 2)
    return words[offset:]


def generator(key: RngKey) -> np.random.Generator:
    """A numpy Generator seeded by this key (host-side sampling, e.g. MCMC)."""
    counter = _DOMAIN_DRAWS << 192
    return np.random.Generator(np.random.Philox(key=key.state, counter=counter))


def to_jax_key(key: RngKey):
    """Fold the 128-bit state into a 64-bit threefry key for jax.random."""
    import jax

    w = key.words
    data = np.array([w[0] ^ w[2], w[1] ^ w[3]], dtype=np.uint32)
    return jax.random.wrap_key_data(data)


# ---------------------------------------------------------------------------
# Log-space reductions
# ---------------------------------------------------------------------------


def _check_log_weights(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty 1-d vector")
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise ValueError("log-weights must lie in [-inf, +inf) and not be NaN")
    if np.all(v == -np.inf):
        raise DegenerateWeightsError("all log-weights are -inf")
    return v


def log_sum_exp(v: Sequence[float]) -> float:
    """log sum exp(v_k), computed exactly as max(v) + log sum exp(v - max)."""
    v = _check_log_weights(v)
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def softmax(z: Sequence[float]) -> np.ndarray:
    """Normalized exponentials of z; invariant to adding a constant to z."""
    z = _check_log_weights(z)
    w = np.exp(z - np.max(z))
    return w / np.sum(w)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus step counter and hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64))
        if self.m.shape != self.v.shape:
            raise ConfigurationError("Adam moments m and v must have equal shape")
        if self.t < 0 or np.any(self.v < 0):
            raise ConfigurationError("Adam state requires t >= 0 and v >= 0")


def adam_init(dim: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(dim), np.zeros(dim), 0, lr, beta1, beta2, eps)


def adam_update(m, v, t, g, values, lr, beta1, beta2, eps):
    """One bias-corrected Adam update on raw arrays (numpy or jax alike).

    t is the number of completed steps before this one.
    """
    t1 = t + 1
    m1 = beta1 * m + (1.0 - beta1) * g
    v1 = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m1 / (1.0 - beta1 ** t1)
    v_hat = v1 / (1.0 - beta2 ** t1)
    new_values = values - lr * m_hat / ((v_hat ** 0.5) + eps)
    return m1, v1, t1, new_values


def adam_step(state: AdamState, phi: ParamVector, g: np.ndarray) -> tuple[AdamState, ParamVector]:
    """Apply one Adam update to phi; deterministic given (state, phi, g)."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != phi.values.shape:
        raise ConfigurationError("gradient shape does not match parameters")
    if not np.all(np.isfinite(g)):
        raise DivergedOptimizationError(f"non-finite gradient at step {state.t + 1}")
    m1, v1, t1, new_values = adam_update(
        state.m, state.v, state.t, g, phi.values,
        state.lr, state.beta1, state.beta2, state.eps,
    )
    new_state = dataclasses.replace(state, m=m1, v=v1, t=t1)
    return new_state, phi.with_values(new_values)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[ParamVector], float], phi: ParamVector,
                     h: float = 1e-5) -> np.ndarray:
    """Central differences (f(phi + h e_i) - f(phi - h e_i)) / 2h per coordinate.

    This is the independent oracle used to audit analytic gradients; it never
    shares code with the autodiff path.
    """
    base = phi.values
    grad = np.empty(base.size)
    for i in range(base.size):
        up = base.copy()
        up[i] += h
        dn = base.copy()
        dn[i] -= h
        f_up = float(f(phi.with_values(up)))
        f_dn = float(f(phi.with_values(dn)))
        if not (math.isfinite(f_up) and math.isfinite(f_dn)):
            raise NonFiniteGradientError(
                f"non-finite evaluation at coordinate {i} "
                f"(block {phi.block_of_index(i)!r})"
            )
        grad[i] = (f_up - f_dn) / (2.0 * h)
    return grad


def finite_diff_directional(f: Callable[[np.ndarray], float], values: np.ndarray,
                            direction: np.ndarray, h: float = 1e-5) -> float:
    """Central difference of f along a direction in flat parameter space."""
    values = np.asarray(values, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    f_up = float(f(values + h * direction))
    f_dn = float(f(values - h * direction))
    if not (math.isfinite(f_up) and math.isfinite(f_dn)):
        raise NonFiniteGradientError("non-finite evaluation in directional difference")
    return (f_up - f_dn) / (2.0 * h)
