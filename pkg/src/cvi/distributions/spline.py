"""Monotone rational quadratic splines on a bounded interval.

A spline with B bins maps (lo, hi) onto itself through B+1 knots with strictly
positive bin widths, heights and knot derivatives. Unconstrained parameters are
packed as (widths[B], heights[B], interior derivatives[B-1]); all-zero
parameters realize the identity map exactly, which is how flows are
initialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from ..core import SupportError

MIN_BIN_FRACTION = 1e-3
# softplus(raw + DERIV_SHIFT) == 1 at raw == 0
DERIV_SHIFT = float(np.log(np.e - 1.0))


def n_raw_params(n_bins: int) -> int:
    return 3 * n_bins - 1


def realize_knots(raw, lo: float, hi: float, n_bins: int):
    """Map unconstrained parameters to knot positions and derivatives.

    raw has shape (..., 3B-1); returns (xk, yk, dk) with shapes (..., B+1).
    Boundary derivatives are pinned to 1 so stacked splines stay smooth at the
    interval ends.
    """
    w_raw = raw[..., :n_bins]
    h_raw = raw[..., n_bins : 2 * n_bins]
    d_raw = raw[..., 2 * n_bins :]

    span = hi - lo
    min_frac = MIN_BIN_FRACTION

    def _positions(unnorm):
        probs = jnp.exp(unnorm - jnp.max(unnorm, axis=-1, keepdims=True))
        probs = probs / jnp.sum(probs, axis=-1, keepdims=True)
        sizes = (min_frac + (1.0 - min_frac * n_bins) * probs) * span
        csum = jnp.cumsum(sizes, axis=-1)
        knots = lo + jnp.concatenate([jnp.zeros_like(csum[..., :1]), csum], axis=-1)
        # pin the final knot to hi exactly despite cumsum rounding
        return jnp.concatenate([knots[..., :-1], jnp.full_like(knots[..., :1], hi)], axis=-1)

    xk = _positions(w_raw)
    yk = _positions(h_raw)
    interior = jnp.logaddexp(d_raw + DERIV_SHIFT, 0.0)  # softplus
    ones = jnp.ones_like(interior[..., :1])
    dk = jnp.concatenate([ones, interior, ones], axis=-1)
    return xk, yk, dk


def _bin_index(v, knots, n_bins: int):
    idx = jnp.sum(v[..., None] >= knots, axis=-1) - 1
    return jnp.clip(idx, 0, n_bins - 1)


def _gather(arr, idx):
    return jnp.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]


def _broadcast_knots(v, xk, yk, dk):
    batch = jnp.broadcast_shapes(jnp.shape(v), xk.shape[:-1])
    v = jnp.broadcast_to(v, batch)
    xk = jnp.broadcast_to(xk, batch + xk.shape[-1:])
    yk = jnp.broadcast_to(yk, batch + yk.shape[-1:])
    dk = jnp.broadcast_to(dk, batch + dk.shape[-1:])
    return v, xk, yk, dk


def rqs_forward_raw(x, xk, yk, dk):
    """Forward spline map and elementwise log |dy/dx|.

    x broadcasts against the leading dims of the knot arrays; inputs are
    assumed inside (lo, hi).
    """
    x, xk, yk, dk = _broadcast_knots(x, xk, yk, dk)
    n_bins = xk.shape[-1] - 1
    k = _bin_index(x, xk, n_bins)
    x0 = _gather(xk, k)
    w = _gather(xk, k + 1) - x0
    y0 = _gather(yk, k)
    h = _gather(yk, k + 1) - y0
    d0 = _gather(dk, k)
    d1 = _gather(dk, k + 1)
    s = h / w
    xi = (x - x0) / w
    omx = 1.0 - xi
    denom = s + (d1 + d0 - 2.0 * s) * xi * omx
    y = y0 + h * (s * xi * xi + d0 * xi * omx) / denom
    deriv = s * s * (d1 * xi * xi + 2.0 * s * xi * omx + d0 * omx * omx) / (denom * denom)
    return y, jnp.log(deriv)


def rqs_inverse_raw(y, xk, yk, dk):
    """Inverse spline map and elementwise log |dx/dy| (solves the per-bin
    quadratic)."""
    y, xk, yk, dk = _broadcast_knots(y, xk, yk, dk)
    n_bins = xk.shape[-1] - 1
    k = _bin_index(y, yk, n_bins)
    x0 = _gather(xk, k)
    w = _gather(xk, k + 1) - x0
    y0 = _gather(yk, k)
    h = _gather(yk, k + 1) - y0
    d0 = _gather(dk, k)
    d1 = _gather(dk, k + 1)
    s = h / w
    dy = y - y0
    term = dy * (d1 + d0 - 2.0 * s)
    a = h * (s - d0) + term
    b = h * d0 - term
    c = -s * dy
    # stable root of a xi^2 + b xi + c = 0 with xi in [0, 1]
    xi = 2.0 * c / (-b - jnp.sqrt(b * b - 4.0 * a * c))
    x = x0 + w * xi
    omx = 1.0 - xi
    denom = s + (d1 + d0 - 2.0 * s) * xi * omx
    deriv = s * s * (d1 * xi * xi + 2.0 * s * xi * omx + d0 * omx * omx) / (denom * denom)
    return x, -jnp.log(deriv)


@dataclass(frozen=True)
class RqsTransform:
    """A single monotone spline on (lo, hi) with explicit raw knot parameters."""

    lo: float
    hi: float
    n_bins: int
    raw: np.ndarray

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("interval must satisfy lo < hi")
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.shape != (n_raw_params(self.n_bins),):
            raise ValueError(
                f"expected {n_raw_params(self.n_bins)} raw parameters, got {raw.shape}"
            )
        object.__setattr__(self, "raw", raw)


def _check_inside(t: RqsTransform, v: np.ndarray):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v <= t.lo) or np.any(v >= t.hi):
        raise SupportError(f"input outside the spline interval ({t.lo}, {t.hi})")
    return v


def rqs_forward(t: RqsTransform, x):
    """Forward map and log |dy/dx| for scalar or vector x in (lo, hi)."""
    x = _check_inside(t, x)
    xk, yk, dk = realize_knots(jnp.asarray(t.raw), t.lo, t.hi, t.n_bins)
    y, ld = rqs_forward_raw(jnp.asarray(x), xk, yk, dk)
    return np.asarray(y), np.asarray(ld)


def rqs_inverse(t: RqsTransform, y):
    """Inverse map and log |dx/dy| for scalar or vector y in (lo, hi)."""
    y = _check_inside(t, y)
    xk, yk, dk = realize_knots(jnp.asarray(t.raw), t.lo, t.hi, t.n_bins)
    x, ld = rqs_inverse_raw(jnp.asarray(y), xk, yk, dk)
    return np.asarray(x), np.asarray(ld)
