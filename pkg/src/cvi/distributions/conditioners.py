"""Feed-forward conditioners whose weights live inside the variational
parameter vector.

DenseConditioner maps conditioning inputs to transform parameters through a
small tanh MLP. MaskedConditioner is the autoregressive (MADE-style) variant:
the parameter block for coordinate i depends only on coordinates before i, so
a single pass yields valid autoregressive transform parameters for every
coordinate at once. Final layers are zero-initialized so freshly built flows
are exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np


def _layer_sizes(in_dim: int, out_dim: int, hidden: int, n_hidden: int):
    dims = [in_dim] + [hidden] * n_hidden + [out_dim]
    return list(zip(dims[:-1], dims[1:]))


def _split_layers(flat, sizes):
    params = []
    pos = 0
    for fan_in, fan_out in sizes:
        w = flat[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        params.append((w, b))
    return params


@dataclass(frozen=True)
class DenseConditioner:
    """Plain MLP: conditioning inputs -> transform parameters."""

    in_dim: int
    out_dim: int
    hidden: int = 32
    n_hidden: int = 2

    @property
    def sizes(self):
        return _layer_sizes(self.in_dim, self.out_dim, self.hidden, self.n_hidden)

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.sizes)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        last = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(self.sizes):
            if i == last:
                chunks.append(np.zeros(fan_in * fan_out + fan_out))
            else:
                w = rng.normal(size=(fan_out, fan_in)) / np.sqrt(fan_in)
                chunks.append(np.concatenate([w.ravel(), np.zeros(fan_out)]))
        return np.concatenate(chunks)

    def apply(self, flat, x):
        layers = _split_layers(flat, self.sizes)
        h = jnp.asarray(x)
        for w, b in layers[:-1]:
            h = jnp.tanh(w @ h + b)
        w, b = layers[-1]
        return w @ h + b


def _made_degrees(dim: int, hidden: int, n_hidden: int):
    in_deg = np.arange(1, dim + 1)
    hidden_deg = [1 + (np.arange(hidden) % (dim - 1)) for _ in range(n_hidden)]
    return in_deg, hidden_deg


@dataclass(frozen=True)
class MaskedConditioner:
    """MADE-masked MLP producing params_per_dim outputs for each coordinate.

    Output block i (degree i) only connects to hidden units of degree < i,
    hence only to inputs 1..i-1; block 0's parameters are pure biases.
    """

    dim: int
    params_per_dim: int
    hidden: int = 32
    n_hidden: int = 2
    masks: tuple = field(init=False, repr=False)

    def __post_init__(self):
        in_deg, hidden_deg = _made_degrees(self.dim, self.hidden, self.n_hidden)
        masks = [(hidden_deg[0][:, None] >= in_deg[None, :]).astype(np.float64)]
        for i in range(1, self.n_hidden):
            masks.append(
                (hidden_deg[i][:, None] >= hidden_deg[i - 1][None, :]).astype(np.float64)
            )
        out_deg = np.repeat(np.arange(1, self.dim + 1), self.params_per_dim)
        masks.append(
            (out_deg[:, None] > hidden_deg[-1][None, :]).astype(np.float64)
        )
        object.__setattr__(self, "masks", tuple(masks))

    @property
    def sizes(self):
        return _layer_sizes(
            self.dim, self.dim * self.params_per_dim, self.hidden, self.n_hidden
        )

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.sizes)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        last = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(self.sizes):
            if i == last:
                chunks.append(np.zeros(fan_in * fan_out + fan_out))
            else:
                w = rng.normal(size=(fan_out, fan_in)) / np.sqrt(fan_in)
                chunks.append(np.concatenate([w.ravel(), np.zeros(fan_out)]))
        return np.concatenate(chunks)

    def apply(self, flat, x):
        layers = _split_layers(flat, self.sizes)
        h = jnp.asarray(x)
        for (w, b), mask in zip(layers[:-1], self.masks[:-1]):
            h = jnp.tanh((w * mask) @ h + b)
        w, b = layers[-1]
        out = (w * self.masks[-1]) @ h + b
        return out.reshape(self.dim, self.params_per_dim)
