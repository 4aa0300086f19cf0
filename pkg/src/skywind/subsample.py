"""Importance subsampling of pooled vectors and per-layer posterior weights.

Each layer draws an equal quota from the pool with probability proportional to
its Gaussian likelihood, by inverting the weight CDF at uniform draws (nearest
CDF value wins; duplicates are allowed). The union of the per-layer draws plus
the per-vector layer posteriors forms the regression dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InputError
from .layers import LayerModel
from .motionpool import VectorPool

DEFAULT_SAMPLE_COUNT = 200


@dataclass(frozen=True)
class SampleSet:
    """Sampled regression dataset.

    ``coords`` is ``(n, 2)`` (col, row); ``velocities`` ``(n, 2)`` m/s;
    ``posteriors`` ``(n, C)`` with rows summing to one; ``source_indices`` point
    back into the pool.
    """

    coords: np.ndarray
    velocities: np.ndarray
    posteriors: np.ndarray
    source_indices: np.ndarray
    uniform_weight_layers: tuple[int, ...] = ()
    uniform_posterior_rows: int = 0


def importance_weights(pool: VectorPool, layer: int, model: LayerModel) -> tuple[np.ndarray, bool]:
    """Normalized likelihood of each pooled vector under one layer's Gaussian.

    Returns ``(weights, degenerate)``; all-zero likelihoods fall back to uniform
    weights with the degenerate flag set.
    """
    ll = model.log_likelihood(pool.vectors)[:, layer]
    w = np.exp(ll - ll.max())
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        return np.full(len(pool), 1.0 / len(pool)), True
    return w / total, False


def sample_layer(weights: np.ndarray, quota: int, seed: int) -> np.ndarray:
    """Draw ``quota`` pool indices by inverting the weight CDF at uniform draws.

    Each draw selects the first index whose cumulative weight reaches it, so
    index i is included with probability exactly ``weights[i]`` and duplicates
    are permitted.
    """
    if quota < 1:
        raise InputError("quota must be >= 1")
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, quota)
    return np.minimum(np.searchsorted(cdf, z, side="left"), len(cdf) - 1)


def posteriors(vectors: np.ndarray, model: LayerModel) -> tuple[np.ndarray, int]:
    """Uniform-prior layer posteriors for each vector; rows sum to one.

    Rows where every layer's likelihood underflows are set uniform and counted.
    """
    ll = model.log_likelihood(vectors)
    norm = logsumexp(ll, axis=1)
    bad = ~np.isfinite(norm)
    z = np.exp(ll - np.where(bad, 0.0, norm)[:, None])
    if bad.any():
        z[bad] = 1.0 / ll.shape[1]
    return z, int(bad.sum())


def build_sample_set(
    pool: VectorPool,
    model: LayerModel,
    n_samples: int = DEFAULT_SAMPLE_COUNT,
    seed: int = 0,
) -> SampleSet:
    """Build the regression dataset: per-layer quota draws plus posteriors.

    When ``n_samples`` is not divisible by the layer count the remainder goes to
    layer 0 (the upper layer once the model is ordered). Per-layer draws use
    decorrelated seeds derived from ``seed``.
    """
    if n_samples < model.n_layers:
        raise InputError("n_samples must be at least the layer count")
    quota = n_samples // model.n_layers
    remainder = n_samples - quota * model.n_layers
    picks: list[np.ndarray] = []
    uniform_layers: list[int] = []
    for c in range(model.n_layers):
        w, degenerate = importance_weights(pool, c, model)
        if degenerate:
            uniform_layers.append(c)
        picks.append(sample_layer(w, quota + (remainder if c == 0 else 0), seed + c))
    idx = np.concatenate(picks)
    vel = pool.vectors[idx]
    z, n_uniform = posteriors(vel, model)
    return SampleSet(
        coords=pool.coords[idx].astype(float),
        velocities=vel,
        posteriors=z,
        source_indices=idx,
        uniform_weight_layers=tuple(uniform_layers),
        uniform_posterior_rows=n_uniform,
    )
