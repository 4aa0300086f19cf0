"""Change-based pixel selection and the rolling multi-frame vector pool.

Only pixels in the top share of inter-frame intensity change contribute velocity
vectors; selected vectors from the last few frames are pooled (keeping their
original pixel coordinates) to feed layer inference and the field regression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .imaging import CloudMask, ThermalFrame


@dataclass(frozen=True)
class ChangeRank:
    """Normalized per-pixel change ``d`` and its accumulated-variance rank ``r``.

    ``d`` sums to one; ``r[i, j]`` is the inclusive cumulative sum of ``d`` sorted
    ascending, mapped back to pixel positions (ties broken in row-major order).
    A pixel with large change therefore carries an ``r`` close to one.
    """

    d: np.ndarray
    r: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class PoolConfig:
    depth: int = 6
    #: Keep depth+1 frames (ages 0..depth) instead of the default `depth` frames.
    include_extra_frame: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise InputError("pool depth must be >= 1")

    @property
    def max_age(self) -> int:
        return self.depth if self.include_extra_frame else self.depth - 1


@dataclass(frozen=True)
class VectorPool:
    """Value-semantics pool of thresholded velocity vectors over recent frames.

    ``xs``/``ys`` are pixel coordinates (col, row), ``us``/``vs`` metric
    velocities, ``ages`` whole frames since the vector was observed and
    ``responsibilities`` the per-layer temperature posteriors at the source
    pixel, shape ``(n, C)``.
    """

    config: PoolConfig
    xs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    ys: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    us: np.ndarray = field(default_factory=lambda: np.empty(0))
    vs: np.ndarray = field(default_factory=lambda: np.empty(0))
    ages: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    responsibilities: np.ndarray = field(default_factory=lambda: np.empty((0, 1)))

    def __len__(self) -> int:
        return self.xs.size

    @property
    def vectors(self) -> np.ndarray:
        """Pooled velocities as an (n, 2) array of (u, v)."""
        return np.stack([self.us, self.vs], axis=1) if len(self) else np.empty((0, 2))

    @property
    def coords(self) -> np.ndarray:
        """Pooled coordinates as an (n, 2) array of (col, row)."""
        return np.stack([self.xs, self.ys], axis=1) if len(self) else np.empty((0, 2))


def change_rank(prev: ThermalFrame, nxt: ThermalFrame) -> ChangeRank:
    """Rank pixels by their share of the total inter-frame intensity change."""
    if prev.shape != nxt.shape:
        raise InputError("frame dimensions must match")
    lo = min(prev.temps.min(), nxt.temps.min())
    hi = max(prev.temps.max(), nxt.temps.max())
    span = hi - lo
    if span <= 0.0:
        span = 1.0
    i1 = (prev.temps - lo) / span
    i2 = (nxt.temps - lo) / span
    diff = np.abs(i1 - i2)
    total = diff.sum()
    degenerate = total <= 0.0
    if degenerate:
        d = np.full(diff.shape, 1.0 / diff.size)
    else:
        d = diff / total
    flat = d.reshape(-1)
    order = np.argsort(flat, kind="stable")  # row-major tie-break
    ranks = np.empty_like(flat)
    ranks[order] = np.cumsum(flat[order])
    return ChangeRank(d=d, r=ranks.reshape(d.shape), degenerate=degenerate)


def threshold_select(rank: ChangeRank, tau: float) -> CloudMask:
    """Selection mask of pixels carrying the top ``1 - tau`` share of change."""
    if not 0.0 < tau < 1.0:
        raise InputError("tau must be in (0, 1)")
    return CloudMask((rank.r >= tau).astype(np.uint8))


def push_frame(
    pool: VectorPool,
    xs: np.ndarray,
    ys: np.ndarray,
    us: np.ndarray,
    vs: np.ndarray,
    responsibilities: np.ndarray,
) -> VectorPool:
    """Append this frame's selected vectors at age 0, age the rest, evict the old.

    Returns a new pool; the input is untouched.
    """
    xs = np.asarray(xs, dtype=int)
    n_new = xs.size
    responsibilities = np.asarray(responsibilities, dtype=float)
    if responsibilities.ndim == 1:
        responsibilities = responsibilities[:, None]
    if n_new == 0:
        responsibilities = np.empty((0, pool.responsibilities.shape[1]))
    if responsibilities.shape[0] != n_new:
        raise InputError("responsibilities must have one row per new vector")
    aged = pool.ages + 1
    keep = aged <= pool.config.max_age
    if len(pool) and responsibilities.shape[1] != pool.responsibilities.shape[1]:
        raise InputError("layer count changed between pushes")
    return VectorPool(
        config=pool.config,
        xs=np.concatenate([np.asarray(xs, dtype=int), pool.xs[keep]]),
        ys=np.concatenate([np.asarray(ys, dtype=int), pool.ys[keep]]),
        us=np.concatenate([np.asarray(us, dtype=float), pool.us[keep]]),
        vs=np.concatenate([np.asarray(vs, dtype=float), pool.vs[keep]]),
        ages=np.concatenate([np.zeros(n_new, dtype=int), aged[keep]]),
        responsibilities=(
            np.concatenate([responsibilities, pool.responsibilities[keep]])
            if len(pool)
            else responsibilities
        ),
    )
