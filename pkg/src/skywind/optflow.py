"""Weighted Lucas-Kanade flow and the pixel-to-metric velocity transform.

Per-pixel velocities solve the 2x2 weighted normal equations over a square
window, where window pixels are weighted by the layer responsibility (times an
optional Gaussian spatial taper) and a Tikhonov term keeps the system
nonsingular. The metric transform scales pixel velocities by the per-pixel
ground extent, layer height, responsibility and the configured vector scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError
from .imaging import PixelGeometry, ThermalFrame

#: Window area, regularization, kernel amplitude and scale defaults.
DEFAULT_WINDOW_AREA = 16
DEFAULT_REG_TAU = 1e-8
DEFAULT_KERNEL_SIGMA = 1.0
DEFAULT_VECTOR_SCALE = 2.29


@dataclass(frozen=True)
class WlkConfig:
    """Window area (pixels^2, square window of side sqrt(area)) and solver knobs."""

    window_area: int = DEFAULT_WINDOW_AREA
    reg_tau: float = DEFAULT_REG_TAU
    kernel_sigma: float = DEFAULT_KERNEL_SIGMA
    frame_rate: float = 1.0
    vector_scale: float = DEFAULT_VECTOR_SCALE
    spatial_taper: bool = True

    def __post_init__(self):
        side = math.isqrt(self.window_area)
        if side * side != self.window_area or side < 2:
            raise InputError("window_area must be a perfect square >= 4")
        if self.reg_tau < 0.0:
            raise InputError("reg_tau must be non-negative")
        if self.kernel_sigma <= 0.0:
            raise InputError("kernel_sigma must be positive")
        if self.frame_rate <= 0.0:
            raise InputError("frame_rate must be positive")
        if self.vector_scale <= 0.0:
            raise InputError("vector_scale must be positive")

    @property
    def window_side(self) -> int:
        return math.isqrt(self.window_area)


@dataclass(frozen=True)
class FlowField:
    """Per-layer pixel velocities plus the metric fields after the transform.

    ``u_px``/``v_px`` have shape ``(C, M, N)`` in pixels/frame; ``u_m``/``v_m``
    are the cross-layer-summed metric grids in m/s and ``u_m_layers``/``v_m_layers``
    the per-layer metric grids. ``low_confidence`` marks pixels whose window had
    less than 25% valid area.
    """

    u_px: np.ndarray
    v_px: np.ndarray
    low_confidence: np.ndarray
    u_m: np.ndarray | None = None
    v_m: np.ndarray | None = None
    u_m_layers: np.ndarray | None = None
    v_m_layers: np.ndarray | None = None


def _pair_normalize(prev: np.ndarray, nxt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = min(prev.min(), nxt.min())
    hi = max(prev.max(), nxt.max())
    span = hi - lo
    if span <= 0.0:
        return np.zeros_like(prev, dtype=float), np.zeros_like(nxt, dtype=float)
    return (prev - lo) / span, (nxt - lo) / span


def _gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = max(int(math.ceil(4.0 * sigma)), 1)
    n = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-0.5 * (n / sigma) ** 2)
    return g / g.sum()


def _dog_kernel_1d(sigma: float) -> np.ndarray:
    # Normalized so a unit linear ramp responds with exactly 1.
    radius = max(int(math.ceil(4.0 * sigma)), 1)
    n = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-0.5 * (n / sigma) ** 2)
    k = -n * g
    return k / (n * n * g).sum()


def derivatives(
    prev: ThermalFrame, nxt: ThermalFrame, sigma: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spatial and temporal image derivatives for one frame pair.

    Intensities are min-max normalized jointly over the pair. Spatial gradients
    are derivative-of-Gaussian responses of the pair average; the temporal
    derivative is the Gaussian-smoothed difference ``next - prev`` using the same
    sigma, so the Gaussian attenuation cancels in the flow solve.
    """
    if prev.shape != nxt.shape:
        raise InputError("frame dimensions must match")
    if sigma <= 0.0:
        raise InputError("sigma must be positive")
    i1, i2 = _pair_normalize(prev.temps, nxt.temps)
    mid = 0.5 * (i1 + i2)
    dog = _dog_kernel_1d(sigma)
    smooth = _gaussian_kernel_1d(sigma)
    # correlate1d applies the kernel as written; the DoG kernel is normalized for
    # correlation so ramps come out with their true slope.
    ix = ndimage.correlate1d(mid, dog[::-1], axis=1, mode="nearest")
    ix = ndimage.correlate1d(ix, smooth, axis=0, mode="nearest")
    iy = ndimage.correlate1d(mid, dog[::-1], axis=0, mode="nearest")
    iy = ndimage.correlate1d(iy, smooth, axis=1, mode="nearest")
    it = i2 - i1
    it = ndimage.correlate1d(it, smooth, axis=0, mode="nearest")
    it = ndimage.correlate1d(it, smooth, axis=1, mode="nearest")
    return ix, iy, it


def _window_kernel(cfg: WlkConfig) -> np.ndarray:
    side = cfg.window_side
    if not cfg.spatial_taper:
        return np.ones((side, side))
    # Offsets follow the correlate convention: center at index side//2.
    offs = np.arange(side, dtype=float) - side // 2
    gx = np.exp(-0.5 * (offs / (side / 2.0)) ** 2)
    return np.outer(gx, gx)


def wlk(
    ix: np.ndarray,
    iy: np.ndarray,
    it: np.ndarray,
    weights: np.ndarray,
    cfg: WlkConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel weighted Lucas-Kanade solve; returns (u, v, low_confidence).

    For every pixel the 2x2 system ``(A + tau I) [u v]^T = b`` is solved, where A
    and b accumulate taper- and responsibility-weighted products of the image
    derivatives over the window. Windows are clipped at frame edges (clipped
    area contributes zero); pixels with under 25% valid window area are flagged.
    Velocities are pixels/frame, u along columns and v along rows.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.min() < 0.0 or weights.max() > 1.0:
        raise InputError("weights must lie in [0, 1]")
    kernel = _window_kernel(cfg)

    def wsum(img):
        return ndimage.correlate(img, kernel, mode="constant", cval=0.0)

    w = weights
    a11 = wsum(w * ix * ix)
    a12 = wsum(w * ix * iy)
    a22 = wsum(w * iy * iy)
    b1 = -wsum(w * ix * it)
    b2 = -wsum(w * iy * it)

    tau = cfg.reg_tau
    det = (a11 + tau) * (a22 + tau) - a12 * a12
    u = ((a22 + tau) * b1 - a12 * b2) / det
    v = ((a11 + tau) * b2 - a12 * b1) / det

    valid = ndimage.correlate(
        np.ones_like(ix), kernel, mode="constant", cval=0.0
    ) / kernel.sum()
    low_confidence = valid < 0.25
    return u, v, low_confidence


def flow_per_layer(
    prev: ThermalFrame,
    nxt: ThermalFrame,
    responsibilities: np.ndarray,
    cfg: WlkConfig,
) -> FlowField:
    """Run WLK once per layer using the layer responsibilities as weights."""
    ix, iy, it = derivatives(prev, nxt, cfg.kernel_sigma)
    n_layers = responsibilities.shape[-1]
    u = np.empty((n_layers,) + ix.shape)
    v = np.empty_like(u)
    low = np.zeros(ix.shape, dtype=bool)
    for c in range(n_layers):
        u[c], v[c], low = wlk(ix, iy, it, responsibilities[..., c], cfg)
    return FlowField(u_px=u, v_px=v, low_confidence=low)


def to_metric(
    flow: FlowField,
    responsibilities: np.ndarray,
    layer_heights: np.ndarray,
    geom: PixelGeometry,
    cfg: WlkConfig,
) -> FlowField:
    """Transform pixel velocities to m/s.

    The summed grids follow
    ``u_ij = (scale / frame_rate) * dx_ij * sum_c H_c * gamma_ijc * u_ijc`` (and
    the v analogue); the per-layer grids keep each c term separate. Heights must
    be positive, one per tracked layer.
    """
    layer_heights = np.asarray(layer_heights, dtype=float)
    if layer_heights.ndim != 1 or layer_heights.shape[0] != flow.u_px.shape[0]:
        raise InputError("need one height per layer")
    if np.any(~np.isfinite(layer_heights)) or np.any(layer_heights <= 0.0):
        raise InputError("layer heights must be positive and finite")
    factor = cfg.vector_scale / cfg.frame_rate
    gamma = np.moveaxis(responsibilities, -1, 0)
    u_layers = factor * geom.dx[None] * layer_heights[:, None, None] * gamma * flow.u_px
    v_layers = factor * geom.dy[None] * layer_heights[:, None, None] * gamma * flow.v_px
    return FlowField(
        u_px=flow.u_px,
        v_px=flow.v_px,
        low_confidence=flow.low_confidence,
        u_m=u_layers.sum(axis=0),
        v_m=v_layers.sum(axis=0),
        u_m_layers=u_layers,
        v_m_layers=v_layers,
    )
