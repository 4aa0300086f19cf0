"""Thermal frame representation, height mapping, pixel geometry and synthetic scenes.

Coordinate conventions used throughout the package:

* grids are indexed ``[row i, col j]`` with ``M`` rows and ``N`` columns;
* image x runs along columns (rightward), image y along rows (downward);
* frame temperatures are stored in centi-kelvin, matching the camera wire format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

DEFAULT_ROWS = 60
DEFAULT_COLS = 80

#: Moist adiabatic lapse rate, K per meter (mid-latitude default).
DEFAULT_LAPSE_RATE = 0.0065
DEFAULT_HEIGHT_FLOOR = 0.0
DEFAULT_HEIGHT_CEILING = 12_000.0


@dataclass(frozen=True)
class ThermalFrame:
    """One thermal sky image plus the ambient quantities attached to it.

    ``temps`` is an ``M x N`` float array in centi-kelvin. ``sun_elevation`` and
    ``sun_azimuth`` are radians; ``air_temp`` is the ground-level air temperature
    in kelvin.
    """

    temps: np.ndarray
    frame_index: int = 0
    timestamp: float = 0.0
    sun_elevation: float = math.pi / 2
    sun_azimuth: float = 0.0
    air_temp: float = 300.0

    def __post_init__(self):
        temps = np.asarray(self.temps, dtype=float)
        if temps.ndim != 2 or temps.shape[0] < 2 or temps.shape[1] < 2:
            raise InputError(f"frame must be at least 2x2, got shape {temps.shape}")
        if not np.all(np.isfinite(temps)) or np.any(temps <= 0.0):
            raise InputError("frame temperatures must be finite and positive")
        object.__setattr__(self, "temps", temps)

    @property
    def shape(self) -> tuple[int, int]:
        return self.temps.shape

    @property
    def temps_kelvin(self) -> np.ndarray:
        return self.temps / 100.0


@dataclass(frozen=True)
class HeightModel:
    """Linear temperature-to-height inversion through the moist adiabatic lapse rate."""

    lapse_rate: float = DEFAULT_LAPSE_RATE
    height_floor: float = DEFAULT_HEIGHT_FLOOR
    height_ceiling: float = DEFAULT_HEIGHT_CEILING

    def __post_init__(self):
        if self.lapse_rate <= 0.0:
            raise InputError("lapse_rate must be positive")
        if not self.height_floor < self.height_ceiling:
            raise InputError("height_floor must be below height_ceiling")


@dataclass(frozen=True)
class HeightField:
    """Per-pixel cloud height estimates in meters, clamped to the model range."""

    heights: np.ndarray
    floor: float
    ceiling: float


@dataclass(frozen=True)
class CloudMask:
    """Binary cloud membership grid; 1 marks a cloud pixel."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if not np.isin(bits, (0, 1)).all():
            raise InputError("cloud mask values must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def any_cloud(self) -> bool:
        return bool(self.bits.any())


@dataclass(frozen=True)
class PixelGeometry:
    """Ground-plane extent of each pixel at unit height.

    ``dx[i, j]`` / ``dy[i, j]`` are meters per pixel per meter of cloud height along
    image x / y. Multiply by a layer height to get the metric cell size at that layer.
    """

    dx: np.ndarray
    dy: np.ndarray
    diag_fov: float


def height_map(frame: ThermalFrame, model: HeightModel) -> HeightField:
    """Map pixel temperatures to heights via H = (T_air - T_pixel) / lapse_rate.

    Colder pixels map to higher clouds. Values are clamped to the model's
    [floor, ceiling] range, which keeps clear-sky pixels (far colder than any
    tropospheric cloud) at the ceiling instead of blowing up.
    """
    t_pixel = frame.temps_kelvin
    raw = (frame.air_temp - t_pixel) / model.lapse_rate
    clamped = np.clip(raw, model.height_floor, model.height_ceiling)
    return HeightField(clamped, model.height_floor, model.height_ceiling)


def _camera_basis(elevation: float, azimuth: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # World axes: x east, y north, z up. Azimuth measured clockwise from north.
    forward = np.array(
        [
            math.cos(elevation) * math.sin(azimuth),
            math.cos(elevation) * math.cos(azimuth),
            math.sin(elevation),
        ]
    )
    zenith = np.array([0.0, 0.0, 1.0])
    lateral = np.cross(forward, zenith)
    norm = np.linalg.norm(lateral)
    if norm < 1e-9:
        # Camera at zenith: pick the horizontal pair rolled by the azimuth.
        right = np.array([math.cos(azimuth), -math.sin(azimuth), 0.0])
    else:
        right = lateral / norm
    up = np.cross(right, forward)
    return forward, right, up


def pixel_geometry(frame: ThermalFrame, diag_fov: float) -> PixelGeometry:
    """Pinhole + flat-cloud-plane approximation of per-pixel ground extents.

    Rays are cast through every pixel of a pinhole camera with the given diagonal
    field of view, pointed at the frame's sun direction, and intersected with a
    horizontal plane at unit height. ``dx``/``dy`` are the spacings between
    neighboring intersections (central differences in the interior).

    Raises :class:`InputError` for a degenerate FOV or when part of the frame
    looks within 2 degrees of the horizon (the approximation breaks down there;
    supply a precomputed geometry file instead).
    """
    if not 0.0 < diag_fov < math.pi:
        raise InputError(f"diagonal FOV must be in (0, pi), got {diag_fov}")
    m, n = frame.shape
    half_fov = diag_fov / 2.0
    min_ray_elev = frame.sun_elevation - half_fov
    if min_ray_elev < math.radians(2.0):
        raise InputError(
            "sun elevation too low for the flat-plane approximation; "
            "use a precomputed geometry file"
        )

    focal = math.hypot(m, n) / 2.0 / math.tan(half_fov)
    forward, right, up = _camera_basis(frame.sun_elevation, frame.sun_azimuth)

    cols = np.arange(n) - (n - 1) / 2.0
    rows = (m - 1) / 2.0 - np.arange(m)
    px, py = np.meshgrid(cols, rows)
    rays = (
        forward[None, None, :]
        + (px / focal)[..., None] * right[None, None, :]
        + (py / focal)[..., None] * up[None, None, :]
    )
    rz = rays[..., 2]
    if np.any(rz <= 1e-9):
        raise InputError("frame rays do not all intersect the cloud plane")
    # Intersection with the plane z = 1 (unit height).
    ground = rays[..., :2] / rz[..., None]

    dx = np.empty((m, n))
    dy = np.empty((m, n))
    step_x = np.linalg.norm(np.diff(ground, axis=1), axis=-1)
    step_y = np.linalg.norm(np.diff(ground, axis=0), axis=-1)
    dx[:, 1:-1] = 0.5 * (step_x[:, :-1] + step_x[:, 1:])
    dx[:, 0] = step_x[:, 0]
    dx[:, -1] = step_x[:, -1]
    dy[1:-1, :] = 0.5 * (step_y[:-1, :] + step_y[1:, :])
    dy[0, :] = step_y[0, :]
    dy[-1, :] = step_y[-1, :]
    return PixelGeometry(dx=dx, dy=dy, diag_fov=diag_fov)


@dataclass(frozen=True)
class LayerSpec:
    """One synthetic cloud layer: constant pixel velocity, height and temperature.

    ``evolution_rate`` drifts the texture phases (radians/frame RMS), emulating
    cloud deformation on top of advection; zero keeps translation exact.
    """

    velocity_px: tuple[float, float]  # (u, v) pixels/frame along (col, row)
    height_m: float
    coverage: float = 1.0  # fraction of the frame this layer's blobs cover
    temp_amplitude_k: float = 2.0  # texture modulation around the layer temperature
    wavelength_px: tuple[float, float] = (20.0, 40.0)  # band limits of the texture
    n_modes: int = 24
    texture_seed: int = 0
    evolution_rate: float = 0.0
    #: Optional static frame window (row0, row1, col0, col1), half-open; the
    #: layer exists only inside it. Static boundaries cancel in frame
    #: differencing, so they add no spurious change mass.
    region: tuple[float, float, float, float] | None = None
    #: Cosine-taper width (pixels) blending the layer into the background at
    #: region edges; removes the static temperature cliff whose gradient would
    #: otherwise bias flow windows near the edge.
    edge_taper_px: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic multi-layer scene description for pipeline and solver tests.

    ``psf_sigma_px`` applies a Gaussian sensor blur to the composite image
    (blur commutes with translation, so pure-translation scenes stay exact);
    ``noise_k`` adds per-pixel Gaussian sensor noise in kelvin. Both default
    off so oracle tests see bit-exact advection.
    """

    layers: tuple[LayerSpec, ...]
    n_frames: int = 21
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS
    air_temp: float = 300.0
    clear_sky_temp: float = 210.0
    frame_period_s: float = 1.0
    lapse_rate: float = DEFAULT_LAPSE_RATE
    psf_sigma_px: float = 0.0
    noise_k: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if len(self.layers) > 2:
            raise InputError("scenes support at most two layers")
        if self.n_frames < 1:
            raise InputError("n_frames must be >= 1")
        if self.psf_sigma_px < 0.0 or self.noise_k < 0.0:
            raise InputError("psf_sigma_px and noise_k must be non-negative")


@dataclass(frozen=True)
class SceneTruth:
    """Ground truth attached to a generated scene, one entry per layer.

    Layers are listed in scene order; ``heights_m[c]`` and
    ``velocities_px[c]`` describe layer c. ``overlapping_temps`` flags layer
    temperature ranges close enough to be statistically indistinguishable.
    """

    velocities_px: tuple[tuple[float, float], ...]
    heights_m: tuple[float, ...]
    layer_temps_k: tuple[float, ...]
    overlapping_temps: bool


class _BandTexture:
    """Band-limited random cosine field, exactly evaluable at shifted coordinates."""

    def __init__(self, spec: LayerSpec):
        rng = np.random.default_rng(spec.texture_seed)
        lo, hi = spec.wavelength_px
        wavelengths = rng.uniform(lo, hi, spec.n_modes)
        angles = rng.uniform(0.0, 2.0 * math.pi, spec.n_modes)
        freq = 2.0 * math.pi / wavelengths
        self.kx = freq * np.cos(angles)
        self.ky = freq * np.sin(angles)
        self.phase = rng.uniform(0.0, 2.0 * math.pi, spec.n_modes)
        self.amp = rng.uniform(0.5, 1.0, spec.n_modes)
        self.drift = spec.evolution_rate * rng.standard_normal(spec.n_modes)

    def __call__(self, x: np.ndarray, y: np.ndarray, frame: int = 0) -> np.ndarray:
        phase = self.phase + frame * self.drift
        args = (
            self.kx[:, None, None] * x[None, ...]
            + self.ky[:, None, None] * y[None, ...]
            + phase[:, None, None]
        )
        out = np.tensordot(self.amp, np.cos(args), axes=(0, 0))
        return out / np.sqrt((self.amp**2).sum() / 2.0)


def synth_scene(
    spec: SceneSpec,
) -> tuple[list[ThermalFrame], list[CloudMask], SceneTruth]:
    """Generate an advected multi-layer scene with exact per-layer ground truth.

    Each layer is a band-limited texture translated by its constant pixel
    velocity; evaluation is analytic, so sub-pixel advection is exact. Lower
    (warmer) layers occlude higher ones. Layer temperature follows the lapse
    model, T_layer = air_temp - lapse_rate * height.
    """
    m, n = spec.rows, spec.cols
    x = np.arange(n, dtype=float)
    y = np.arange(m, dtype=float)
    xg, yg = np.meshgrid(x, y)

    layer_temps = tuple(
        spec.air_temp - spec.lapse_rate * layer.height_m for layer in spec.layers
    )
    overlapping = False
    for a in range(len(spec.layers)):
        for b in range(a + 1, len(spec.layers)):
            gap = abs(layer_temps[a] - layer_temps[b])
            if gap < spec.layers[a].temp_amplitude_k + spec.layers[b].temp_amplitude_k:
                overlapping = True

    textures = [_BandTexture(layer) for layer in spec.layers]
    # Coverage thresholds and modulation scales are frozen from frame 0
    # statistics so blobs translate rather than pulse.
    thresholds = []
    mod_bases = []
    mod_scales = []
    for layer, tex in zip(spec.layers, textures):
        g0 = tex(xg, yg)
        if layer.coverage >= 1.0:
            thr = -np.inf  # full deck: every pixel stays inside as it advects
            base = float(g0.min())
        else:
            thr = float(np.quantile(g0, 1.0 - layer.coverage))
            base = thr
        thresholds.append(thr)
        mod_bases.append(base)
        mod_scales.append(max(float(g0.max()) - base, 1e-12))

    # Render order: highest (coldest) first so lower layers overwrite = occlude.
    order = sorted(range(len(spec.layers)), key=lambda c: -spec.layers[c].height_m)

    rng = np.random.default_rng(spec.noise_seed)
    envelopes = []
    for layer in spec.layers:
        if layer.region is None:
            envelopes.append((np.ones((m, n), dtype=bool), np.ones((m, n))))
            continue
        r0, r1, c0, c1 = layer.region
        box = (yg >= r0) & (yg < r1) & (xg >= c0) & (xg < c1)
        if layer.edge_taper_px > 0.0:
            w = layer.edge_taper_px
            ramp_r = np.clip(np.minimum(yg - r0, r1 - yg) / w, 0.0, 1.0)
            ramp_c = np.clip(np.minimum(xg - c0, c1 - xg) / w, 0.0, 1.0)
            alpha = np.sin(0.5 * math.pi * ramp_r) * np.sin(0.5 * math.pi * ramp_c)
        else:
            alpha = np.ones((m, n))
        envelopes.append((box, np.where(box, alpha, 0.0)))

    frames: list[ThermalFrame] = []
    masks: list[CloudMask] = []
    for k in range(spec.n_frames):
        temps_k = np.full((m, n), spec.clear_sky_temp)
        mask_k = np.zeros((m, n), dtype=np.uint8)
        for c in order:
            layer = spec.layers[c]
            u, v = layer.velocity_px
            g = textures[c](xg - u * k, yg - v * k, frame=k)
            inside = (g > thresholds[c]) & envelopes[c][0]
            # No clipping: outside pixels are never used, and clipping would
            # flatten texture wherever the advected field dips below the
            # frame-0 base, starving the flow solver of gradients.
            modulation = (g - mod_bases[c]) / mod_scales[c]
            layer_value = layer_temps[c] + layer.temp_amplitude_k * modulation
            alpha = envelopes[c][1]
            blended = alpha * layer_value + (1.0 - alpha) * temps_k
            temps_k = np.where(inside, blended, temps_k)
            mask_k = np.where(inside & (alpha > 0.5), 1, mask_k).astype(np.uint8)
        if spec.psf_sigma_px > 0.0:
            from scipy.ndimage import gaussian_filter

            temps_k = gaussian_filter(temps_k, spec.psf_sigma_px, mode="nearest")
        if spec.noise_k > 0.0:
            temps_k = temps_k + rng.normal(0.0, spec.noise_k, temps_k.shape)
        frames.append(
            ThermalFrame(
                temps=temps_k * 100.0,
                frame_index=k,
                timestamp=k * spec.frame_period_s,
                sun_elevation=math.pi / 2,
                sun_azimuth=0.0,
                air_temp=spec.air_temp,
            )
        )
        masks.append(CloudMask(mask_k))

    truth = SceneTruth(
        velocities_px=tuple(layer.velocity_px for layer in spec.layers),
        heights_m=tuple(layer.height_m for layer in spec.layers),
        layer_temps_k=layer_temps,
        overlapping_temps=overlapping,
    )
    return frames, masks, truth
