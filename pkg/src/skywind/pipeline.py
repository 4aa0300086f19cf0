"""End-to-end per-frame pipeline: mixture fit, flow, pooling, layers, regression.

Frames are processed sequentially (the vector pool carries state across frames);
the first readable frame only primes the pool. Per-frame failures are logged and
skipped so one bad frame cannot abort a nowcasting run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bemm, fileio, flowfield, layers, motionpool, optflow, subsample, wsvr
from .errors import InputError, SkywindError
from .imaging import (
    CloudMask,
    HeightModel,
    PixelGeometry,
    ThermalFrame,
    height_map,
    pixel_geometry,
)

SOLVER_MODES = ("per-component", "mo", "fc")


@dataclass(frozen=True)
class PipelineConfig:
    """Flat pipeline configuration; defaults follow the validated optimum."""

    n_layers: int = 1
    vector_scale: float = 2.29
    select_tau: float = 0.95
    pool_depth: int = 6
    pool_extra_frame: bool = False
    n_samples: int = 200
    window_area: int = 16
    wlk_tau: float = 1e-8
    kernel_sigma: float = 1.0
    frame_rate: float = 1.0
    diag_fov_deg: float = 60.0
    lapse_rate: float = 0.0065
    height_floor: float = 0.0
    height_ceiling: float = 12000.0
    solver: str = "fc"
    kernel: str = "linear"
    c_reg: float = 31.06
    epsilon: float = 0.31
    kernel_gamma: float = 1.0
    kernel_coef0: float = 0.0
    kernel_degree: int = 2
    fc_tol: float = 1e-6
    solver_tol: float = 1e-6
    seed: int = 0
    geometry_file: str | None = None
    n_isolines: int = 8

    def __post_init__(self):
        if self.n_layers not in (1, 2):
            raise InputError("n_layers must be 1 or 2")
        if self.solver not in SOLVER_MODES:
            raise InputError(f"solver must be one of {SOLVER_MODES}")

    def kernel_spec(self) -> wsvr.KernelSpec:
        return wsvr.KernelSpec(
            kind=self.kernel,
            gamma=self.kernel_gamma,
            coef0=self.kernel_coef0,
            degree=self.kernel_degree,
        )

    def wlk_config(self) -> optflow.WlkConfig:
        return optflow.WlkConfig(
            window_area=self.window_area,
            reg_tau=self.wlk_tau,
            kernel_sigma=self.kernel_sigma,
            frame_rate=self.frame_rate,
            vector_scale=self.vector_scale,
        )

    def height_model(self) -> HeightModel:
        return HeightModel(
            lapse_rate=self.lapse_rate,
            height_floor=self.height_floor,
            height_ceiling=self.height_ceiling,
        )

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        """Parse a flat ``key = value`` text file; unknown keys are rejected."""
        values: dict[str, object] = {}
        fields = {f: cls.__dataclass_fields__[f].type for f in cls.__dataclass_fields__}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in fields:
                raise InputError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value)
        return cls(**values)


def _coerce(key: str, value: str):
    if key in ("solver", "kernel", "geometry_file"):
        return value
    if key in ("pool_extra_frame",):
        return value.lower() in ("1", "true", "yes", "on")
    if key in (
        "n_layers", "pool_depth", "n_samples", "window_area", "kernel_degree",
        "seed", "n_isolines",
    ):
        return int(value)
    return float(value)


@dataclass(frozen=True)
class LayerResult:
    """Per-layer outcome of one processed frame (layer 1 is the upper layer)."""

    layer: int
    h_hat_bemm: float
    h_bar_icm: float
    speed: float
    direction: float
    div_scalar: float
    curl_scalar: float
    n_support: int
    kkt_residual: float
    field_path: str
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class FrameResult:
    frame_index: int
    n_pool: int
    n_samples: int
    layers: tuple[LayerResult, ...]


@dataclass(frozen=True)
class PipelineRun:
    results: tuple[FrameResult, ...]
    skipped: tuple[tuple[int, str], ...]
    log: tuple[str, ...]
    results_csv: str | None = None


def _frame_seed(base: int, frame_index: int) -> int:
    return base * 1_000_003 + frame_index


def _fit_mixture_on_clouds(
    norm: bemm.NormalizedTemps, mask: CloudMask, n_layers: int, seed: int
) -> bemm.BetaMixtureFit:
    """Fit the temperature mixture on cloud pixels, responsibilities frame-wide.

    Clear-sky pixels form their own cold temperature mode; fitting the mixture
    on the whole frame would then split sky-vs-cloud instead of layer-vs-layer.
    The mask is an input precisely because segmentation is external, so the fit
    uses cloud pixels only and the fitted components are evaluated at every
    pixel afterwards (sky pixels carry no texture change, so their weights feed
    nothing downstream).
    """
    cloud = mask.bits.astype(bool)
    if cloud.all() or cloud.sum() < 16:
        return bemm.fit_em(norm, n_layers, init_seed=seed)
    masked = bemm.NormalizedTemps(
        norm.values[cloud].reshape(1, -1), degenerate=norm.degenerate
    )
    fit = bemm.fit_em(masked, n_layers, init_seed=seed)
    gamma, _, underflow = bemm.e_step(norm, fit.alphas, fit.betas, fit.priors)
    return replace(
        fit,
        responsibilities=gamma,
        underflow_pixels=max(fit.underflow_pixels, underflow),
    )


def _solve_layer(
    config: PipelineConfig,
    coords: np.ndarray,
    velocities: np.ndarray,
    z: np.ndarray,
    ops: wsvr.FlowConstraintOps,
    grid_coords: np.ndarray,
):
    kernel = config.kernel_spec()
    stacked = np.concatenate([velocities[:, 0], velocities[:, 1]])
    # KKT violations live in target units; scale the tolerance accordingly.
    tol = config.solver_tol * max(1.0, float(np.abs(stacked).max()))
    if config.solver == "per-component":
        sol_u = wsvr.solve_wsvm(
            wsvr.SvrProblem(coords, velocities[:, 0], z, config.c_reg,
                            config.epsilon, kernel),
            tol=tol,
        )
        sol_v = wsvr.solve_wsvm(
            wsvr.SvrProblem(coords, velocities[:, 1], z, config.c_reg,
                            config.epsilon, kernel),
            tol=tol,
        )
        beta = np.concatenate([sol_u.beta, sol_v.beta])
        return wsvr.DualSolution(
            alpha=np.maximum(beta, 0.0),
            alpha_star=np.maximum(-beta, 0.0),
            bias=np.array([sol_u.bias[0], sol_v.bias[0]]),
            n_blocks=2,
            block_size=sol_u.block_size,
            n_support=sol_u.n_support + sol_v.n_support,
            objective=sol_u.objective + sol_v.objective,
            kkt_residual=max(sol_u.kkt_residual, sol_v.kkt_residual),
            converged=sol_u.converged and sol_v.converged,
            warnings=sol_u.warnings + sol_v.warnings,
        )
    problem = wsvr.SvrProblem(
        coords, stacked, z, config.c_reg, config.epsilon, kernel
    )
    if config.solver == "mo":
        return wsvr.solve_mo_wsvm(problem, tol=tol)
    # The constraint scalars are sums of squared field differences, so the
    # feasibility tolerance scales with the squared target magnitude.
    fc_tol = config.fc_tol * max(1.0, float(np.abs(stacked).max())) ** 2
    return wsvr.solve_mo_wsvm_fc(
        problem, ops, grid_coords, tol=tol, fc_tol=fc_tol
    )


def _bemm_heights_for_layers(
    fit: bemm.BetaMixtureFit,
    heights,
    mask: CloudMask,
    model: layers.LayerModel,
) -> np.ndarray:
    """BeMM cluster mean heights matched to ordered layers by descending height."""
    hats = []
    for c in range(fit.n_clusters):
        try:
            hats.append(bemm.layer_mean_height(fit.responsibilities, heights, mask, c))
        except SkywindError:
            hats.append(float("nan"))
    hats_arr = np.array(sorted(hats, reverse=True))
    if model.n_layers <= hats_arr.size:
        return hats_arr[: model.n_layers]
    return np.concatenate([hats_arr, np.full(model.n_layers - hats_arr.size, np.nan)])


def run_pipeline(
    manifest_path, config: PipelineConfig, out_dir
) -> PipelineRun:
    """Process a frame sequence end to end and emit results.csv plus field grids.

    Outputs are deterministic for a fixed manifest, config and seed: no clocks
    or unseeded randomness reach the result files.
    """
    manifest_path = Path(manifest_path)
    records = fileio.read_manifest(manifest_path)
    if len(records) < 2:
        raise InputError("manifest must list at least 2 frames")
    out_dir = Path(out_dir)
    fields_dir = out_dir / "fields"
    fields_dir.mkdir(parents=True, exist_ok=True)
    base_dir = manifest_path.parent

    log: list[str] = []
    skipped: list[tuple[int, str]] = []
    results: list[FrameResult] = []

    height_model = config.height_model()
    wlk_cfg = config.wlk_config()
    pool = motionpool.VectorPool(
        motionpool.PoolConfig(config.pool_depth, config.pool_extra_frame)
    )

    geom: PixelGeometry | None = None
    ops: wsvr.FlowConstraintOps | None = None
    grid_coords: np.ndarray | None = None
    prev: ThermalFrame | None = None

    for k, record in enumerate(records):
        try:
            frame = fileio.load_frame(record, k, base_dir)
        except (OSError, SkywindError) as exc:
            skipped.append((k, f"load failed: {exc}"))
            log.append(f"frame {k}: load failed: {exc}")
            continue
        if geom is None:
            if config.geometry_file:
                geom = fileio.read_geometry(
                    config.geometry_file, math.radians(config.diag_fov_deg)
                )
            else:
                geom = pixel_geometry(frame, math.radians(config.diag_fov_deg))
            rows, cols = frame.shape
            ops = wsvr.flow_constraint_ops(rows, cols)
            grid_coords = wsvr.grid_coordinates(rows, cols)
        if prev is None:
            prev = frame
            log.append(f"frame {k}: primes the pool")
            continue
        try:
            mask = fileio.load_mask(record, base_dir)
            flags: list[str] = []
            if mask is None:
                mask = CloudMask(np.ones(frame.shape, dtype=np.uint8))
                flags.append("no-mask")
            pool, frame_result = _process_frame(
                config, k, prev, frame, mask, geom, ops, grid_coords, pool,
                height_model, wlk_cfg, fields_dir, flags,
            )
            results.append(frame_result)
            log.append(
                f"frame {k}: ok ({len(frame_result.layers)} layers, "
                f"pool {frame_result.n_pool})"
            )
        except (OSError, SkywindError) as exc:
            skipped.append((k, str(exc)))
            log.append(f"frame {k}: skipped: {exc}")
        prev = frame

    csv_path = out_dir / "results.csv"
    _write_results(csv_path, results)
    return PipelineRun(
        results=tuple(results),
        skipped=tuple(skipped),
        log=tuple(log),
        results_csv=str(csv_path),
    )


def _process_frame(
    config: PipelineConfig,
    k: int,
    prev: ThermalFrame,
    frame: ThermalFrame,
    mask: CloudMask,
    geom: PixelGeometry,
    ops: wsvr.FlowConstraintOps,
    grid_coords: np.ndarray,
    pool: motionpool.VectorPool,
    height_model: HeightModel,
    wlk_cfg: optflow.WlkConfig,
    fields_dir: Path,
    flags: list[str],
) -> tuple[motionpool.VectorPool, FrameResult]:
    seed = _frame_seed(config.seed, k)
    norm = bemm.normalize_temps(frame)
    fit = _fit_mixture_on_clouds(norm, mask, config.n_layers, seed)
    if fit.degenerate:
        flags.append("bemm-degenerate")
    heights = height_map(frame, height_model)

    cluster_heights = np.array(
        [
            bemm.layer_mean_height(fit.responsibilities, heights, mask, c)
            for c in range(fit.n_clusters)
        ]
    )
    flow = optflow.flow_per_layer(prev, frame, fit.responsibilities, wlk_cfg)
    metric = optflow.to_metric(
        flow, fit.responsibilities, cluster_heights, geom, wlk_cfg
    )

    rank = motionpool.change_rank(prev, frame)
    if rank.degenerate:
        flags.append("static-pair")
    selection = motionpool.threshold_select(rank, config.select_tau)
    sel = selection.bits.astype(bool)
    rows_idx, cols_idx = np.nonzero(sel)
    pool = motionpool.push_frame(
        pool,
        xs=cols_idx,
        ys=rows_idx,
        us=metric.u_m[sel],
        vs=metric.v_m[sel],
        responsibilities=fit.responsibilities[sel],
    )

    vel_model = layers.icm_velocity(pool, seed=seed)
    if vel_model.collapsed:
        flags.append("layer-collapse")
    vel_model = layers.icm_height(vel_model, heights, mask, metric.u_m, metric.v_m)
    vel_model = layers.order_layers(vel_model)
    if vel_model.order_tie:
        flags.append("height-tie")

    samples = subsample.build_sample_set(pool, vel_model, config.n_samples, seed=seed)
    bemm_hats = _bemm_heights_for_layers(fit, heights, mask, vel_model)

    layer_rows: list[LayerResult] = []
    for c in range(vel_model.n_layers):
        z = np.clip(samples.posteriors[:, c], 1e-12, 1.0)
        solution = _solve_layer(
            config, samples.coords, samples.velocities, z, ops, grid_coords
        )
        h_bar = float(vel_model.mean_heights[c])
        grid = flowfield.extrapolate(
            solution,
            config.kernel_spec(),
            samples.coords,
            frame.shape[0],
            frame.shape[1],
            height=h_bar,
        )
        dc = flowfield.div_curl(grid, ops)
        stream = flowfield.stream_potential(grid, geom.dx, geom.dy)
        field_path = fields_dir / f"frame_{k:04d}_layer{c + 1}.tfld"
        fileio.write_field_grids(field_path, grid.u, grid.v, stream.phi, stream.psi)
        # Layer speed/direction come from the extrapolated field: the tube loss
        # makes it robust to outlier vectors that drag the hard Gaussian mean.
        mean_u = float(grid.u.mean())
        mean_v = float(grid.v.mean())
        layer_rows.append(
            LayerResult(
                layer=c + 1,
                h_hat_bemm=float(bemm_hats[c]),
                h_bar_icm=h_bar,
                speed=float(np.hypot(mean_u, mean_v)),
                direction=float(np.arctan2(mean_v, mean_u)),
                div_scalar=dc.div_scalar,
                curl_scalar=dc.curl_scalar,
                n_support=solution.n_support,
                kkt_residual=solution.kkt_residual,
                field_path=str(field_path),
                flags=tuple(flags) + solution.warnings,
            )
        )
    return pool, FrameResult(
        frame_index=k,
        n_pool=len(pool),
        n_samples=samples.coords.shape[0],
        layers=tuple(layer_rows),
    )


def _write_results(path, results: list[FrameResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "frame", "layer", "n_pool", "n_samples", "h_hat_bemm_m",
                "h_bar_icm_m", "speed_mps", "direction_rad", "div", "curl",
                "n_support", "kkt_residual", "field_path", "flags",
            ]
        )
        for res in results:
            for lay in res.layers:
                writer.writerow(
                    [
                        res.frame_index,
                        lay.layer,
                        res.n_pool,
                        res.n_samples,
                        repr(lay.h_hat_bemm),
                        repr(lay.h_bar_icm),
                        repr(lay.speed),
                        repr(lay.direction),
                        repr(lay.div_scalar),
                        repr(lay.curl_scalar),
                        lay.n_support,
                        repr(lay.kkt_residual),
                        lay.field_path,
                        "|".join(lay.flags),
                    ]
                )
