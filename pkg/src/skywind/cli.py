"""Command-line entry points: run, synth, plot and cv subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evalharness, fileio, pipeline, plotting
from .errors import SkywindError
from .imaging import LayerSpec, SceneSpec, synth_scene


def _cmd_run(args) -> int:
    config = (
        pipeline.PipelineConfig.from_file(args.config)
        if args.config
        else pipeline.PipelineConfig()
    )
    run = pipeline.run_pipeline(args.manifest, config, args.out)
    for line in run.log:
        print(line)
    print(f"results: {run.results_csv}")
    if run.skipped:
        print(f"skipped {len(run.skipped)} frame(s)", file=sys.stderr)
    return 0


def _scene_from_json(path) -> SceneSpec:
    payload = json.loads(Path(path).read_text())
    layer_specs = tuple(
        LayerSpec(
            velocity_px=tuple(layer["velocity_px"]),
            height_m=float(layer["height_m"]),
            coverage=float(layer.get("coverage", 1.0)),
            temp_amplitude_k=float(layer.get("temp_amplitude_k", 2.0)),
            wavelength_px=tuple(layer.get("wavelength_px", (20.0, 40.0))),
            texture_seed=int(layer.get("texture_seed", 0)),
        )
        for layer in payload.get("layers", [])
    )
    return SceneSpec(
        layers=layer_specs,
        n_frames=int(payload.get("n_frames", 21)),
        rows=int(payload.get("rows", 60)),
        cols=int(payload.get("cols", 80)),
        air_temp=float(payload.get("air_temp", 300.0)),
        clear_sky_temp=float(payload.get("clear_sky_temp", 210.0)),
        frame_period_s=float(payload.get("frame_period_s", 1.0)),
    )


def write_scene(scene: SceneSpec, out_dir) -> str:
    """Materialize a synthetic scene: frames, masks, manifest and ground truth."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, masks, truth = synth_scene(scene)
    records = []
    for k, (frame, mask) in enumerate(zip(frames, masks)):
        frame_name = f"frame_{k:04d}.tsky"
        mask_name = f"mask_{k:04d}.tmsk"
        fileio.write_frame(out_dir / frame_name, frame)
        fileio.write_mask(out_dir / mask_name, mask)
        records.append(
            fileio.ManifestRecord(
                frame_path=frame_name,
                timestamp=frame.timestamp,
                sun_elevation_deg=90.0,
                sun_azimuth_deg=0.0,
                air_temp_k=scene.air_temp,
                mask_path=mask_name,
            )
        )
    manifest_path = out_dir / "manifest.json"
    fileio.write_manifest(manifest_path, records)
    (out_dir / "truth.json").write_text(
        json.dumps(
            {
                "velocities_px": truth.velocities_px,
                "heights_m": truth.heights_m,
                "layer_temps_k": truth.layer_temps_k,
                "overlapping_temps": truth.overlapping_temps,
                "frame_period_s": scene.frame_period_s,
            },
            indent=2,
        )
    )
    return str(manifest_path)


def _cmd_synth(args) -> int:
    scene = _scene_from_json(args.spec)
    manifest = write_scene(scene, args.out)
    print(f"manifest: {manifest}")
    return 0


def _cmd_plot(args) -> int:
    written = plotting.plot_results(args.results, args.manifest, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_cv(args) -> int:
    grid = json.loads(Path(args.grid).read_text())
    spec = evalharness.CvSpec(
        kernel_kind=grid.get("kernel", "linear"),
        c_grid=tuple(grid.get("c_reg", [1.0, 10.0, 100.0])),
        epsilon_grid=tuple(grid.get("epsilon", [0.1, 0.31])),
        gamma_grid=tuple(grid.get("gamma", [1.0])),
        coef0_grid=tuple(grid.get("coef0", [0.0])),
        degree_grid=tuple(grid.get("degree", [2])),
        seed=int(grid.get("seed", 0)),
    )
    config = (
        pipeline.PipelineConfig.from_file(args.config)
        if args.config
        else pipeline.PipelineConfig()
    )
    # Validate on the pooled samples of the first processed frame.
    run_dir = Path(args.out)
    run = pipeline.run_pipeline(args.manifest, config, run_dir / "cv_run")
    if not run.results:
        print("no frames processed; nothing to validate", file=sys.stderr)
        return 1
    first = run.results[0]
    u, v, _, _ = fileio.read_field_grids(first.layers[0].field_path)
    rows, cols = u.shape
    ops = None
    coords, velocities, weights = _cv_samples_from_run(args.manifest, config, first)
    result = evalharness.cross_validate(coords, velocities, weights, spec)
    table = run_dir / "cv_table.csv"
    evalharness.write_cv_table(table, result)
    best = result.best
    print(f"best: kernel={best.kernel.kind} C={best.c_reg} epsilon={best.epsilon}")
    print(f"table: {table}")
    return 0


def _cv_samples_from_run(manifest_path, config, first_result):
    """Rebuild the first processed frame's sample set for CV scoring."""
    from . import bemm, layers, motionpool, optflow, subsample
    from .imaging import CloudMask

    records = fileio.read_manifest(manifest_path)
    base_dir = Path(manifest_path).parent
    k = first_result.frame_index
    prev = fileio.load_frame(records[k - 1], k - 1, base_dir)
    frame = fileio.load_frame(records[k], k, base_dir)
    mask = fileio.load_mask(records[k], base_dir)
    if mask is None:
        mask = CloudMask(np.ones(frame.shape, dtype=np.uint8))
    from .imaging import height_map, pixel_geometry
    import math as _math

    geom = pixel_geometry(frame, _math.radians(config.diag_fov_deg))
    seed = pipeline._frame_seed(config.seed, k)
    norm = bemm.normalize_temps(frame)
    fit = bemm.fit_em(norm, config.n_layers, init_seed=seed)
    heights = height_map(frame, config.height_model())
    cluster_heights = np.array(
        [
            bemm.layer_mean_height(fit.responsibilities, heights, mask, c)
            for c in range(fit.n_clusters)
        ]
    )
    wlk_cfg = config.wlk_config()
    flow = optflow.flow_per_layer(prev, frame, fit.responsibilities, wlk_cfg)
    metric = optflow.to_metric(flow, fit.responsibilities, cluster_heights, geom, wlk_cfg)
    rank = motionpool.change_rank(prev, frame)
    sel = motionpool.threshold_select(rank, config.select_tau).bits.astype(bool)
    rows_idx, cols_idx = np.nonzero(sel)
    pool = motionpool.push_frame(
        motionpool.VectorPool(motionpool.PoolConfig(config.pool_depth)),
        xs=cols_idx, ys=rows_idx,
        us=metric.u_m[sel], vs=metric.v_m[sel],
        responsibilities=fit.responsibilities[sel],
    )
    model = layers.icm_velocity(pool, seed=seed)
    model = layers.icm_height(model, heights, mask, metric.u_m, metric.v_m)
    model = layers.order_layers(model)
    samples = subsample.build_sample_set(pool, model, config.n_samples, seed=seed)
    weights = np.clip(samples.posteriors[:, 0], 1e-12, 1.0)
    return samples.coords, samples.velocities, weights


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skywind",
        description="Wind velocity fields and cloud pathlines from thermal sky images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="process a frame sequence")
    p_run.add_argument("manifest")
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=_cmd_run)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("spec", help="scene spec JSON")
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth)

    p_plot = sub.add_parser("plot", help="render frame/layer plots")
    p_plot.add_argument("results", help="results.csv from a run")
    p_plot.add_argument("--manifest", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=_cmd_plot)

    p_cv = sub.add_parser("cv", help="cross-validate solver hyperparameters")
    p_cv.add_argument("manifest")
    p_cv.add_argument("--grid", required=True, help="grid spec JSON")
    p_cv.add_argument("--config", default=None)
    p_cv.add_argument("--out", required=True)
    p_cv.set_defaults(func=_cmd_cv)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SkywindError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
