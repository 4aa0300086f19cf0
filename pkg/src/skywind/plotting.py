"""Frame plots: temperature heatmap, sampled vectors, stream/potential isolines."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import fileio, flowfield
from .errors import InputError


def plot_frame_layer(
    frame_path,
    field_path,
    out_path,
    n_isolines: int = 8,
    quiver_step: int = 6,
) -> None:
    """Render one frame/layer pair to a vector-graphics file.

    Shows the temperature heatmap, a decimated quiver of the extrapolated field,
    stream isolines in green and potential isolines in red.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frame = fileio.read_frame(frame_path)
    u, v, phi, psi = fileio.read_field_grids(field_path)
    field = flowfield.GridField(u=u, v=v)
    stream = flowfield.StreamFunction(
        phi=phi, psi=psi, dx=np.ones_like(phi), dy=np.ones_like(phi)
    )
    phi_lines, psi_lines = flowfield.extract_isolines(stream, n_isolines)

    fig, ax = plt.subplots(figsize=(8, 6))
    ax.imshow(frame.temps / 100.0, cmap="inferno", origin="upper")
    step = max(1, quiver_step)
    yy, xx = np.mgrid[0 : u.shape[0] : step, 0 : u.shape[1] : step]
    ax.quiver(
        xx, yy, u[::step, ::step], v[::step, ::step],
        color="white", width=0.002, alpha=0.7,
    )
    for line in phi_lines:
        ax.plot(line[:, 0], line[:, 1], color="green", linewidth=1.0)
    for line in psi_lines:
        ax.plot(line[:, 0], line[:, 1], color="red", linewidth=1.0)
    ax.set_xlim(-0.5, u.shape[1] - 0.5)
    ax.set_ylim(u.shape[0] - 0.5, -0.5)
    ax.set_xlabel("x [px]")
    ax.set_ylabel("y [px]")
    fig.savefig(out_path, format=Path(str(out_path)).suffix.lstrip(".") or "svg")
    plt.close(fig)


def plot_results(results_csv, manifest_path, out_dir, n_isolines: int = 8) -> list[str]:
    """Plot every (frame, layer) row of a results.csv; returns written paths."""
    import csv

    results_csv = Path(results_csv)
    manifest = fileio.read_manifest(manifest_path)
    base_dir = Path(manifest_path).parent
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    with open(results_csv) as fh:
        for row in csv.DictReader(fh):
            k = int(row["frame"])
            layer = int(row["layer"])
            if k >= len(manifest):
                raise InputError(f"results.csv frame {k} not in manifest")
            frame_path = Path(manifest[k].frame_path)
            if not frame_path.is_absolute():
                frame_path = base_dir / frame_path
            field_path = Path(row["field_path"])
            if not field_path.exists():
                raise InputError(f"missing field grid file {field_path}")
            out_path = out_dir / f"frame_{k:04d}_layer{layer}.svg"
            plot_frame_layer(frame_path, field_path, out_path, n_isolines)
            written.append(str(out_path))
    return written
