"""Full-frame field extrapolation, flow residuals and stream/potential functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .wsvr import DualSolution, FlowConstraintOps, KernelSpec, grid_coordinates, predict


@dataclass(frozen=True)
class GridField:
    """Extrapolated velocity grids (m/s) for one layer plus its mean height."""

    u: np.ndarray
    v: np.ndarray
    height: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


@dataclass(frozen=True)
class DivCurl:
    """Per-cell flow residuals and the two scalar constraint values.

    ``div`` is the forward-difference ``u_x + v_y`` grid (the ``[I; I]``
    composition); ``curl`` is ``u_x - v_y`` (the ``[I; -I]`` composition, kept
    under the conventional name used by the solver's constraint pair). The
    scalars are the squared norms of those grids.
    """

    div: np.ndarray
    curl: np.ndarray
    div_scalar: float
    curl_scalar: float


@dataclass(frozen=True)
class StreamFunction:
    """Stream (phi) and potential (psi) grids, anchored to zero at the origin."""

    phi: np.ndarray
    psi: np.ndarray
    dx: np.ndarray
    dy: np.ndarray


def extrapolate(
    solution: DualSolution,
    kernel: KernelSpec,
    x_train: np.ndarray,
    rows: int,
    cols: int,
    height: float = 1.0,
) -> GridField:
    """Evaluate the fitted regressor at every pixel and reshape to grids."""
    coords = grid_coordinates(rows, cols)
    values = predict(solution, kernel, x_train, coords)
    if values.ndim == 1:
        raise InputError("extrapolate requires a two-output solution")
    return GridField(
        u=values[:, 0].reshape(rows, cols),
        v=values[:, 1].reshape(rows, cols),
        height=height,
    )


def div_curl(field: GridField, ops: FlowConstraintOps) -> DivCurl:
    """Apply the difference-operator compositions to a field."""
    if field.shape != (ops.rows, ops.cols):
        raise InputError("field and operator dimensions differ")
    comp_sum, comp_diff = ops.composed(field.u.reshape(-1), field.v.reshape(-1))
    return DivCurl(
        div=comp_sum.reshape(field.shape),
        curl=comp_diff.reshape(field.shape),
        div_scalar=float(np.sum(comp_sum**2)),
        curl_scalar=float(np.sum(comp_diff**2)),
    )


def _cumtrapz(values: np.ndarray, axis: int) -> np.ndarray:
    """Cumulative trapezoid integral along an axis, zero at the first sample."""
    pair_mean = 0.5 * (
        np.take(values, range(1, values.shape[axis]), axis=axis)
        + np.take(values, range(0, values.shape[axis] - 1), axis=axis)
    )
    body = np.cumsum(pair_mean, axis=axis)
    zero_shape = list(values.shape)
    zero_shape[axis] = 1
    return np.concatenate([np.zeros(zero_shape), body], axis=axis)


def stream_potential(field: GridField, dx: np.ndarray, dy: np.ndarray) -> StreamFunction:
    """Integrate the stream and potential functions of a velocity field.

    With trapezoid-corrected cumulative sums along rows (axis 0) and columns
    (axis 1):

        phi = (H/2) [ cum_rows(u * dy) - cum_cols(v * dx) ]
        psi = (H/2) [ cum_cols(u * dx) + cum_rows(v * dy) ]

    ``dx``/``dy`` are per-pixel cell sizes. Both grids are anchored to zero at
    pixel (0, 0); the result is linear in the field and in the layer height.
    """
    if not (np.all(np.isfinite(field.u)) and np.all(np.isfinite(field.v))):
        raise InputError("field must be finite")
    dx = np.broadcast_to(np.asarray(dx, dtype=float), field.shape)
    dy = np.broadcast_to(np.asarray(dy, dtype=float), field.shape)
    half_h = 0.5 * field.height
    phi = half_h * (_cumtrapz(field.u * dy, axis=0) - _cumtrapz(field.v * dx, axis=1))
    psi = half_h * (_cumtrapz(field.u * dx, axis=1) + _cumtrapz(field.v * dy, axis=0))
    return StreamFunction(phi=phi, psi=psi, dx=dx, dy=dy)


def _cell_segments(grid: np.ndarray, level: float) -> list[tuple[np.ndarray, np.ndarray]]:
    # Marching squares on one level: linear interpolation along cell edges.
    m, n = grid.shape
    segments: list[tuple[np.ndarray, np.ndarray]] = []
    inside = grid >= level

    def interp(p0, p1, v0, v1):
        t = (level - v0) / (v1 - v0)
        return np.array([p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])])

    for i in range(m - 1):
        for j in range(n - 1):
            corners = [(i, j), (i, j + 1), (i + 1, j + 1), (i + 1, j)]
            vals = [grid[p] for p in corners]
            code = sum(1 << k for k, p in enumerate(corners) if inside[p])
            if code in (0, 15):
                continue
            pts = []
            for k in range(4):
                p0, p1 = corners[k], corners[(k + 1) % 4]
                v0, v1 = vals[k], vals[(k + 1) % 4]
                if (v0 >= level) != (v1 >= level):
                    # Points are emitted as (x, y) = (col, row).
                    pts.append(
                        interp((p0[1], p0[0]), (p1[1], p1[0]), v0, v1)
                    )
            # Ambiguous saddles produce four crossings; pair them as found.
            for a in range(0, len(pts) - 1, 2):
                segments.append((pts[a], pts[a + 1]))
    return segments


def _chain_segments(segments: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    # Join segments sharing endpoints (rounded) into polylines.
    def key(p):
        return (round(float(p[0]), 9), round(float(p[1]), 9))

    unused = list(range(len(segments)))
    by_end: dict[tuple[float, float], list[int]] = {}
    for idx, (a, b) in enumerate(segments):
        by_end.setdefault(key(a), []).append(idx)
        by_end.setdefault(key(b), []).append(idx)
    used = np.zeros(len(segments), dtype=bool)
    lines: list[np.ndarray] = []
    for start in unused:
        if used[start]:
            continue
        used[start] = True
        a, b = segments[start]
        chain = [a, b]
        for grow_head in (False, True):
            while True:
                tip = chain[0] if grow_head else chain[-1]
                nxt = None
                for idx in by_end.get(key(tip), []):
                    if not used[idx]:
                        nxt = idx
                        break
                if nxt is None:
                    break
                used[nxt] = True
                pa, pb = segments[nxt]
                new_pt = pb if key(pa) == key(tip) else pa
                if grow_head:
                    chain.insert(0, new_pt)
                else:
                    chain.append(new_pt)
        lines.append(np.array(chain))
    return lines


def extract_isolines(
    stream: StreamFunction, n_levels: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Marching-squares isolines of phi and psi at equally spaced levels.

    Levels are placed strictly between each grid's min and max; a constant grid
    yields no lines. Each polyline is a ``(k, 2)`` array of (x, y) points.
    """
    if n_levels < 1:
        raise InputError("n_levels must be >= 1")

    def lines_for(grid: np.ndarray) -> list[np.ndarray]:
        lo, hi = float(grid.min()), float(grid.max())
        if hi - lo <= 0.0:
            return []
        levels = np.linspace(lo, hi, n_levels + 2)[1:-1]
        out: list[np.ndarray] = []
        for level in levels:
            out.extend(_chain_segments(_cell_segments(grid, level)))
        return out

    return lines_for(stream.phi), lines_for(stream.psi)


def orthogonality_angles(stream: StreamFunction) -> np.ndarray:
    """Angles (degrees) between grad(phi) and grad(psi) on interior cells.

    For a divergence- and curl-free field the stream and potential level sets
    cross at right angles, so these gradient angles sit near 90. Cells where
    either gradient nearly vanishes are skipped.
    """
    gphi_y, gphi_x = np.gradient(stream.phi)
    gpsi_y, gpsi_x = np.gradient(stream.psi)
    dot = gphi_x * gpsi_x + gphi_y * gpsi_y
    norm_phi = np.hypot(gphi_x, gphi_y)
    norm_psi = np.hypot(gpsi_x, gpsi_y)
    interior = np.zeros(stream.phi.shape, dtype=bool)
    interior[1:-1, 1:-1] = True
    scale = max(norm_phi.max(), norm_psi.max(), 1e-300)
    valid = interior & (norm_phi > 1e-9 * scale) & (norm_psi > 1e-9 * scale)
    cosang = np.clip(dot[valid] / (norm_phi[valid] * norm_psi[valid]), -1.0, 1.0)
    return np.degrees(np.arccos(cosang))
