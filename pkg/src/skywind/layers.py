"""Hard-assignment (ICM) inference of per-layer velocity and height Gaussians.

Pooled velocity vectors are split into one or two layers by alternating weighted
Gaussian parameter updates with MAP reassignment; pixel heights are then split
the same way, seeded from the velocity classification. Layers are finally
ordered so index 0 is the upper (higher mean height) layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, LayerEmptyError
from .imaging import CloudMask, HeightField
from .motionpool import VectorPool

COV_FLOOR = 1e-9
HEIGHT_VAR_FLOOR = 1e-6
ORDER_TIE_METERS = 1.0


@dataclass(frozen=True)
class LayerModel:
    """Converged layer model.

    ``velocity_means`` is ``(C, 2)``, ``velocity_covs`` ``(C, 2, 2)``;
    ``assignments`` holds the pooled vectors' layer labels. Height fields are
    filled by :func:`icm_height`: per-layer mean/variance, the per-pixel labels
    ``pixel_assignments`` and the cloud-masked mean heights ``mean_heights``.
    After :func:`order_layers`, layer 0 is the upper layer.
    """

    n_layers: int
    velocity_means: np.ndarray
    velocity_covs: np.ndarray
    assignments: np.ndarray
    collapsed: bool = False
    objective_trace: tuple[float, ...] = ()
    height_means: np.ndarray | None = None
    height_vars: np.ndarray | None = None
    pixel_assignments: np.ndarray | None = None
    mean_heights: np.ndarray | None = None
    ordered: bool = False
    order_tie: bool = False

    def log_likelihood(self, vectors: np.ndarray) -> np.ndarray:
        """Per-vector, per-layer Gaussian log density, shape (n, C)."""
        return _gauss_logpdf(vectors, self.velocity_means, self.velocity_covs)


def _regularize_cov(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    trace = max(np.trace(cov), 1e-12)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals.min() < COV_FLOOR:
        cov = cov + (COV_FLOOR * trace + COV_FLOOR) * np.eye(cov.shape[0])
    return cov


def _gauss_logpdf(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    out = np.empty((x.shape[0], means.shape[0]))
    for c in range(means.shape[0]):
        diff = x - means[c]
        cov = covs[c]
        sign, logdet = np.linalg.slogdet(cov)
        inv = np.linalg.inv(cov)
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        out[:, c] = -0.5 * (quad + logdet + x.shape[1] * np.log(2.0 * np.pi))
    return out


def _hard_moments(vectors: np.ndarray, labels: np.ndarray, n_layers: int):
    means = np.empty((n_layers, vectors.shape[1]))
    covs = np.empty((n_layers, vectors.shape[1], vectors.shape[1]))
    counts = np.empty(n_layers, dtype=int)
    for c in range(n_layers):
        sel = labels == c
        counts[c] = int(sel.sum())
        if counts[c] >= 2:
            pts = vectors[sel]
            means[c] = pts.mean(axis=0)
            centered = pts - means[c]
            covs[c] = _regularize_cov(centered.T @ centered / counts[c])
    return means, covs, counts


def _objective(vectors, labels, means, covs) -> float:
    ll = _gauss_logpdf(vectors, means, covs)
    return float(ll[np.arange(len(labels)), labels].sum())


def _icm_once(vectors: np.ndarray, init_labels: np.ndarray, max_iters: int):
    """One ICM run; returns (labels, means, covs, trace, collapsed)."""
    n, n_layers = vectors.shape[0], 2
    labels = init_labels.copy()
    reseeds = 0
    trace: list[float] = []
    means = covs = None
    for _ in range(max_iters):
        means, covs, counts = _hard_moments(vectors, labels, n_layers)
        if counts.min() < 2:
            dead = int(np.argmin(counts))
            alive = 1 - dead
            if reseeds >= 1:
                labels = np.zeros(n, dtype=int)
                means, covs, _ = _hard_moments(vectors, labels, 1)
                return labels, means, covs, trace, True
            reseeds += 1
            ll_alive = _gauss_logpdf(
                vectors, means[alive : alive + 1], covs[alive : alive + 1]
            )[:, 0]
            worst = np.argsort(ll_alive)[: max(2, n // 4)]
            labels = np.full(n, alive, dtype=int)
            labels[worst] = dead
            continue
        trace.append(_objective(vectors, labels, means, covs))
        new_labels = np.argmax(_gauss_logpdf(vectors, means, covs), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    trace.append(_objective(vectors, labels, means, covs))
    return labels, means, covs, trace, False


def icm_velocity(
    pool: VectorPool, seed: int = 0, max_iters: int = 100, n_init: int = 4
) -> LayerModel:
    """Cluster pooled velocity vectors into layers by iterated conditional modes.

    Each restart begins from a random binary assignment, alternates
    hard-weighted mean and covariance updates with MAP reassignment, and stops
    when assignments are stable; the restart with the best final likelihood
    wins. Inits are drawn against a canonical (lexicographic) ordering of the
    vectors, so permuting the input changes label alignment only. An emptied
    layer is reseeded once from the vectors least likely under the surviving
    layer; a second collapse degrades to a single flagged Gaussian. One expected
    layer skips ICM entirely (plain MLE).
    """
    vectors = pool.vectors
    n = vectors.shape[0]
    n_layers = pool.responsibilities.shape[1] if len(pool) else 1
    if n < 4 * n_layers:
        raise InputError(f"need at least {4 * n_layers} pooled vectors, have {n}")

    if n_layers == 1:
        means, covs, _ = _hard_moments(vectors, np.zeros(n, dtype=int), 1)
        labels = np.zeros(n, dtype=int)
        return LayerModel(
            n_layers=1,
            velocity_means=means,
            velocity_covs=covs,
            assignments=labels,
            objective_trace=(_objective(vectors, labels, means, covs),),
        )

    order = np.lexsort((vectors[:, 1], vectors[:, 0]))
    canon = vectors[order]
    best = None
    for restart in range(max(n_init, 1)):
        rng = np.random.default_rng(np.random.SeedSequence((seed, restart)))
        init = rng.integers(0, n_layers, n)
        if len(np.unique(init)) < n_layers:
            init[0] = 1 - init[0]
        labels_c, means, covs, trace, collapsed = _icm_once(canon, init, max_iters)
        score = -np.inf if collapsed else trace[-1]
        if best is None or score > best[0]:
            best = (score, labels_c, means, covs, trace, collapsed)
    _, labels_c, means, covs, trace, collapsed = best
    labels = np.empty(n, dtype=int)
    labels[order] = labels_c
    if collapsed:
        return LayerModel(
            n_layers=1,
            velocity_means=means,
            velocity_covs=covs,
            assignments=np.zeros(n, dtype=int),
            collapsed=True,
            objective_trace=tuple(trace),
        )
    return LayerModel(
        n_layers=n_layers,
        velocity_means=means,
        velocity_covs=covs,
        assignments=labels,
        objective_trace=tuple(trace),
    )


def icm_height(
    model: LayerModel,
    heights: HeightField,
    mask: CloudMask,
    u_m: np.ndarray,
    v_m: np.ndarray,
    max_iters: int = 100,
) -> LayerModel:
    """Infer per-layer height Gaussians over cloud pixels.

    Pixel labels start from the MAP classification of the per-pixel metric
    velocities under the converged velocity model, then 1-D Gaussian ICM runs on
    the heights of cloud pixels. Returns a copy of the model with height fields
    and the cloud-masked mean heights filled in.
    """
    if not mask.any_cloud():
        raise LayerEmptyError("cloud mask is empty; layer heights unavailable")
    h = heights.heights
    cloud = mask.bits.astype(bool)
    n_layers = model.n_layers

    pixel_vel = np.stack([u_m.reshape(-1), v_m.reshape(-1)], axis=1)
    labels = np.argmax(
        _gauss_logpdf(pixel_vel, model.velocity_means, model.velocity_covs), axis=1
    ).reshape(h.shape)

    if n_layers == 1:
        vals = h[cloud]
        mu = np.array([vals.mean()])
        var = np.array([max(vals.var(), HEIGHT_VAR_FLOOR)])
        labels = np.zeros(h.shape, dtype=int)
        mean_heights = np.array([vals.mean()])
        return replace(
            model,
            height_means=mu,
            height_vars=var,
            pixel_assignments=labels,
            mean_heights=mean_heights,
        )

    hc = h[cloud]
    lab = labels[cloud]
    if any(not (lab == c).any() for c in range(n_layers)):
        # Velocity MAP put every cloud pixel on one side; reseed from the median.
        lab = (hc > np.median(hc)).astype(int)
    overall = float(hc.mean())
    mu = np.full(n_layers, overall)
    var = np.full(n_layers, HEIGHT_VAR_FLOOR)
    for _ in range(max_iters):
        for c in range(n_layers):
            sel = lab == c
            if sel.any():
                mu[c] = hc[sel].mean()
                var[c] = max(hc[sel].var(), HEIGHT_VAR_FLOOR)
            # An empty layer keeps its previous parameters.
        ll = -0.5 * ((hc[:, None] - mu[None, :]) ** 2 / var[None, :] + np.log(var)[None, :])
        new_lab = np.argmax(ll, axis=1)
        if np.array_equal(new_lab, lab):
            break
        lab = new_lab

    labels_full = labels.copy()
    labels_full[cloud] = lab
    mean_heights = np.empty(n_layers)
    for c in range(n_layers):
        sel = lab == c
        mean_heights[c] = hc[sel].mean() if sel.any() else overall
    return replace(
        model,
        height_means=mu,
        height_vars=var,
        pixel_assignments=labels_full,
        mean_heights=mean_heights,
    )


def order_layers(model: LayerModel) -> LayerModel:
    """Permute layers so layer 0 has the greater mean height.

    Near-equal mean heights (within 1 m) keep the original order and set the
    tie flag.
    """
    if model.mean_heights is None:
        raise InputError("order_layers requires height inference first")
    if model.n_layers == 1:
        return replace(model, ordered=True)
    h = model.mean_heights
    if abs(h[0] - h[1]) < ORDER_TIE_METERS:
        return replace(model, ordered=True, order_tie=True)
    if h[0] >= h[1]:
        return replace(model, ordered=True)
    perm = np.array([1, 0])
    remap = np.argsort(perm)
    return replace(
        model,
        velocity_means=model.velocity_means[perm],
        velocity_covs=model.velocity_covs[perm],
        assignments=remap[model.assignments],
        height_means=model.height_means[perm],
        height_vars=model.height_vars[perm],
        pixel_assignments=remap[model.pixel_assignments],
        mean_heights=model.mean_heights[perm],
        ordered=True,
    )
