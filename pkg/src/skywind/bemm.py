"""Beta mixture fit over normalized frame temperatures.

Each cloud layer occupies a distinct temperature band, so the distribution of
normalized pixel temperatures is modelled as a C-component beta mixture. The fit
alternates a log-space E step with a gradient-ascent M step on the expected
complete-data log-likelihood; priors have the usual closed form. Responsibilities
feed the weighted optical flow and the per-layer height averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, logsumexp

from .errors import InputError, LayerEmptyError
from .imaging import CloudMask, HeightField, ThermalFrame

#: Squeeze margin keeping normalized temperatures strictly inside (0, 1).
EDGE_MARGIN = 1e-4

#: Lower floor for beta shape parameters.
PARAM_FLOOR = 1e-6


@dataclass(frozen=True)
class NormalizedTemps:
    """Frame temperatures min-max normalized and squeezed into (0, 1)."""

    values: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class BetaMixtureFit:
    """Fitted mixture: shapes, priors, per-pixel responsibilities and the EM trace.

    ``responsibilities`` has shape ``(M, N, C)`` and rows summing to one.
    ``cdll_trace`` records the EM surrogate objective after each iteration and is
    non-decreasing for accepted steps. ``underflow_pixels`` counts pixels whose
    responsibilities had to fall back to uniform because every component
    underflowed.
    """

    n_clusters: int
    alphas: np.ndarray
    betas: np.ndarray
    priors: np.ndarray
    responsibilities: np.ndarray
    cdll_trace: tuple[float, ...]
    converged: bool
    degenerate: bool = False
    underflow_pixels: int = 0

    def map_labels(self) -> np.ndarray:
        """Per-pixel MAP cluster index."""
        return np.argmax(self.responsibilities, axis=-1)

    def permuted(self, order: tuple[int, ...]) -> "BetaMixtureFit":
        """Relabel clusters; used by tests and the layer-ordering stage."""
        idx = list(order)
        return BetaMixtureFit(
            n_clusters=self.n_clusters,
            alphas=self.alphas[idx],
            betas=self.betas[idx],
            priors=self.priors[idx],
            responsibilities=self.responsibilities[..., idx],
            cdll_trace=self.cdll_trace,
            converged=self.converged,
            degenerate=self.degenerate,
            underflow_pixels=self.underflow_pixels,
        )


def normalize_temps(frame: ThermalFrame) -> NormalizedTemps:
    """Min-max normalize a frame, then squeeze into [margin, 1 - margin].

    A constant frame has no usable spread; all values collapse to 0.5 and the
    result is flagged degenerate.
    """
    temps = frame.temps
    lo = float(temps.min())
    hi = float(temps.max())
    if hi - lo <= 0.0:
        return NormalizedTemps(np.full(temps.shape, 0.5), degenerate=True)
    unit = (temps - lo) / (hi - lo)
    squeezed = EDGE_MARGIN + (1.0 - 2.0 * EDGE_MARGIN) * unit
    return NormalizedTemps(squeezed, degenerate=False)


def beta_logpdf(x, alpha: float, beta: float):
    """Log density of Beta(alpha, beta); accepts scalars or arrays in (0, 1)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise InputError("beta_logpdf requires x strictly inside (0, 1)")
    if alpha <= 0.0 or beta <= 0.0:
        raise InputError("beta shape parameters must be positive")
    out = (alpha - 1.0) * np.log(x) + (beta - 1.0) * np.log1p(-x) - betaln(alpha, beta)
    return out if out.ndim else float(out)


def _component_logpdfs(values: np.ndarray, alphas: np.ndarray, betas: np.ndarray) -> np.ndarray:
    log_x = np.log(values)[..., None]
    log_1mx = np.log1p(-values)[..., None]
    return (
        (alphas - 1.0) * log_x
        + (betas - 1.0) * log_1mx
        - betaln(alphas, betas)
    )


def e_step(
    temps: NormalizedTemps,
    alphas: np.ndarray,
    betas: np.ndarray,
    priors: np.ndarray,
) -> tuple[np.ndarray, float, int]:
    """Posterior responsibilities, evidence value and underflow-pixel count.

    Responsibilities are normalized per pixel in log space. The returned scalar
    is the observed-data log-likelihood (the EM evidence objective traced by
    :func:`fit_em`). Pixels where every component underflows to -inf fall back
    to uniform responsibilities and are counted.
    """
    log_joint = _component_logpdfs(temps.values, alphas, betas) + np.log(priors)
    log_norm = logsumexp(log_joint, axis=-1)
    bad = ~np.isfinite(log_norm)
    n_bad = int(bad.sum())
    gamma = np.exp(log_joint - np.where(bad, 0.0, log_norm)[..., None])
    if n_bad:
        gamma[bad] = 1.0 / len(priors)
        log_norm = np.where(bad, 0.0, log_norm)
    return gamma, float(log_norm.sum()), n_bad


def _cdll(values, gamma, alphas, betas, priors) -> float:
    logp = _component_logpdfs(values, alphas, betas)
    return float((gamma * (logp + np.log(priors))).sum())


def m_step(
    temps: NormalizedTemps,
    gamma: np.ndarray,
    alphas: np.ndarray,
    betas: np.ndarray,
    max_inner: int = 25,
    step0: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One M step: closed-form priors, then backtracking gradient ascent on shapes.

    The shape gradient per component is
    ``d/da = sum_ij gamma_ijc [log T_ij - psi(a_c) + psi(a_c + b_c)]`` and the
    beta analogue with ``log(1 - T_ij)``. Steps are only accepted when the
    weighted complete-data log-likelihood does not decrease, which is what makes
    the EM trace monotone. Parameters are floored at ``PARAM_FLOOR``.
    """
    values = temps.values
    n_pix = values.size
    priors = gamma.reshape(-1, gamma.shape[-1]).sum(axis=0) / n_pix
    priors = np.clip(priors, 1e-12, None)
    priors = priors / priors.sum()

    weights = gamma.reshape(-1, gamma.shape[-1])
    flat = values.reshape(-1)
    sum_w = weights.sum(axis=0)
    sum_wlog = weights.T @ np.log(flat)
    sum_wlog1m = weights.T @ np.log1p(-flat)

    alphas = alphas.copy()
    betas = betas.copy()

    def objective(a, b):
        return float(
            np.sum((a - 1.0) * sum_wlog + (b - 1.0) * sum_wlog1m - sum_w * betaln(a, b))
        )

    current = objective(alphas, betas)
    step = step0
    for _ in range(max_inner):
        psi_ab = digamma(alphas + betas)
        grad_a = sum_wlog + sum_w * (psi_ab - digamma(alphas))
        grad_b = sum_wlog1m + sum_w * (psi_ab - digamma(betas))
        if not (np.all(np.isfinite(grad_a)) and np.all(np.isfinite(grad_b))):
            step *= 0.5
            continue
        gnorm = float(np.sqrt((grad_a**2 + grad_b**2).sum()))
        if gnorm < 1e-10 * max(1.0, n_pix):
            break
        # Normalize by the pixel count so the step size is resolution-independent.
        scale = step / n_pix
        accepted = False
        for _ in range(30):
            cand_a = np.maximum(alphas + scale * grad_a, PARAM_FLOOR)
            cand_b = np.maximum(betas + scale * grad_b, PARAM_FLOOR)
            cand = objective(cand_a, cand_b)
            if np.isfinite(cand) and cand >= current:
                alphas, betas, current = cand_a, cand_b, cand
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        step = min(step * 1.5, 64.0)
    return alphas, betas, priors


def _moment_match(values: np.ndarray) -> tuple[float, float]:
    mean = float(values.mean())
    var = float(values.var())
    mean = min(max(mean, 1e-6), 1.0 - 1e-6)
    var = max(var, 1e-12)
    common = max(mean * (1.0 - mean) / var - 1.0, 1e-3)
    return max(mean * common, PARAM_FLOOR), max((1.0 - mean) * common, PARAM_FLOOR)


def _quantile_init(
    values: np.ndarray, n_clusters: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    flat = np.sort(values.reshape(-1))
    edges = np.linspace(0, flat.size, n_clusters + 1).astype(int)
    alphas = np.empty(n_clusters)
    betas = np.empty(n_clusters)
    for c in range(n_clusters):
        group = flat[edges[c] : edges[c + 1]]
        alphas[c], betas[c] = _moment_match(group)
    # Identical groups would stall EM at the label-symmetric point; jitter.
    if n_clusters > 1 and np.allclose(alphas, alphas[0]) and np.allclose(betas, betas[0]):
        rng = np.random.default_rng(seed)
        alphas *= 1.0 + 0.05 * rng.standard_normal(n_clusters)
        alphas = np.maximum(alphas, PARAM_FLOOR)
    priors = np.full(n_clusters, 1.0 / n_clusters)
    return alphas, betas, priors


def fit_em(
    temps: NormalizedTemps,
    n_clusters: int,
    init_seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> BetaMixtureFit:
    """Fit a beta mixture by EM.

    Initialization is a quantile split plus method of moments (deterministic;
    the seed only perturbs a pathological symmetric init). Iteration stops when
    the evidence improves by less than ``tol`` or after ``max_iters``. Degenerate
    input (constant frame) falls back to a flagged single-component fit.
    """
    if n_clusters not in (1, 2):
        raise InputError("n_clusters must be 1 or 2")
    if max_iters < 1:
        raise InputError("max_iters must be >= 1")

    degenerate = temps.degenerate
    if degenerate:
        n_clusters = 1

    alphas, betas, priors = _quantile_init(temps.values, n_clusters, init_seed)
    trace: list[float] = []
    underflow = 0
    converged = False
    gamma = np.full(temps.values.shape + (n_clusters,), 1.0 / n_clusters)
    for _ in range(max_iters):
        gamma, evidence, n_bad = e_step(temps, alphas, betas, priors)
        underflow = max(underflow, n_bad)
        trace.append(evidence)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
        alphas, betas, priors = m_step(temps, gamma, alphas, betas)
    return BetaMixtureFit(
        n_clusters=n_clusters,
        alphas=alphas,
        betas=betas,
        priors=priors,
        responsibilities=gamma,
        cdll_trace=tuple(trace),
        converged=converged,
        degenerate=degenerate,
        underflow_pixels=underflow,
    )


def layer_mean_height(
    gamma: np.ndarray, heights: HeightField, mask: CloudMask, cluster: int
) -> float:
    """Responsibility-weighted mean height of cluster ``cluster`` over cloud pixels."""
    if not mask.any_cloud():
        raise LayerEmptyError("cloud mask is empty")
    w = gamma[..., cluster] * mask.bits
    denom = float(w.sum())
    if denom <= 0.0:
        raise LayerEmptyError(f"no cloud pixel supports cluster {cluster}")
    return float((w * heights.heights).sum() / denom)
