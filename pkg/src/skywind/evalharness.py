"""Error metrics, the per-frame selection score and hyperparameter search."""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .flowfield import div_curl, extrapolate
from .wsvr import (
    FlowConstraintOps,
    KernelSpec,
    SvrProblem,
    solve_mo_wsvm,
    solve_mo_wsvm_fc,
    predict,
)


@dataclass(frozen=True)
class FrameLabels:
    """Ground-truth height (m), speed (m/s) and direction (radians) for one layer."""

    height: float
    speed: float
    direction: float

    def __post_init__(self):
        if self.speed < 0.0:
            raise InputError("speed label must be non-negative")
        if not -math.pi < self.direction <= math.pi:
            raise InputError("direction label must lie in (-pi, pi]")


def mae_wmae(pred: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    """Mean absolute error and its sample-weighted variant."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if pred.shape != truth.shape or pred.shape != weights.shape:
        raise InputError("pred, truth and weights must have equal lengths")
    if np.any(weights < 0.0) or weights.sum() <= 0.0:
        raise InputError("weights must be non-negative and not all zero")
    err = np.abs(pred - truth)
    return float(err.mean()), float((weights * err).sum() / weights.sum())


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class MapeResult:
    height: float | None
    speed: float | None
    direction: float
    combined: float
    skipped: tuple[str, ...] = ()


def mape_labels(
    est_height: float, est_speed: float, est_direction: float, labels: FrameLabels
) -> MapeResult:
    """Percentage errors of height, speed and direction against the labels.

    The direction error is wrapped into (-pi, pi] and expressed as a percentage
    of pi. Quantities with a zero label are skipped (flagged) rather than
    dividing by zero; the combined value averages whatever remains.
    """
    parts: list[float] = []
    skipped: list[str] = []
    height = speed = None
    if labels.height != 0.0:
        height = abs(est_height - labels.height) / abs(labels.height) * 100.0
        parts.append(height)
    else:
        skipped.append("height")
    if labels.speed != 0.0:
        speed = abs(est_speed - labels.speed) / labels.speed * 100.0
        parts.append(speed)
    else:
        skipped.append("speed")
    direction = abs(wrap_angle(est_direction - labels.direction)) / math.pi * 100.0
    parts.append(direction)
    return MapeResult(
        height=height,
        speed=speed,
        direction=direction,
        combined=float(np.mean(parts)),
        skipped=tuple(skipped),
    )


def selection_score(mape_sequence) -> tuple[float, bool]:
    """Average of the mean MAPE and the mean absolute frame-to-frame change.

    Returns ``(score, single_frame)``; a single frame has no differences, so the
    second term is zero and the flag is set.
    """
    seq = np.asarray(list(mape_sequence), dtype=float)
    if seq.size == 0:
        raise InputError("selection_score needs at least one frame")
    mean_term = float(seq.mean())
    if seq.size < 2:
        return 0.5 * mean_term, True
    diff_term = float(np.abs(np.diff(seq)).mean())
    return 0.5 * (mean_term + diff_term), False


@dataclass(frozen=True)
class CvCandidate:
    kernel: KernelSpec
    c_reg: float
    epsilon: float


@dataclass(frozen=True)
class CvSpec:
    """Grid-search description: kernel kind plus per-parameter grids.

    ``gamma_grid``, ``coef0_grid`` and ``degree_grid`` only matter where the
    kernel uses them. ``fixed`` replays one parameter set without searching.
    """

    kernel_kind: str = "linear"
    c_grid: tuple[float, ...] = (1.0, 10.0, 100.0)
    epsilon_grid: tuple[float, ...] = (0.1, 0.31)
    gamma_grid: tuple[float, ...] = (1.0,)
    coef0_grid: tuple[float, ...] = (0.0,)
    degree_grid: tuple[int, ...] = (2,)
    train_fraction: float = 0.75
    seed: int = 0
    fixed: CvCandidate | None = None

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InputError("train_fraction must be in (0, 1)")
        if self.fixed is None:
            if not (self.c_grid and self.epsilon_grid):
                raise InputError("parameter grids must be non-empty")
            if self.kernel_kind in ("rbf", "poly") and not self.gamma_grid:
                raise InputError("gamma grid must be non-empty for this kernel")
            if self.kernel_kind == "poly" and not (self.coef0_grid and self.degree_grid):
                raise InputError("poly grids must be non-empty")

    def candidates(self) -> list[CvCandidate]:
        if self.fixed is not None:
            return [self.fixed]
        kind = self.kernel_kind
        gammas = self.gamma_grid if kind in ("rbf", "poly") else (1.0,)
        coef0s = self.coef0_grid if kind == "poly" else (0.0,)
        degrees = self.degree_grid if kind == "poly" else (2,)
        out = []
        for c, eps, g, c0, d in itertools.product(
            self.c_grid, self.epsilon_grid, gammas, coef0s, degrees
        ):
            out.append(
                CvCandidate(
                    kernel=KernelSpec(kind=kind, gamma=g, coef0=c0, degree=d),
                    c_reg=c,
                    epsilon=eps,
                )
            )
        return out


@dataclass(frozen=True)
class CvRow:
    candidate: CvCandidate
    mae: float
    wmae: float
    div_scalar: float
    curl_scalar: float
    seconds: float


@dataclass(frozen=True)
class CvResult:
    best: CvCandidate
    rows: tuple[CvRow, ...]
    searched: bool


def cross_validate(
    coords: np.ndarray,
    velocities: np.ndarray,
    weights: np.ndarray,
    spec: CvSpec,
    use_fc: bool = False,
    ops: FlowConstraintOps | None = None,
) -> CvResult:
    """Grid-search solver hyperparameters on a held-out split of the samples.

    Candidates train on ``train_fraction`` of the samples (seeded shuffle) and
    are scored by held-out WMAE over both velocity components; the argmin wins,
    ties broken by grid order. ``fixed`` mode skips the search and just scores
    the supplied parameters. Divergence/curl scalars of the extrapolated field
    are reported when the operators are supplied.
    """
    candidates = spec.candidates()
    n = coords.shape[0]
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    n_train = max(2, int(round(spec.train_fraction * n)))
    n_train = min(n_train, n - 1) if spec.fixed is None else min(n_train, n)
    train_idx = perm[:n_train]
    test_idx = perm[n_train:] if n_train < n else perm[:0]

    rows: list[CvRow] = []
    best_i = 0
    best_wmae = math.inf
    for i, cand in enumerate(candidates):
        start = time.perf_counter()
        problem = SvrProblem(
            x=coords[train_idx],
            y=np.concatenate([velocities[train_idx, 0], velocities[train_idx, 1]]),
            weights=weights[train_idx],
            c_reg=cand.c_reg,
            epsilon=cand.epsilon,
            kernel=cand.kernel,
        )
        if use_fc:
            if ops is None:
                raise InputError("use_fc requires the constraint operators")
            solution = solve_mo_wsvm_fc(problem, ops)
        else:
            solution = solve_mo_wsvm(problem)
        if test_idx.size:
            pred = predict(solution, cand.kernel, coords[train_idx], coords[test_idx])
            err_u = pred[:, 0] - velocities[test_idx, 0]
            err_v = pred[:, 1] - velocities[test_idx, 1]
            errs = np.concatenate([np.abs(err_u), np.abs(err_v)])
            w2 = np.tile(weights[test_idx], 2)
            mae = float(errs.mean())
            wmae = float((w2 * errs).sum() / w2.sum())
        else:
            mae = wmae = float("nan")
        if ops is not None:
            fieldv = extrapolate(
                solution, cand.kernel, coords[train_idx], ops.rows, ops.cols
            )
            dc = div_curl(fieldv, ops)
            div_s, curl_s = dc.div_scalar, dc.curl_scalar
        else:
            div_s = curl_s = float("nan")
        rows.append(
            CvRow(
                candidate=cand,
                mae=mae,
                wmae=wmae,
                div_scalar=div_s,
                curl_scalar=curl_s,
                seconds=time.perf_counter() - start,
            )
        )
        if test_idx.size and wmae < best_wmae:
            best_wmae = wmae
            best_i = i
    return CvResult(
        best=candidates[best_i], rows=tuple(rows), searched=spec.fixed is None
    )


def write_cv_table(path, result: CvResult) -> None:
    """Emit the score table as CSV, one row per candidate."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["kernel", "C", "epsilon", "gamma", "beta", "degree", "MAE", "WMAE",
             "div", "curl", "seconds"]
        )
        for row in result.rows:
            k = row.candidate.kernel
            writer.writerow(
                [
                    k.kind,
                    repr(row.candidate.c_reg),
                    repr(row.candidate.epsilon),
                    repr(k.gamma) if k.kind in ("rbf", "poly") else "",
                    repr(k.coef0) if k.kind == "poly" else "",
                    k.degree if k.kind == "poly" else "",
                    repr(row.mae),
                    repr(row.wmae),
                    repr(row.div_scalar),
                    repr(row.curl_scalar),
                    f"{row.seconds:.3f}",
                ]
            )
