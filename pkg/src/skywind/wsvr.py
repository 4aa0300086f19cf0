"""Weighted epsilon-tube support vector regression with optional flow constraints.

Three solvers share one SMO core:

* :func:`solve_wsvm` fits a single output with per-sample weighted box caps
  ``c_i = z_i * c_reg / n``.
* :func:`solve_mo_wsvm` fits stacked (u, v) targets over the block-diagonal
  extended Gram matrix with caps ``c_i = z_i * c_reg / (2n)``. The blocks
  decouple exactly, so each is solved independently.
* :func:`solve_mo_wsvm_fc` augments the multi-output dual with an escalating
  quadratic penalty that drives the full-grid extrapolated field's
  divergence-style residuals (the ``[I; I]`` and ``[I; -I]`` compositions of the
  forward-difference operators) to zero.

The dual minimized is the classical form

    min  1/2 (a - a*)' K (a - a*) - y'(a - a*) + eps 1'(a + a*)
    s.t. 1'(a - a*) = 0 per output block,  0 <= a_i, a*_i <= c_i,

solved over ``beta = a - a*`` with the complementarity ``a_i a*_i = 0`` held by
construction. Working pairs are chosen by maximal KKT violation; the bias comes
from free support vectors (midpoint of the KKT interval when none are free).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import InputError

DEFAULT_KKT_TOL = 1e-6
DEFAULT_FC_TOL = 1e-6
DEFAULT_RHO0 = 1.0
DEFAULT_RHO_MAX = 1e12

_VALID_KINDS = ("linear", "rbf", "poly")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    ``gamma`` scales rbf/poly; ``coef0`` is the polynomial offset (must be
    non-negative to keep the Gram matrix positive semidefinite); ``degree`` is 2
    or 3.
    """

    kind: str = "linear"
    gamma: float = 1.0
    coef0: float = 0.0
    degree: int = 2

    def __post_init__(self):
        if self.kind not in _VALID_KINDS:
            raise InputError(f"unknown kernel kind {self.kind!r}")
        if self.kind in ("rbf", "poly") and self.gamma <= 0.0:
            raise InputError("gamma must be positive")
        if self.kind == "poly":
            if self.degree not in (2, 3):
                raise InputError("polynomial degree must be 2 or 3")
            if self.coef0 < 0.0:
                raise InputError("coef0 must be non-negative")


def gram(xa: np.ndarray, xb: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Gram matrix K[i, j] = kernel(xa_i, xb_j)."""
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    if kernel.kind == "linear":
        return xa @ xb.T
    if kernel.kind == "rbf":
        sq = (
            (xa * xa).sum(axis=1)[:, None]
            + (xb * xb).sum(axis=1)[None, :]
            - 2.0 * xa @ xb.T
        )
        return np.exp(-kernel.gamma * np.maximum(sq, 0.0))
    return (kernel.gamma * (xa @ xb.T) + kernel.coef0) ** kernel.degree


@dataclass(frozen=True)
class SvrProblem:
    """Inputs, targets, per-sample weights and regression hyperparameters.

    For multi-output solves ``y`` has length ``2n`` (u block then v block) while
    ``weights`` stays length ``n`` and is duplicated internally.
    """

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    c_reg: float
    epsilon: float
    kernel: KernelSpec

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InputError("x must be (n, d) with n >= 2")
        if y.shape[0] not in (x.shape[0], 2 * x.shape[0]):
            raise InputError("y must have length n or 2n")
        if not np.all(np.isfinite(y)):
            raise InputError("targets must be finite")
        if w.shape[0] != x.shape[0] or np.any(w <= 0.0) or np.any(w > 1.0):
            raise InputError("weights must be n values in (0, 1]")
        if self.c_reg <= 0.0 or self.epsilon <= 0.0:
            raise InputError("c_reg and epsilon must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def multi_output(self) -> bool:
        return self.y.shape[0] == 2 * self.n


@dataclass(frozen=True)
class DualSolution:
    """Dual coefficients, per-block bias and solver diagnostics.

    ``alpha`` / ``alpha_star`` satisfy elementwise complementarity exactly;
    ``beta = alpha - alpha_star`` are the prediction coefficients, grouped in
    ``n_blocks`` consecutive blocks of ``block_size``.
    """

    alpha: np.ndarray
    alpha_star: np.ndarray
    bias: np.ndarray
    n_blocks: int
    block_size: int
    n_support: int
    objective: float
    kkt_residual: float
    converged: bool
    objective_trace: tuple[float, ...] = ()
    fc_schedule: tuple[tuple[float, float, float], ...] = ()
    fc_residuals: tuple[float, float] | None = None
    warnings: tuple[str, ...] = ()

    @property
    def beta(self) -> np.ndarray:
        return self.alpha - self.alpha_star


def _smo_core(kmat, y, caps, epsilon, groups, n_groups, tol, max_iter, beta, f,
              trace, trace_every):
    """Working-pair coordinate descent; shared by the numba and numpy paths.

    Pair selection is second order: i maximizes the KKT violation within its
    group, j maximizes the decrease of the two-variable subproblem. ``beta``
    and ``f = kmat @ beta`` are updated in place. Returns
    ``(kkt, n_iter, converged, n_trace)``.
    """
    n = y.shape[0]
    n_trace = 0
    it = 0
    kkt = np.inf
    converged = False
    while it < max_iter:
        best_gain = 0.0
        best_i = -1
        best_j = -1
        kkt = -np.inf
        for g in range(n_groups):
            max_up = -np.inf
            arg_up = -1
            for t in range(n):
                if groups[t] != g or caps[t] <= 1e-15:
                    continue
                if beta[t] < caps[t]:
                    up = y[t] - f[t] + (epsilon if beta[t] < 0.0 else -epsilon)
                    if up > max_up:
                        max_up = up
                        arg_up = t
            if arg_up < 0:
                continue
            i = arg_up
            kii = kmat[i, i]
            min_low = np.inf
            arg_j = -1
            gain_j = 0.0
            for t in range(n):
                if groups[t] != g or caps[t] <= 1e-15:
                    continue
                if beta[t] > -caps[t]:
                    low = y[t] - f[t] + (-epsilon if beta[t] > 0.0 else epsilon)
                    if low < min_low:
                        min_low = low
                    diff = max_up - low
                    if diff > tol and t != i:
                        a = kii + kmat[t, t] - 2.0 * kmat[i, t]
                        if a < 1e-12:
                            a = 1e-12
                        gain = diff * diff / a
                        if gain > gain_j:
                            gain_j = gain
                            arg_j = t
            if arg_j < 0:
                continue
            viol = max_up - min_low
            if viol > kkt:
                kkt = viol
            if gain_j > best_gain:
                best_gain = gain_j
                best_i = i
                best_j = arg_j
        if best_i < 0 or kkt <= tol:
            converged = kkt <= tol
            if kkt < 0.0:
                kkt = 0.0
            break

        i = best_i
        j = best_j
        a = kmat[i, i] + kmat[j, j] - 2.0 * kmat[i, j]
        if a < 1e-12:
            a = 1e-12
        up_i = y[i] - f[i] + (epsilon if beta[i] < 0.0 else -epsilon)
        low_j = y[j] - f[j] + (-epsilon if beta[j] > 0.0 else epsilon)
        t_star = (up_i - low_j) / a
        t_up = -beta[i] if beta[i] < 0.0 else caps[i] - beta[i]
        t_dn = beta[j] if beta[j] > 0.0 else beta[j] + caps[j]
        t_step = t_star
        if t_up < t_step:
            t_step = t_up
        if t_dn < t_step:
            t_step = t_dn
        if t_step <= 0.0:
            converged = False
            break
        beta[i] += t_step
        beta[j] -= t_step
        for t in range(n):
            f[t] += t_step * (kmat[i, t] - kmat[j, t])
        it += 1
        if trace_every > 0 and it % trace_every == 0 and n_trace < trace.shape[0]:
            obj = epsilon * np.abs(beta).sum()
            for t in range(n):
                obj += (0.5 * f[t] - y[t]) * beta[t]
            trace[n_trace] = obj
            n_trace += 1
    return kkt, it, converged, n_trace


try:  # pragma: no cover - exercised implicitly through the solver tests
    from numba import njit

    _smo_core_fast = njit(cache=True)(_smo_core)
except ImportError:  # pragma: no cover
    _smo_core_fast = None


def _smo(
    kmat: np.ndarray,
    y: np.ndarray,
    caps: np.ndarray,
    epsilon: float,
    groups: np.ndarray,
    tol: float,
    max_iter: int,
    beta0: np.ndarray | None = None,
    track_objective: bool = False,
) -> tuple[np.ndarray, np.ndarray, float, bool, list[float]]:
    """Grouped SMO over beta; one equality constraint per group.

    Returns ``(beta, bias, kkt_residual, converged, objective_trace)``. The
    objective trace, when requested, records the dual objective once per sweep
    of ``len(y)`` pair updates.
    """
    n = y.shape[0]
    kmat = np.ascontiguousarray(kmat, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    caps = np.ascontiguousarray(caps, dtype=np.float64)
    groups = np.ascontiguousarray(groups, dtype=np.int64)
    beta = np.zeros(n) if beta0 is None else beta0.astype(np.float64).copy()
    f = kmat @ beta if beta0 is not None else np.zeros(n)
    n_groups = int(groups.max()) + 1 if n else 1
    trace_every = n if track_objective else 0
    trace_buf = np.empty(max_iter // max(n, 1) + 2 if track_objective else 0)

    core = _smo_core_fast if _smo_core_fast is not None else _smo_core
    kkt, _, converged, n_trace = core(
        kmat, y, caps, epsilon, groups, n_groups, tol, max_iter, beta, f,
        trace_buf, trace_every,
    )

    bias = recover_bias(y - f, beta, caps, groups, epsilon)
    trace = list(trace_buf[:n_trace])
    if track_objective:
        trace.append(
            float(0.5 * beta @ f - y @ beta + epsilon * np.abs(beta).sum())
        )
    return beta, bias, float(kkt), bool(converged), trace


def recover_bias(
    resid: np.ndarray,
    beta: np.ndarray,
    caps: np.ndarray,
    groups: np.ndarray,
    epsilon: float,
) -> np.ndarray:
    """Per-group bias from the KKT conditions of the predictor residuals.

    ``resid`` must be ``y`` minus the bias-free predictions of the model the
    bias will live in (for penalized solves that is the plain kernel expansion,
    not the penalized one). Free support vectors pin the bias exactly; without
    any, the midpoint of the KKT interval is used.
    """
    n_groups = int(groups.max()) + 1 if groups.size else 1
    bias = np.empty(n_groups)
    movable = caps > 1e-15
    for g in range(n_groups):
        in_g = groups == g
        free_pos = in_g & (beta > 0.0) & (beta < caps)
        free_neg = in_g & (beta < 0.0) & (beta > -caps)
        cands = np.concatenate([resid[free_pos] - epsilon, resid[free_neg] + epsilon])
        if cands.size:
            bias[g] = cands.mean()
        else:
            up = resid + np.where(beta < 0.0, epsilon, -epsilon)
            low = resid + np.where(beta > 0.0, -epsilon, epsilon)
            hi = np.where(in_g & movable & (beta < caps), up, -math.inf).max()
            lo = np.where(in_g & movable & (beta > -caps), low, math.inf).min()
            if not math.isfinite(hi):
                hi = lo
            if not math.isfinite(lo):
                lo = hi
            bias[g] = 0.5 * (hi + lo)
    return bias


def _solution_from_beta(
    beta, bias, kkt, converged, trace, n_blocks, block_size, kmat, y, epsilon,
    fc_schedule=(), fc_residuals=None, warnings_=(),
) -> DualSolution:
    obj = float(0.5 * beta @ (kmat @ beta) - y @ beta + epsilon * np.abs(beta).sum())
    return DualSolution(
        alpha=np.maximum(beta, 0.0),
        alpha_star=np.maximum(-beta, 0.0),
        bias=np.asarray(bias, dtype=float),
        n_blocks=n_blocks,
        block_size=block_size,
        n_support=int(np.count_nonzero(beta)),
        objective=obj,
        kkt_residual=kkt,
        converged=converged,
        objective_trace=tuple(trace),
        fc_schedule=tuple(fc_schedule),
        fc_residuals=fc_residuals,
        warnings=tuple(warnings_),
    )


def _default_max_iter(n: int) -> int:
    return max(200_000, 500 * n)


def solve_wsvm(
    problem: SvrProblem,
    tol: float = DEFAULT_KKT_TOL,
    max_iter: int | None = None,
    track_objective: bool = False,
) -> DualSolution:
    """Fit a single-output weighted epsilon-SVR by SMO."""
    if problem.multi_output:
        raise InputError("solve_wsvm expects single-output targets")
    n = problem.n
    kmat = gram(problem.x, problem.x, problem.kernel)
    caps = problem.weights * problem.c_reg / n
    groups = np.zeros(n, dtype=int)
    max_iter = max_iter or _default_max_iter(n)
    beta, bias, kkt, conv, trace = _smo(
        kmat, problem.y, caps, problem.epsilon, groups, tol, max_iter,
        track_objective=track_objective,
    )
    warn = () if conv else ("smo did not reach the KKT tolerance; best iterate kept",)
    return _solution_from_beta(
        beta, bias, kkt, conv, trace, 1, n, kmat, problem.y, problem.epsilon,
        warnings_=warn,
    )


def _mo_parts(problem: SvrProblem):
    n = problem.n
    kmat = gram(problem.x, problem.x, problem.kernel)
    caps = np.tile(problem.weights, 2) * problem.c_reg / (2 * n)
    return n, kmat, caps


def solve_mo_wsvm(
    problem: SvrProblem,
    tol: float = DEFAULT_KKT_TOL,
    max_iter: int | None = None,
    track_objective: bool = False,
) -> DualSolution:
    """Fit the two-output stacked problem over the block-diagonal extended Gram.

    The extended Gram decouples the u and v blocks, so each block runs the same
    SMO as :func:`solve_wsvm` with the extended caps ``z_i * c_reg / (2n)``.
    """
    if not problem.multi_output:
        raise InputError("solve_mo_wsvm expects stacked 2n targets")
    n, kmat, caps = _mo_parts(problem)
    max_iter = max_iter or _default_max_iter(n)
    beta = np.empty(2 * n)
    bias = np.empty(2)
    kkts = []
    convs = []
    traces: list[float] = []
    for blk in range(2):
        sl = slice(blk * n, (blk + 1) * n)
        b_blk, bias_blk, kkt, conv, trace = _smo(
            kmat, problem.y[sl], caps[sl], problem.epsilon,
            np.zeros(n, dtype=int), tol, max_iter,
            track_objective=track_objective,
        )
        beta[sl] = b_blk
        bias[blk] = bias_blk[0]
        kkts.append(kkt)
        convs.append(conv)
        traces.extend(trace)
    big_k = _block_diag(kmat)
    conv = all(convs)
    warn = () if conv else ("smo did not reach the KKT tolerance; best iterate kept",)
    return _solution_from_beta(
        beta, bias, max(kkts), conv, traces, 2, n, big_k, problem.y,
        problem.epsilon, warnings_=warn,
    )


def _block_diag(kmat: np.ndarray) -> np.ndarray:
    n = kmat.shape[0]
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = kmat
    out[n:, n:] = kmat
    return out


@dataclass(frozen=True)
class FlowConstraintOps:
    """Forward-difference operators on a row-major vectorized M x N grid.

    ``delta_x`` differences along columns (+1 neighbor), ``delta_y`` along rows
    (+N neighbor); rows whose pair would cross the grid edge are zeroed, so a
    constant grid maps to exactly zero. The divergence-style compositions are
    ``delta_x u + delta_y v`` (the ``[I; I]`` operator) and
    ``delta_x u - delta_y v`` (the ``[I; -I]`` operator).
    """

    rows: int
    cols: int
    delta_x: sparse.csr_matrix
    delta_y: sparse.csr_matrix

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def composed(self, u_flat: np.ndarray, v_flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Apply both compositions to a vectorized field; returns (sum, diff)."""
        du = self.delta_x @ u_flat
        dv = self.delta_y @ v_flat
        return du + dv, du - dv


def flow_constraint_ops(rows: int, cols: int) -> FlowConstraintOps:
    """Build the sparse difference operators for an M x N grid."""
    if rows < 2 or cols < 2:
        raise InputError("grid must be at least 2x2")
    g = rows * cols
    idx = np.arange(g)
    col_of = idx % cols
    row_of = idx // cols

    keep_x = col_of < cols - 1
    dx = sparse.csr_matrix(
        (
            np.concatenate([-np.ones(keep_x.sum()), np.ones(keep_x.sum())]),
            (
                np.concatenate([idx[keep_x], idx[keep_x]]),
                np.concatenate([idx[keep_x], idx[keep_x] + 1]),
            ),
        ),
        shape=(g, g),
    )
    keep_y = row_of < rows - 1
    dy = sparse.csr_matrix(
        (
            np.concatenate([-np.ones(keep_y.sum()), np.ones(keep_y.sum())]),
            (
                np.concatenate([idx[keep_y], idx[keep_y]]),
                np.concatenate([idx[keep_y], idx[keep_y] + cols]),
            ),
        ),
        shape=(g, g),
    )
    return FlowConstraintOps(rows=rows, cols=cols, delta_x=dx, delta_y=dy)


def grid_coordinates(rows: int, cols: int) -> np.ndarray:
    """All pixel coordinates of an M x N grid, row-major, as (col, row) pairs."""
    jj, ii = np.meshgrid(np.arange(cols, dtype=float), np.arange(rows, dtype=float))
    return np.stack([jj.reshape(-1), ii.reshape(-1)], axis=1)


def solve_mo_wsvm_fc(
    problem: SvrProblem,
    ops: FlowConstraintOps,
    grid_coords: np.ndarray | None = None,
    tol: float = DEFAULT_KKT_TOL,
    fc_tol: float = DEFAULT_FC_TOL,
    rho0: float = DEFAULT_RHO0,
    rho_max: float = DEFAULT_RHO_MAX,
    max_iter: int | None = None,
) -> DualSolution:
    """Multi-output solve with escalating zero-divergence/zero-residual penalty.

    The extrapolated grid field is linear in ``beta`` (the bias is annihilated
    by the difference operators), so each constraint scalar is a
    quadratic ``beta' H beta``. The penalty weight starts at ``rho0`` and is
    multiplied by 10 until both scalars fall below ``fc_tol`` or ``rho_max`` is
    reached; each solve warm-starts from the previous one. The returned
    ``fc_schedule`` lists ``(rho, residual_sum, residual_diff)`` per step.
    """
    if not problem.multi_output:
        raise InputError("solve_mo_wsvm_fc expects stacked 2n targets")
    if grid_coords is None:
        grid_coords = grid_coordinates(ops.rows, ops.cols)
    if grid_coords.shape[0] != ops.n_cells:
        raise InputError("grid coordinates do not match the operator grid")
    n, kmat, caps = _mo_parts(problem)
    max_iter = max_iter or _default_max_iter(n)
    groups = np.repeat(np.arange(2), n)

    # The penalty rho * (||A bu + B bv||^2 + ||A bu - B bv||^2) expands to
    # 2 rho (||A bu||^2 + ||B bv||^2): the cross terms cancel, so the penalty
    # Hessian is block diagonal like the extended Gram itself.
    k_grid = gram(grid_coords, problem.x, problem.kernel)
    a_op = ops.delta_x @ k_grid
    b_op = ops.delta_y @ k_grid
    pen_u = a_op.T @ a_op
    pen_v = b_op.T @ b_op
    # Normalize the penalty to the kernel's magnitude at rho = 1; otherwise the
    # grid-summed Hessian dwarfs the Gram by orders of magnitude and the first
    # escalation steps are hopelessly ill-conditioned for pair descent. The
    # reported residuals always use the raw operators.
    pen_scale = float(np.trace(pen_u) + np.trace(pen_v))
    if pen_scale > 0.0:
        norm = 2.0 * max(float(np.trace(kmat)), 1e-300) / pen_scale
        pen_u = pen_u * norm
        pen_v = pen_v * norm

    k_mo = _block_diag(kmat)
    beta = np.zeros(2 * n)
    bias = np.zeros(2)
    schedule: list[tuple[float, float, float]] = []
    warnings_: list[str] = []
    rho = rho0
    kkt = math.inf
    conv = False
    res_sum = res_diff = math.inf
    while True:
        k_eff = k_mo.copy()
        k_eff[:n, :n] += (4.0 * rho) * pen_u
        k_eff[n:, n:] += (4.0 * rho) * pen_v
        beta, bias, kkt, conv, _ = _smo(
            k_eff, problem.y, caps, problem.epsilon, groups, tol, max_iter,
            beta0=beta,
        )
        grad_u = a_op @ beta[:n]
        grad_v = b_op @ beta[n:]
        res_sum = float(np.sum((grad_u + grad_v) ** 2))
        res_diff = float(np.sum((grad_u - grad_v) ** 2))
        schedule.append((rho, res_sum, res_diff))
        if res_sum <= fc_tol and res_diff <= fc_tol:
            break
        if rho >= rho_max:
            warnings_.append(
                f"rho_max reached with residuals ({res_sum:.3e}, {res_diff:.3e})"
            )
            break
        rho *= 10.0
    if not conv:
        warnings_.append("smo did not reach the KKT tolerance; best iterate kept")
    # The bias lives in the plain kernel expansion (the extrapolating predictor),
    # so recover it against the plain predictions; inside _smo it was measured
    # against the penalty-augmented kernel, whose per-sample gradient is not
    # negligible at large rho.
    bias = recover_bias(
        problem.y - k_mo @ beta, beta, caps, groups, problem.epsilon
    )
    return _solution_from_beta(
        beta, bias, kkt, conv, [], 2, n, k_mo, problem.y, problem.epsilon,
        fc_schedule=schedule, fc_residuals=(res_sum, res_diff), warnings_=warnings_,
    )


def predict(
    solution: DualSolution,
    kernel: KernelSpec,
    x_train: np.ndarray,
    x_query: np.ndarray,
) -> np.ndarray:
    """Evaluate f(x) = sum_i (a_i - a*_i) K(x_i, x) + b for each output block.

    Returns shape ``(m,)`` for single-output solutions and ``(m, n_blocks)``
    otherwise.
    """
    kq = gram(np.asarray(x_query, dtype=float), np.asarray(x_train, dtype=float), kernel)
    beta = solution.beta
    n = solution.block_size
    cols = [
        kq @ beta[blk * n : (blk + 1) * n] + solution.bias[blk]
        for blk in range(solution.n_blocks)
    ]
    if solution.n_blocks == 1:
        return cols[0]
    return np.stack(cols, axis=1)
