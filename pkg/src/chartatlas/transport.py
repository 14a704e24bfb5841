"""Entropic optimal transport between equal-size point sets.

Plans use unit marginals: every row and column of a plan sums to 1. Rows
index target cloud points, columns index parametric samples, so
``C[i, j] = |phi(v_j) - x_i|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp


class TransportError(FloatingPointError):
    pass


@dataclass
class TransportPlan:
    plan: np.ndarray
    converged: bool
    iterations: int
    marginal_residual: float
    f: np.ndarray
    g: np.ndarray
    eps: float

    @property
    def n(self) -> int:
        return self.plan.shape[0]


@dataclass
class Assignment:
    """``perm[j]`` is the row (cloud point) matched to column (sample) ``j``."""

    perm: np.ndarray
    cost: float

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``C[i, j] = |y_j - x_i|^2`` from coordinate differences, without the cancellation of the expanded form."""
    return cdist(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), "sqeuclidean")


def _check_cost(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise TransportError(f"cost matrix must be square and non-empty, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise TransportError("cost matrix has non-finite entries")
    if np.any(C < 0):
        raise TransportError("cost matrix has negative entries")
    return C


def _log_step(C, f, g, eps):
    f = -eps * logsumexp((g[None, :] - C) / eps, axis=1)
    g = -eps * logsumexp((f[:, None] - C) / eps, axis=0)
    return f, g


def _kernel(C, f, g, eps):
    return np.exp((f[:, None] + g[None, :] - C) / eps)


def _sinkhorn_stage(C, f, g, eps, max_iters, tol, absorb_threshold):
    n = C.shape[0]
    K = (f[:, None] + g[None, :] - C) / eps
    colsum = None
    if np.max(K) <= absorb_threshold:
        np.exp(K, out=K)
        colsum = K.sum(axis=0)
    if colsum is None or np.min(colsum) < 1e-200:
        f, g = _log_step(C, f, g, eps)
        K = _kernel(C, f, g, eps)
    else:
        g = g - eps * np.log(colsum)
        K /= colsum
    hi, lo = np.exp(absorb_threshold), np.exp(-absorb_threshold)
    u = np.ones(n)
    v = np.ones(n)
    Kv = K.sum(axis=1)
    residual = float(np.max(np.abs(Kv - 1.0)))
    it = 1
    while residual >= tol and it < max_iters:
        u = 1.0 / Kv
        v = 1.0 / (K.T @ u)
        it += 1
        if not (np.isfinite(u.sum()) and np.isfinite(v.sum())):
            f, g = _log_step(C, f, g, eps)
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise TransportError("Sinkhorn potentials became non-finite")
            K = _kernel(C, f, g, eps)
            u = np.ones(n)
            v = np.ones(n)
        elif max(u.max(), v.max()) > hi or min(u.min(), v.min()) < lo:
            f = f + eps * np.log(u)
            g = g + eps * np.log(v)
            K = _kernel(C, f, g, eps)
            u = np.ones(n)
            v = np.ones(n)
        # columns are exact after the v update; rows are measured on the next K v
        Kv = K @ v
        residual = float(np.max(np.abs(u * Kv - 1.0)))
    f = f + eps * np.log(u)
    g = g + eps * np.log(v)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise TransportError("Sinkhorn potentials became non-finite")
    return f, g, it


def _dual(C, f, g, eps):
    # trial points may overflow to -inf, which the line search rejects
    with np.errstate(over="ignore"):
        return f.sum() + g.sum() - eps * np.exp((f[:, None] + g[None, :] - C) / eps).sum()


def _newton_polish(C, f, g, eps, max_iters, tol):
    """Newton ascent on the entropic dual, for plans Sinkhorn mixes too slowly.

    Weakly coupled blocks (near-permutation plans at small eps) contract at a
    rate close to 1 under Sinkhorn; a Newton step fixes them in a few steps.
    The gauge direction ``(f + t, g - t)`` is removed by pinning ``g[-1]``.
    """
    n = C.shape[0]
    it = 0

    def residual(P):
        return max(np.max(np.abs(P.sum(axis=1) - 1.0)), np.max(np.abs(P.sum(axis=0) - 1.0)))

    while it < max_iters:
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        r = P.sum(axis=1)
        c = P.sum(axis=0)
        res = residual(P)
        if res < tol:
            break
        H = np.block([[np.diag(r), P], [P.T, np.diag(c)]]) / eps
        grad = np.concatenate([1.0 - r, 1.0 - c])
        step = np.zeros(2 * n)
        step[:-1] = np.linalg.lstsq(H[:-1, :-1], grad[:-1], rcond=None)[0]
        it += 1
        fn, gn = f + step[:n], g + step[n:]
        # near the optimum the dual is flat to rounding, so a full step that
        # shrinks the residual is taken without consulting the line search
        with np.errstate(over="ignore", invalid="ignore"):
            trial = residual(np.exp((fn[:, None] + gn[None, :] - C) / eps))
        if trial < res:
            f, g = fn, gn
            continue
        base = _dual(C, f, g, eps)
        slope = grad @ step
        t = 0.5
        while t > 1e-12:
            fn = f + t * step[:n]
            gn = g + t * step[n:]
            if _dual(C, fn, gn, eps) >= base + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        f, g = fn, gn
    return f, g, it


def sinkhorn(
    C,
    eps: float = 1e-3,
    max_iters: int = 500,
    tol: float = 1e-6,
    init: Optional[tuple[np.ndarray, np.ndarray]] = None,
    absorb_threshold: float = 30.0,
    scaling: float = 0.5,
    newton_max_n: int = 256,
) -> TransportPlan:
    """Minimize ``<P, C> - eps * H(P)`` over unit-marginal bi-stochastic ``P``.

    Stabilized Sinkhorn: dual potentials ``f, g`` carry the bulk of the
    scaling, and the kernel ``exp((f + g - C) / eps)`` is rebuilt whenever the
    residual scalings leave ``exp(+-absorb_threshold)``. A stage whose
    starting kernel would overflow or underflow opens with a log-domain
    sweep, so stale warm-start potentials are safe.

    Without ``init`` the solve is annealed: eps starts at the cost spread and
    shrinks by ``scaling`` per stage. Cold iterations at small eps would
    otherwise need on the order of ``exp(spread / eps)`` sweeps to move the
    potentials into place. If the last stage stalls and ``n <= newton_max_n``
    the remaining budget goes to Newton steps on the dual. ``max_iters``
    bounds the total count of sweeps and Newton steps.
    """
    C = _check_cost(C)
    if not eps > 0:
        raise TransportError(f"eps must be positive, got {eps}")
    n = C.shape[0]
    schedule = [eps]
    if init is not None:
        f = np.array(init[0], dtype=np.float64)
        g = np.array(init[1], dtype=np.float64)
        if f.shape != (n,) or g.shape != (n,) or not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            init = None
    if init is None:
        f = np.zeros(n)
        g = np.zeros(n)
        e = float(C.max() - C.min())
        while e > eps and 0 < scaling < 1:
            schedule.insert(-1, e)
            e *= scaling

    newton = n <= newton_max_n
    used = 0
    for k, e in enumerate(schedule):
        final = k == len(schedule) - 1
        remaining = max(1, max_iters - used)
        if not final:
            budget = max(1, min(50, remaining // 4))
        elif newton:
            budget = max(1, min(200, remaining - min(50, remaining // 2)))
        else:
            budget = remaining
        stage_tol = tol if final else max(tol, 1e-3)
        f, g, it = _sinkhorn_stage(C, f, g, e, budget, stage_tol, absorb_threshold)
        used += it
    if newton and used < max_iters:
        f, g, it = _newton_polish(C, f, g, eps, max_iters - used, tol)
        used += it

    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    residual = float(max(np.max(np.abs(P.sum(axis=1) - 1.0)), np.max(np.abs(P.sum(axis=0) - 1.0))))
    return TransportPlan(P, residual < tol, used, residual, f, g, eps)


def plan_cost(P, C) -> float:
    P = P.plan if isinstance(P, TransportPlan) else np.asarray(P)
    return float(np.sum(P * np.asarray(C)))


def entropy(P) -> float:
    """``-sum P log P`` with ``0 log 0 = 0``."""
    P = P.plan if isinstance(P, TransportPlan) else np.asarray(P, dtype=np.float64)
    if np.any(P < 0):
        raise TransportError("transport plan has negative entries")
    nz = P[P > 0]
    return float(-np.sum(nz * np.log(nz)))


def exact_assignment(C) -> Assignment:
    """Minimum-cost permutation (Hungarian-type solver)."""
    C = np.asarray(C, dtype=np.float64)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(C.shape[1], dtype=np.int64)
    perm[cols] = rows
    return Assignment(perm, float(C[rows, cols].sum()))


def project_to_permutation(P, cost=None) -> Assignment:
    """Nearest permutation: the max entry of each row, with collisions settled by max-weight matching.

    Matched entries smaller than ``n * machine_eps * max(P)`` cannot change the
    matched mass in double precision, so the solver picks among them
    arbitrarily. Those pairs are re-matched among themselves by ``cost`` when
    given (by ``-log P`` otherwise); the matched mass is unchanged to rounding.

    ``cost`` of the returned assignment is the matched plan mass.
    """
    P = P.plan if isinstance(P, TransportPlan) else np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    best = np.argmax(P, axis=1)
    perm = np.empty(n, dtype=np.int64)
    if len(np.unique(best)) == n:
        perm[best] = np.arange(n)
    else:
        rows, cols = linear_sum_assignment(-P)
        perm[cols] = rows
        tiny = P[rows, cols] < n * np.finfo(np.float64).eps * P.max()
        if np.count_nonzero(tiny) > 1:
            fr, fc = rows[tiny], cols[tiny]
            if cost is None:
                sub = -np.log(np.maximum(P[np.ix_(fr, fc)], np.finfo(np.float64).tiny))
            else:
                sub = np.asarray(cost, dtype=np.float64)[np.ix_(fr, fc)]
            r2, c2 = linear_sum_assignment(sub)
            perm[fc[c2]] = fr[r2]
    return Assignment(perm, float(P[perm, np.arange(n)].sum()))


def assignment_cost(C, perm) -> float:
    C = np.asarray(C)
    return float(C[np.asarray(perm), np.arange(C.shape[1])].sum())
