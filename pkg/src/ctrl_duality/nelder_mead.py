"""Batched Nelder-Mead simplex search with box projection.

One independent simplex per batch row, all advanced in lockstep; the
objective is evaluated on whole sub-batches.  This is what makes the
per-path deterministic maximizations of the dual estimator affordable:
thousands of small searches become a few hundred vectorized objective
evaluations.

The objective receives ``(rows, points)`` where ``rows`` are the batch
indices still being worked on, so each row can address its own data
(its own Monte-Carlo path).  Points are projected onto the box before
every evaluation, so degenerate coordinates (lo == hi) are handled for
free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Objective = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class NmResult:
    x: np.ndarray          # (N, D) best point per row
    value: np.ndarray      # (N,) objective at x
    iterations: np.ndarray  # (N,) iterations spent per row
    converged: np.ndarray  # (N,) bool


def nelder_mead_batch(
    fn: Objective,
    x0: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    max_iter: int | None = None,
    f_tol: float = 1e-9,
    initial_step: float = 0.10,
) -> NmResult:
    """Minimize ``fn`` row-wise over the box ``[lo, hi]^D``.

    Parameters
    ----------
    fn : callable
        ``fn(rows, X) -> values`` with ``X`` of shape (M, D); must be
        deterministic per row.
    x0 : (N, D) array
        One start per row; projected onto the box.
    lo, hi : (D,) arrays
        Box bounds; equal entries pin that coordinate.
    max_iter : int, optional
        Iteration cap per row (default ``60 * D + 60``).
    f_tol : float
        Stop a row once its simplex value spread falls below
        ``f_tol * (1 + |best|)``.
    initial_step : float
        Initial simplex offset as a fraction of the box width.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
    N, D = x0.shape
    if max_iter is None:
        max_iter = 60 * D + 60

    width = hi - lo
    step = initial_step * width

    # simplex (N, D+1, D): vertex 0 at x0, vertex j+1 offset along axis j
    simplex = np.repeat(x0[:, None, :], D + 1, axis=1)
    for j in range(D):
        if step[j] == 0.0:
            continue
        moved = simplex[:, j + 1, j] + step[j]
        flip = moved > hi[j]
        simplex[:, j + 1, j] = np.where(flip, simplex[:, j + 1, j] - step[j], moved)
    simplex = np.clip(simplex, lo, hi)

    rows = np.arange(N)
    values = np.empty((N, D + 1))
    for v in range(D + 1):
        values[:, v] = fn(rows, simplex[:, v])

    iters = np.zeros(N, dtype=int)
    done = np.zeros(N, dtype=bool)

    for _ in range(max_iter):
        order = np.argsort(values, axis=1)
        values = np.take_along_axis(values, order, axis=1)
        simplex = np.take_along_axis(simplex, order[:, :, None], axis=1)

        best = values[:, 0]
        spread = values[:, -1] - best
        done |= spread <= f_tol * (1.0 + np.abs(best))
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        iters[act] += 1

        s_act = simplex[act]
        v_act = values[act]
        centroid = s_act[:, :-1].mean(axis=1)
        worst = s_act[:, -1]

        xr = np.clip(centroid + (centroid - worst), lo, hi)
        fr = fn(act, xr)

        f_best = v_act[:, 0]
        f_second = v_act[:, -2]
        f_worst = v_act[:, -1]

        m_expand = fr < f_best
        m_reflect = (~m_expand) & (fr < f_second)
        m_out = (~m_expand) & (~m_reflect) & (fr < f_worst)
        m_in = (~m_expand) & (~m_reflect) & (~m_out)

        new_worst_x = np.where(m_reflect[:, None], xr, worst)
        new_worst_f = np.where(m_reflect, fr, f_worst)

        if np.any(m_expand):
            k = np.flatnonzero(m_expand)
            xe = np.clip(centroid[k] + 2.0 * (xr[k] - centroid[k]), lo, hi)
            fe = fn(act[k], xe)
            take_e = fe < fr[k]
            new_worst_x[k] = np.where(take_e[:, None], xe, xr[k])
            new_worst_f[k] = np.where(take_e, fe, fr[k])

        shrink = np.zeros(act.size, dtype=bool)
        m_contract = m_out | m_in
        if np.any(m_contract):
            k = np.flatnonzero(m_contract)
            inner = m_in[k]
            xc = np.where(
                inner[:, None],
                centroid[k] + 0.5 * (worst[k] - centroid[k]),
                centroid[k] + 0.5 * (xr[k] - centroid[k]),
            )
            xc = np.clip(xc, lo, hi)
            fc = fn(act[k], xc)
            ok = np.where(inner, fc < f_worst[k], fc <= fr[k])
            new_worst_x[k] = np.where(ok[:, None], xc, new_worst_x[k])
            new_worst_f[k] = np.where(ok, fc, new_worst_f[k])
            shrink[k] = ~ok

        keep = ~shrink
        if np.any(keep):
            k = np.flatnonzero(keep)
            s_act[k, -1] = new_worst_x[k]
            v_act[k, -1] = new_worst_f[k]
        if np.any(shrink):
            k = np.flatnonzero(shrink)
            s_act[k, 1:] = s_act[k, :1] + 0.5 * (s_act[k, 1:] - s_act[k, :1])
            s_act[k, 1:] = np.clip(s_act[k, 1:], lo, hi)
            flat = s_act[k, 1:].reshape(-1, D)
            rows_rep = np.repeat(act[k], D)
            v_act[k, 1:] = fn(rows_rep, flat).reshape(k.size, D)

        simplex[act] = s_act
        values[act] = v_act

    order = np.argsort(values, axis=1)
    values = np.take_along_axis(values, order, axis=1)
    simplex = np.take_along_axis(simplex, order[:, :, None], axis=1)
    return NmResult(
        x=simplex[:, 0].copy(),
        value=values[:, 0].copy(),
        iterations=iters,
        converged=done.copy(),
    )
