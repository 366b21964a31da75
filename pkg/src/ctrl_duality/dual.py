"""Forward lower bound and pathwise-maximized dual upper bound.

The two estimators bracket the value of the control problem:

* ``lower_bound`` simulates the state under a sub-optimal feedback rule
  (the Hamiltonian argmax from the backward scheme) and averages the
  discounted reward — unbiased for the policy value, hence a lower bound.
* ``dual_upper_bound`` maximizes, path by path, the penalized objective

      Phi(a) = R_T g(X_T^a) + sum R f dt - sum R phi' sigma dB

  over deterministic piecewise-constant controls and averages the maxima.
  Swapping expectation and supremum biases the estimate upward, so any
  martingale candidate phi gives an upper bound.

Per-path maximization runs either over an explicit finite control net
(exhaustive, for brute-force verification) or over the continuous box by
batched direct search; the continuous maximum dominates the net maximum,
preserving the upper-bound direction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .discretize import ControlNet, enumerate_control_paths
from .errors import ConfigError
from .nelder_mead import nelder_mead_batch
from .paths import ModelSpec, NoiseBatch, evolve_controlled_batch, discount_factors, step_state

_RNG_SALT = 2654435769  # start-sampling stream, distinct from path noise


@dataclass(frozen=True)
class Estimate:
    """Monte-Carlo estimate with its sampling error and search statistics."""

    mean: float
    stderr: float
    n_paths: int
    seed: int
    seconds: float
    method: str = ""
    iterations: float = 0.0   # mean optimizer iterations per path
    restarts: int = 0
    frac_improved: float = 0.0  # fraction of paths where the search beat the seeded candidates

    def __post_init__(self):
        if not np.isfinite(self.mean):
            raise ConfigError("estimate mean is not finite")
        if self.stderr < 0:
            raise ConfigError("estimate stderr must be >= 0")


def _estimate(values: np.ndarray, seed: int, seconds: float, method: str, **stats) -> Estimate:
    values = np.asarray(values, dtype=float)
    n = values.size
    stderr = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return Estimate(
        mean=float(values.mean()), stderr=stderr, n_paths=n, seed=seed,
        seconds=seconds, method=method, **stats,
    )


@dataclass
class PathObjective:
    """Deterministic per-path objective Phi^{a, phi}.

    Binds the model, the martingale candidate ``phi(t, x) -> (N, d)``
    (``None`` means zero) and a noise batch.  ``values`` evaluates one
    control row per requested path; the result is a pure function of the
    control given (batch, idx).

    For multiplicative dynamics the martingale term uses the equivalent
    sum of ``phi · dX`` increments; additive toy dynamics use
    ``phi a1 dB``; general dynamics use ``R phi' sigma dB``.
    """

    model: ModelSpec
    batch: NoiseBatch
    phi: Callable | None = None

    @property
    def mode(self) -> str:
        return self.model.payoff.kind

    def values(self, controls: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
        model, grid = self.model, self.batch.grid
        n, dt, times = grid.n_steps, grid.dt, grid.times
        controls = np.asarray(controls, dtype=float)
        x = evolve_controlled_batch(model, controls, self.batch, idx)
        r = discount_factors(model, controls, x, grid)

        reward = 0.0
        if model.running is not None:
            reward = np.zeros(x.shape[0])
            for i in range(n):
                reward += r[:, i] * model.running(times[i], controls[:, i], x[:, i]) * dt[i]

        mart_inc = np.zeros((x.shape[0], n))
        if self.phi is not None:
            z = self.batch.normals if idx is None else self.batch.normals[idx]
            db = z * np.sqrt(dt)[None, :, None]
            for i in range(n):
                pv = np.atleast_2d(self.phi(times[i], x[:, i]))
                if model.kind == "uvm":
                    mart_inc[:, i] = np.einsum("pd,pd->p", pv, x[:, i + 1] - x[:, i])
                elif model.kind == "toy":
                    mart_inc[:, i] = pv[:, 0] * controls[:, i, 1] * db[:, i, 0]
                else:
                    sv = np.asarray(model.sigma(times[i], controls[:, i], x[:, i]), dtype=float)
                    if sv.ndim == 2:
                        flow = db[:, i] @ sv.T
                    else:
                        flow = np.einsum("pdm,pm->pd", sv, db[:, i])
                    mart_inc[:, i] = r[:, i] * np.einsum("pd,pd->p", pv, flow)

        if self.mode == "american":
            running_mart = np.zeros((x.shape[0], n + 1))
            np.cumsum(mart_inc, axis=1, out=running_mart[:, 1:])
            exercise = model.payoff(np.swapaxes(x, 0, 1)).T  # g at every instant
            return np.max(exercise - running_mart, axis=1)
        if self.mode == "path":
            if model.kind == "uvm":
                raise ConfigError(
                    "path-dependent payoffs need state-independent coefficients"
                )
            g = model.payoff(x)
        else:
            g = model.payoff(x[:, n])
        return r[:, n] * g + reward - mart_inc.sum(axis=1)


def pathwise_objective(obj: PathObjective, a: np.ndarray, path_index: int = 0) -> float:
    """Phi^{a, phi} for a single control path against one noise path."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return float(obj.values(a[None], idx=np.array([path_index]))[0])


def _expand_blocks(points: np.ndarray, n_steps: int, blocks: int) -> np.ndarray:
    """(M, blocks, k) block controls -> (M, n_steps, k) piecewise-constant."""
    sizes = [len(chunk) for chunk in np.array_split(np.arange(n_steps), blocks)]
    return np.repeat(points, sizes, axis=1)


def _polytope_starts(obj: PathObjective, idx: np.ndarray, blocks: int, n_random: int = 16):
    """Deterministic start points: mid-box, upper corner, best-of-random."""
    box = obj.model.box
    k, nb, m = box.dim, blocks, idx.size
    dim = nb * k
    lo = np.tile(box.lo, nb)
    hi = np.tile(box.hi, nb)
    mid = np.tile(box.midpoint(), (m, nb, 1))
    top = np.tile(box.hi, (m, nb, 1))
    rng = np.random.default_rng([int(obj.batch.seed) & 0x7FFFFFFF, _RNG_SALT])
    sample = lo + rng.random((n_random, m, dim)) * (hi - lo)
    best_v = np.full(m, -np.inf)
    best_x = np.empty((m, dim))
    for cand in sample:
        v = obj.values(_expand_blocks(cand.reshape(m, nb, k), obj.batch.grid.n_steps, nb), idx)
        take = v > best_v
        best_v = np.where(take, v, best_v)
        best_x[take] = cand[take]
    starts = [mid.reshape(m, dim), top.reshape(m, dim), best_x]
    return starts, lo, hi


def _maximize_polytope(
    obj: PathObjective,
    idx: np.ndarray,
    restarts: int = 3,
    blocks: int | None = None,
    candidates: list[np.ndarray] | None = None,
    max_iter: int | None = None,
    f_tol: float = 1e-8,
):
    """Batched direct-search maximization over the continuous box.

    Returns per-path best values, best (expanded) controls and search
    statistics.  Candidate control paths (e.g. the feedback path) are
    always evaluated and participate in the final maximum.
    """
    grid = obj.batch.grid
    n, k = grid.n_steps, obj.model.box.dim
    nb = blocks or n
    starts, lo, hi = _polytope_starts(obj, idx, nb)
    starts = starts[: max(1, restarts)]

    def negated(rows, pts):
        ctrl = _expand_blocks(pts.reshape(rows.size, nb, k), n, nb)
        return -obj.values(ctrl, idx=idx[rows])

    best_v = np.full(idx.size, -np.inf)
    best_c = np.empty((idx.size, n, k))
    total_iters = np.zeros(idx.size)

    def fold(v: np.ndarray, ctrl: np.ndarray) -> None:
        nonlocal best_v
        take = v > best_v
        best_v = np.where(take, v, best_v)
        best_c[take] = ctrl[take]

    for s in starts:
        ctrl = _expand_blocks(s.reshape(idx.size, nb, k), n, nb)
        fold(obj.values(ctrl, idx), ctrl)
    if candidates:
        for cand in candidates:
            cand = np.asarray(cand, dtype=float)
            fold(obj.values(cand, idx), cand)
    seed_v = best_v.copy()

    for s in starts:
        res = nelder_mead_batch(negated, s, lo, hi, max_iter=max_iter, f_tol=f_tol)
        total_iters += res.iterations
        fold(-res.value, _expand_blocks(res.x.reshape(idx.size, nb, k), n, nb))

    stats = {
        "iterations": float(total_iters.mean()),
        "restarts": len(starts),
        "frac_improved": float(np.mean(best_v > seed_v + 1e-12)),
    }
    return best_v, best_c, stats


def _maximize_enumerate(obj: PathObjective, idx: np.ndarray, net: ControlNet, cap: int):
    """Exact maximum over the finite control-path family D_h."""
    all_paths = enumerate_control_paths(net, obj.batch.grid, cap)
    best_v = np.full(idx.size, -np.inf)
    best_c = np.empty((idx.size,) + all_paths.shape[1:])
    for ctrl in all_paths:  # lexicographic order: strict > keeps the first maximizer
        v = obj.values(np.broadcast_to(ctrl, (idx.size,) + ctrl.shape), idx)
        take = v > best_v
        best_v = np.where(take, v, best_v)
        best_c[take] = ctrl
    return best_v, best_c


def maximize_path(
    obj: PathObjective,
    path_index: int = 0,
    method: str = "polytope",
    net: ControlNet | None = None,
    cap: int = 100_000,
    restarts: int = 3,
    blocks: int | None = None,
    candidates: list[np.ndarray] | None = None,
    max_iter: int | None = None,
):
    """Maximize the pathwise objective for one noise path.

    ``enumerate`` needs a net and returns the exact maximum over the
    finite family (ties to the lexicographically first path);
    ``polytope`` runs the batched simplex search from ``restarts``
    deterministic starts over the continuous box and never returns less
    than the best seeded candidate.
    """
    idx = np.array([path_index])
    if method == "enumerate":
        if net is None:
            raise ConfigError("enumerate mode needs a control net")
        v, c = _maximize_enumerate(obj, idx, net, cap)
        return float(v[0]), c[0]
    if method != "polytope":
        raise ConfigError(f"unknown maximization method {method!r}")
    cands = None
    if candidates is not None:
        cands = [np.asarray(c, dtype=float)[None] for c in candidates]
    v, c, _ = _maximize_polytope(
        obj, idx, restarts=restarts, blocks=blocks, candidates=cands, max_iter=max_iter
    )
    return float(v[0]), c[0]


def simulate_feedback(model: ModelSpec, rule: Callable, batch: NoiseBatch):
    """States and controls under a state-feedback rule, one step at a time.

    ``rule(t, x)`` returns per-path controls (N, k).  Also accumulates
    the policy value R_T g(X_T) + sum R f dt, which is what the lower
    bound averages.
    """
    grid = batch.grid
    n, dt, times = grid.n_steps, grid.dt, grid.times
    N = batch.n_paths
    x = np.tile(model.x0, (N, 1))
    states = np.empty((N, n + 1, model.dim))
    states[:, 0] = x
    controls = np.empty((N, n, model.box.dim))
    disc = np.ones(N)
    value = np.zeros(N)
    for i in range(n):
        ctrl = np.atleast_2d(rule(times[i], x))
        controls[:, i] = ctrl
        if model.running is not None:
            value += disc * model.running(times[i], ctrl, x) * dt[i]
        if model.rate is not None:
            disc *= np.exp(-model.rate(times[i], ctrl, x) * dt[i])
        x = step_state(model, times[i], x, ctrl, batch.normals[:, i], dt[i])
        states[:, i + 1] = x
    value += disc * model.payoff(x)
    return states, controls, value


def lower_bound(model: ModelSpec, feedback: Callable, batch2: NoiseBatch) -> Estimate:
    """Policy value of the feedback rule: unbiased, hence a lower bound.

    ``batch2`` must be independent of the batch that produced the
    feedback tables (distinct seed).
    """
    if feedback is None:
        raise ConfigError("lower_bound needs a feedback control rule")
    if model.payoff.kind != "european":
        raise ConfigError("the forward lower bound expects a european payoff")
    t0 = time.perf_counter()
    _, _, value = simulate_feedback(model, feedback, batch2)
    return _estimate(value, batch2.seed, time.perf_counter() - t0, "feedback-forward")


def dual_upper_bound(
    model: ModelSpec,
    phi: Callable | None,
    batch2: NoiseBatch,
    method: str = "polytope",
    net: ControlNet | None = None,
    cap: int = 100_000,
    restarts: int = 3,
    blocks: int | None = None,
    candidate_controls: list[np.ndarray] | None = None,
    max_iter: int | None = None,
) -> Estimate:
    """Mean over paths of the per-path maximum of Phi^{a, phi}.

    ``candidate_controls`` are (N, n, k) control arrays (one row per
    path) that are always evaluated alongside the search, e.g. the
    feedback path.
    """
    t0 = time.perf_counter()
    obj = PathObjective(model=model, batch=batch2, phi=phi)
    idx = np.arange(batch2.n_paths)
    if method == "enumerate":
        if net is None:
            raise ConfigError("enumerate mode needs a control net")
        values, _ = _maximize_enumerate(obj, idx, net, cap)
        stats = {}
    elif method == "polytope":
        values, _, stats = _maximize_polytope(
            obj, idx, restarts=restarts, blocks=blocks,
            candidates=candidate_controls, max_iter=max_iter,
        )
    else:
        raise ConfigError(f"unknown maximization method {method!r}")
    return _estimate(
        values, batch2.seed, time.perf_counter() - t0, f"dual-{method}", **stats
    )


def american_dual(
    model: ModelSpec,
    phi: Callable | None,
    batch2: NoiseBatch,
    method: str = "polytope",
    **kwargs,
) -> Estimate:
    """Dual bound with the running maximum over exercise instants.

    Requires the additive toy dynamics and an ``american`` payoff; the
    inner objective takes the best grid instant of g(X) minus the running
    martingale sum before maximizing over controls.
    """
    if model.kind != "toy":
        raise ConfigError("the American dual is defined for the additive toy dynamics")
    if model.payoff.kind != "american":
        raise ConfigError("american_dual needs an american payoff")
    return dual_upper_bound(model, phi, batch2, method=method, **kwargs)
