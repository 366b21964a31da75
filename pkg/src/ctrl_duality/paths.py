"""Seeded Brownian noise and controlled-diffusion simulators.

Every estimator in the package draws from one noise substrate: a batch
of independent standard normals keyed by (seed, path, step, factor)
through a counter-based generator.  Path ``p`` of a batch is a pure
function of ``(seed, p)`` — independent of the batch size and of
evaluation order — so lower bounds, dual bounds and brute-force checks
can share draws (common random numbers) and re-correlate the same
normals under different candidate controls.

Simulators cover the three dynamics used by the applications:

* multiplicative ("uvm") dynamics, advanced by exact per-step lognormal
  updates (no Euler error);
* additive toy dynamics ``dX = a0 dt + a1 dB`` for the American example;
* generic ``dX = mu dt + sigma dB`` via Euler-Maruyama.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .discretize import ControlBox, TimeGrid
from .errors import ConfigError

_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53

DEFAULT_PAYOFF_CAP = 1e6


def _keyed_normals(seed: int, n_paths: int, n_steps: int, n_factors: int) -> np.ndarray:
    """iid N(0,1) draws, one per (path, step, factor) slot.

    Philox is counter based: slot (p, i, j) always consumes word
    ``p*n_steps*n_factors + i*n_factors + j`` of the keyed stream, so the
    draws for path p never depend on how many paths are requested.
    Normals come from the inverse CDF of the 53-bit uniform, which keeps
    the slot -> draw mapping one-to-one.
    """
    total = n_paths * n_steps * n_factors
    raw = np.random.Philox(key=int(seed)).random_raw(total)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
    return ndtri(u).reshape(n_paths, n_steps, n_factors)


def _correlation_factor(corr: np.ndarray) -> np.ndarray:
    """Lower-triangular (or eigen) factor L with L @ L.T = corr."""
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        # positive semi-definite but singular (e.g. |rho| = 1)
        w, v = np.linalg.eigh(corr)
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class NoiseBatch:
    """Correlated Brownian increments shared by all estimators.

    ``normals`` holds the raw independent draws; ``increments`` holds
    ``L @ z * sqrt(dt)`` with L the factor of ``corr``.  Batches are
    immutable; simulators never mutate them.
    """

    seed: int
    grid: TimeGrid
    corr: np.ndarray       # (m, m) correlation applied to `increments`
    normals: np.ndarray    # (N, n, m) independent N(0,1)
    increments: np.ndarray  # (N, n, m) correlated, in sqrt(years)

    @property
    def n_paths(self) -> int:
        return self.normals.shape[0]

    @property
    def factors(self) -> int:
        return self.normals.shape[2]

    def brownian(self) -> np.ndarray:
        """Correlated Brownian path values W_{t_i}, shape (N, n+1, m)."""
        N, n, m = self.increments.shape
        w = np.zeros((N, n + 1, m))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w


def sample_noise(
    grid: TimeGrid,
    factors: int,
    corr: np.ndarray | None = None,
    n_paths: int = 1,
    seed: int = 0,
) -> NoiseBatch:
    """Draw a reproducible batch of correlated Brownian increments.

    Parameters
    ----------
    grid : TimeGrid
        Partition whose steps the increments live on.
    factors : int
        Number of Brownian factors m.
    corr : (m, m) array, optional
        Correlation of the increments; identity when omitted.  Must be
        symmetric positive semi-definite with unit diagonal.
    n_paths, seed : int
        Batch size and generator key.  Identical (seed, grid, factors,
        n_paths) give bit-identical output.
    """
    if factors < 1:
        raise ConfigError("factors must be >= 1")
    if corr is None:
        corr = np.eye(factors)
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (factors, factors):
        raise ConfigError(f"correlation must be {(factors, factors)}, got {corr.shape}")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ConfigError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ConfigError("correlation matrix must have unit diagonal")
    w = np.linalg.eigvalsh(corr)
    if w[0] < -1e-10:
        raise ConfigError(
            f"correlation matrix is not positive semi-definite (eigenvalue {w[0]:.3e})"
        )
    z = _keyed_normals(seed, n_paths, grid.n_steps, factors)
    L = _correlation_factor(corr)
    dw = np.einsum("pif,gf->pig", z, L) * np.sqrt(grid.dt)[None, :, None]
    return NoiseBatch(seed=int(seed), grid=grid, corr=corr, normals=z, increments=dw)


@dataclass(frozen=True)
class Payoff:
    """Payoff descriptor.

    ``kind`` is one of ``"european"`` (g on the terminal state), ``"path"``
    (g on the whole discrete trajectory) or ``"american"`` (g evaluated at
    any grid instant).  ``fn`` receives states of shape ``(..., d)`` for
    european/american payoffs and trajectories ``(..., n+1, d)`` for path
    payoffs; it must broadcast.  Values are clamped to ``[-cap, cap]``
    (polynomial-growth cut-off; the default is inactive at desk scale).
    """

    kind: str
    fn: Callable[[np.ndarray], np.ndarray]
    cap: float = DEFAULT_PAYOFF_CAP

    def __post_init__(self):
        if self.kind not in ("european", "path", "american"):
            raise ConfigError(f"unknown payoff kind {self.kind!r}")
        if not self.cap > 0.0:
            raise ConfigError("payoff cap must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.fn(x), -self.cap, self.cap)


@dataclass(frozen=True)
class ModelSpec:
    """Controlled-diffusion problem description.

    ``kind`` selects the simulator:

    * ``"uvm"`` — ``dX^j = sigma^j X^j dW^j`` with the control carrying
      per-asset volatilities (first ``dim`` coordinates) and, when
      ``corr_in_control``, the step correlation as the last coordinate
      (two assets only).  ``rho_fixed`` gives the correlation otherwise.
    * ``"toy"`` — ``dX = a0 dt + a1 dB`` (1-d), control = (a0, a1).
    * ``"general"`` — Euler-Maruyama with the ``mu``/``sigma`` callbacks.

    ``mu``, ``sigma``, ``running`` (reward f) and ``rate`` (discount r)
    are deterministic functions ``(t, a, x) -> value`` where ``a`` has
    shape ``(..., k)`` and ``x`` shape ``(..., d)``; they must broadcast
    over leading axes.
    """

    dim: int
    x0: np.ndarray
    box: ControlBox
    payoff: Payoff
    kind: str = "general"
    factors: int | None = None
    mu: Callable | None = None
    sigma: Callable | None = None
    running: Callable | None = None
    rate: Callable | None = None
    rho_fixed: np.ndarray | None = None
    corr_in_control: bool = False

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        if x0.size != self.dim:
            raise ConfigError("x0 length must equal dim")
        if self.kind not in ("uvm", "toy", "general"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.factors is None:
            object.__setattr__(self, "factors", self.dim)
        if self.kind == "uvm":
            if self.corr_in_control and self.dim != 2:
                raise ConfigError("controlled correlation is supported for 2 assets only")
            want = self.dim + (1 if self.corr_in_control else 0)
            if self.box.dim != want:
                raise ConfigError(
                    f"uvm control box must have {want} coordinates, got {self.box.dim}"
                )
        if self.kind == "toy":
            if self.dim != 1 or self.box.dim != 2:
                raise ConfigError("toy dynamics are 1-d with control (a0, a1)")


def _uvm_correlated_increments(model: ModelSpec, controls: np.ndarray, batch: NoiseBatch,
                               idx: np.ndarray | None) -> np.ndarray:
    """Per-step increments sqrt(dt) * L(rho_step) @ z, shape (M, n, d).

    Re-correlates the batch's raw normals with the control's step
    correlation, so candidate controls within one path share draws.
    """
    z = batch.normals if idx is None else batch.normals[idx]
    d = model.dim
    if model.corr_in_control:
        rho = np.clip(controls[..., d], -1.0, 1.0)
        dw = np.empty_like(z)
        dw[..., 0] = z[..., 0]
        dw[..., 1] = rho * z[..., 0] + np.sqrt(1.0 - rho**2) * z[..., 1]
    elif model.rho_fixed is not None:
        L = _correlation_factor(np.asarray(model.rho_fixed, dtype=float))
        dw = np.einsum("pif,gf->pig", z, L)
    else:
        dw = z
    return dw * np.sqrt(batch.grid.dt)[None, :, None]


def evolve_reference(model: ModelSpec, sigma_hat: np.ndarray, batch: NoiseBatch) -> np.ndarray:
    """Exact lognormal reference paths X^j_{t_i} = X0^j exp(-s_j^2 t_i/2 + s_j W^j_{t_i}).

    ``batch`` must carry the reference correlation; the update is exact,
    not an Euler step.  Returns states of shape (N, n+1, d).
    """
    if model.kind != "uvm":
        raise ConfigError("evolve_reference requires a multiplicative (uvm) model")
    s = np.atleast_1d(np.asarray(sigma_hat, dtype=float))
    if s.size != model.dim:
        raise ConfigError("sigma_hat length must equal the model dimension")
    w = batch.brownian()
    t = batch.grid.times[None, :, None]
    logx = -0.5 * s[None, None, :] ** 2 * t + s[None, None, :] * w
    return model.x0[None, None, :] * np.exp(logx)


def evolve_controlled_batch(
    model: ModelSpec,
    controls: np.ndarray,
    batch: NoiseBatch,
    idx: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate one trajectory per control row against the batch's noise.

    ``controls`` has shape (M, n, k); row m is applied to noise path
    ``idx[m]`` (or path m when ``idx`` is None).  Deterministic given
    (controls, batch, idx).
    """
    controls = np.asarray(controls, dtype=float)
    grid = batch.grid
    dt = grid.dt
    if controls.ndim != 3 or controls.shape[1] != grid.n_steps:
        raise ConfigError("controls must have shape (M, n_steps, k)")
    if model.kind == "uvm":
        sig = controls[..., : model.dim]
        dw = _uvm_correlated_increments(model, controls, batch, idx)
        log_inc = -0.5 * sig**2 * dt[None, :, None] + sig * dw
        M = controls.shape[0]
        x = np.empty((M, grid.n_steps + 1, model.dim))
        x[:, 0, :] = model.x0
        x[:, 1:, :] = model.x0 * np.exp(np.cumsum(log_inc, axis=1))
        return x
    z = batch.normals if idx is None else batch.normals[idx]
    db = z * np.sqrt(dt)[None, :, None]
    if model.kind == "toy":
        inc = controls[..., 0] * dt[None, :] + controls[..., 1] * db[..., 0]
        M = controls.shape[0]
        x = np.empty((M, grid.n_steps + 1, 1))
        x[:, 0, 0] = model.x0[0]
        x[:, 1:, 0] = model.x0[0] + np.cumsum(inc, axis=1)
        return x
    # generic Euler-Maruyama
    M = controls.shape[0]
    x = np.empty((M, grid.n_steps + 1, model.dim))
    x[:, 0, :] = model.x0
    for i in range(grid.n_steps):
        t, a, xi = grid.times[i], controls[:, i], x[:, i]
        drift = model.mu(t, a, xi) if model.mu is not None else 0.0
        if model.sigma is not None:
            sv = np.asarray(model.sigma(t, a, xi), dtype=float)
            if sv.ndim == 2:  # state-independent (d, m)
                diff = db[:, i] @ sv.T
            else:
                diff = np.einsum("pdm,pm->pd", sv, db[:, i])
        else:
            diff = 0.0
        x[:, i + 1] = xi + np.asarray(drift) * dt[i] + diff
    return x


def evolve_controlled(
    model: ModelSpec,
    controls: np.ndarray,
    batch: NoiseBatch,
    path_index: int = 0,
) -> np.ndarray:
    """One trajectory under a single control path, shape (n+1, d).

    The control must stay inside the model's box; constant controls
    reproduce :func:`evolve_reference` on the same batch exactly.
    """
    a = np.asarray(controls, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    for step in a:
        if not model.box.contains(step):
            raise ConfigError(f"control {step} is outside the control box")
    return evolve_controlled_batch(model, a[None], batch, idx=np.array([path_index]))[0]


def step_state(
    model: ModelSpec,
    t: float,
    x: np.ndarray,
    ctrl: np.ndarray,
    z: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Advance states one step under per-path controls (feedback simulation).

    ``x`` is (N, d), ``ctrl`` (N, k), ``z`` (N, m) raw independent
    normals.  Used when the control depends on the running state and the
    trajectory cannot be formed in one vectorized pass.
    """
    sdt = np.sqrt(dt)
    if model.kind == "uvm":
        sig = ctrl[:, : model.dim]
        if model.corr_in_control:
            rho = np.clip(ctrl[:, model.dim], -1.0, 1.0)
            dw = np.empty_like(z)
            dw[:, 0] = z[:, 0]
            dw[:, 1] = rho * z[:, 0] + np.sqrt(1.0 - rho**2) * z[:, 1]
        elif model.rho_fixed is not None:
            dw = z @ _correlation_factor(np.asarray(model.rho_fixed, dtype=float)).T
        else:
            dw = z
        return x * np.exp(-0.5 * sig**2 * dt + sig * dw * sdt)
    if model.kind == "toy":
        return x + ctrl[:, :1] * dt + ctrl[:, 1:2] * z[:, :1] * sdt
    drift = model.mu(t, ctrl, x) if model.mu is not None else 0.0
    if model.sigma is not None:
        sv = np.asarray(model.sigma(t, ctrl, x), dtype=float)
        if sv.ndim == 2:
            diff = (z * sdt) @ sv.T
        else:
            diff = np.einsum("pdm,pm->pd", sv, z * sdt)
    else:
        diff = 0.0
    return x + np.asarray(drift) * dt + diff


def discount_factors(
    model: ModelSpec,
    controls: np.ndarray,
    states: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """Per-instant factors R_{t_i} = exp(-sum_{j<i} r(t_j, a_j, X_{t_j}) dt_j).

    Left-endpoint (Ito) evaluation of the rate on each step, matching the
    piecewise-constant control convention.  ``controls`` may be (n, k) or
    (M, n, k); ``states`` (n+1, d) or (M, n+1, d).  R_{t_0} = 1 always.
    """
    single = states.ndim == 2
    a = np.asarray(controls, dtype=float)
    x = np.asarray(states, dtype=float)
    if single:
        a, x = a[None], x[None]
    M, n = x.shape[0], grid.n_steps
    r_out = np.ones((M, n + 1))
    if model.rate is not None:
        rates = np.empty((M, n))
        for i in range(n):
            rates[:, i] = model.rate(grid.times[i], a[:, i], x[:, i])
        np.exp(-np.cumsum(rates * grid.dt[None, :], axis=1), out=r_out[:, 1:])
    return r_out[0] if single else r_out


def dump_paths_csv(states: np.ndarray, grid: TimeGrid, dest) -> None:
    """Debug dump of trajectories as CSV rows (path, time, asset, value)."""
    x = np.asarray(states, dtype=float)
    if x.ndim == 2:
        x = x[None]
    writer = csv.writer(dest)
    writer.writerow(["path", "time", "asset", "value"])
    for p in range(x.shape[0]):
        for i, t in enumerate(grid.times):
            for j in range(x.shape[2]):
                writer.writerow([p, f"{t:.12g}", j, f"{x[p, i, j]:.12g}"])
