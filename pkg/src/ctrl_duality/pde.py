"""1-d finite-difference reference solvers used to validate the bounds.

Two backward parabolic problems:

* the semilinear counterparty equation
  ``u_t + (1/2) sigma^2 u_xx + c u^- = 0`` (Crank-Nicolson diffusion,
  lagged explicit reaction), and
* the 1-d worst-case volatility equation, where the diffusion
  coefficient switches between the volatility bounds by the sign of the
  second derivative; solved implicitly in log space with Howard policy
  iteration per time step.

Boundary rows either freeze the payoff value or impose zero second
derivative (linear continuation), which matches the asymptotics of the
payoffs exercised here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .bsde import UvmSpec
from .cva import CvaSpec
from .errors import ConfigError, NumericalError

MIN_HALF_WIDTH_STDS = 5.0
DEFAULT_HALF_WIDTH_STDS = 6.0


@dataclass(frozen=True)
class Grid1D:
    """Uniform space-time grid with per-side boundary treatment.

    ``bc_lo``/``bc_hi`` are ``"zero-gamma"`` (vanishing second
    derivative) or ``"payoff"`` (value frozen at the terminal condition).
    """

    lo: float
    hi: float
    n_space: int = 400
    n_time: int = 400
    bc_lo: str = "zero-gamma"
    bc_hi: str = "zero-gamma"

    def __post_init__(self):
        if self.n_space < 3:
            raise ConfigError("grid needs at least 3 space nodes")
        if self.n_time < 1:
            raise ConfigError("grid needs at least 1 time step")
        if not self.lo < self.hi:
            raise ConfigError("grid needs lo < hi")
        for bc in (self.bc_lo, self.bc_hi):
            if bc not in ("zero-gamma", "payoff"):
                raise ConfigError(f"unknown boundary condition {bc!r}")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_space)

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n_space - 1)


def _require_bracket(grid: Grid1D, center: float, std: float) -> None:
    if min(center - grid.lo, grid.hi - center) < MIN_HALF_WIDTH_STDS * std:
        raise ConfigError(
            f"grid must bracket the spot by >= {MIN_HALF_WIDTH_STDS} standard deviations"
        )


def _interp(nodes: np.ndarray, values: np.ndarray, x: float) -> float:
    return float(np.interp(x, nodes, values))


def default_cva_grid(spec: CvaSpec) -> Grid1D:
    if callable(spec.sigma):
        raise ConfigError("the reference solver needs a constant sigma")
    half = DEFAULT_HALF_WIDTH_STDS * float(spec.sigma) * np.sqrt(spec.horizon)
    return Grid1D(lo=spec.x0 - half, hi=spec.x0 + half)


def solve_cva_pde(spec: CvaSpec, grid: Grid1D | None = None) -> float:
    """u(0, x0) of the semilinear equation, on the report scale.

    Crank-Nicolson for the diffusion, the semilinear term ``c u^-``
    taken explicitly from the previous time level, backward from the
    payoff; the result is linearly interpolated to the spot.
    """
    if callable(spec.sigma):
        raise ConfigError("the reference solver needs a constant sigma")
    sigma = float(spec.sigma)
    if grid is None:
        grid = default_cva_grid(spec)
    _require_bracket(grid, spec.x0, sigma * np.sqrt(spec.horizon))
    x = grid.nodes
    m, h = grid.n_space, grid.h
    dt = spec.horizon / grid.n_time
    c = spec.intensity

    diff = 0.5 * sigma**2 / h**2
    interior = np.zeros(m, dtype=bool)
    interior[1:-1] = True

    # banded operators for (I -/+ dt/2 A), A the discrete diffusion
    upper = np.zeros(m)
    lower = np.zeros(m)
    mid = np.zeros(m)
    mid[1:-1] = -2.0 * diff
    upper[2:] = diff
    lower[:-2] = diff
    ab_impl = np.vstack([-0.5 * dt * upper, 1.0 - 0.5 * dt * mid, -0.5 * dt * lower])

    u = np.asarray(spec.payoff(x), dtype=float)
    g_bound = u.copy()
    for _ in range(grid.n_time):
        rhs = u.copy()
        rhs[1:-1] += 0.5 * dt * diff * (u[2:] - 2.0 * u[1:-1] + u[:-2])
        rhs += dt * c * np.maximum(-u, 0.0)  # lagged u^-
        if grid.bc_lo == "payoff":
            rhs[0] = g_bound[0]
        if grid.bc_hi == "payoff":
            rhs[-1] = g_bound[-1]
        u = solve_banded((1, 1), ab_impl, rhs)
        if not np.all(np.isfinite(u)) or np.abs(u).max() > 1e12 * (1.0 + np.abs(g_bound).max()):
            raise NumericalError("time stepping blew up; increase n_time")
    return spec.scale * _interp(x, u, spec.x0)


def default_bsb_grid(spec: UvmSpec, horizon: float = 1.0) -> Grid1D:
    half = DEFAULT_HALF_WIDTH_STDS * float(spec.sigma_hi[0]) * np.sqrt(horizon)
    y0 = float(np.log(spec.x0[0]))
    return Grid1D(lo=y0 - half, hi=y0 + half)


def _cell_average(fn, nodes: np.ndarray, h: float, sub: int = 33) -> np.ndarray:
    """Average the payoff over one cell per node (tames kinks and jumps)."""
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    samples = nodes[:, None] + offs[None, :] * h
    return np.asarray(fn(samples), dtype=float).mean(axis=1)


def solve_bsb_1d(
    spec: UvmSpec,
    grid: Grid1D | None = None,
    horizon: float = 1.0,
    max_sweeps: int = 10,
    rannacher_steps: int = 2,
    with_sweeps: bool = False,
):
    """Worst-case price u(0, x0) for a 1-asset uncertain-volatility model.

    Log-space theta scheme (implicit start, Crank-Nicolson after), with
    Howard policy iteration selecting sigma per node from the sign of
    the discrete ``x^2 u_xx`` at each sweep; stops when the policy is
    stable or after ``max_sweeps`` sweeps (then warns and keeps the last
    iterate).  The payoff is cell-averaged once at maturity.
    """
    if spec.dim != 1:
        raise ConfigError("the reference solver is 1-d")
    if grid is None:
        grid = default_bsb_grid(spec, horizon)
    s_lo, s_hi = float(spec.sigma_lo[0]), float(spec.sigma_hi[0])
    y0 = float(np.log(spec.x0[0]))
    _require_bracket(grid, y0, s_hi * np.sqrt(horizon))
    y = grid.nodes
    m, h = grid.n_space, grid.h
    dt = horizon / grid.n_time

    u = _cell_average(lambda z: spec.payoff.fn(np.exp(z)), y, h)
    lo2, hi2 = s_lo**2, s_hi**2

    def w_of(v: np.ndarray) -> np.ndarray:
        """Discrete x^2 u_xx: second minus first derivative in log space."""
        w = np.zeros(m)
        w[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / h**2 - (v[2:] - v[:-2]) / (2.0 * h)
        return w

    def apply_L(v: np.ndarray, s2: np.ndarray) -> np.ndarray:
        out = np.zeros(m)
        out[1:-1] = 0.5 * s2[1:-1] * (
            (v[2:] - 2.0 * v[1:-1] + v[:-2]) / h**2 - (v[2:] - v[:-2]) / (2.0 * h)
        )
        return out

    def implicit_solve(rhs: np.ndarray, s2: np.ndarray, theta: float) -> np.ndarray:
        coef = 0.5 * theta * dt * s2
        up = np.zeros(m)
        lo_ = np.zeros(m)
        mid = np.ones(m)
        up[2:] = -coef[1:-1] * (1.0 / h**2 - 1.0 / (2.0 * h))
        lo_[:-2] = -coef[1:-1] * (1.0 / h**2 + 1.0 / (2.0 * h))
        mid[1:-1] = 1.0 + coef[1:-1] * 2.0 / h**2
        ab = np.vstack([up, mid, lo_])
        return solve_banded((1, 1), ab, rhs)

    g_bound = u.copy()
    total_sweeps = 0
    for step in range(grid.n_time):
        theta = 1.0 if step < rannacher_steps else 0.5
        policy = np.where(w_of(u) >= 0.0, hi2, lo2)
        rhs = u + (1.0 - theta) * dt * apply_L(u, policy)
        if grid.bc_lo == "payoff":
            rhs[0] = g_bound[0]
        if grid.bc_hi == "payoff":
            rhs[-1] = g_bound[-1]
        u_new = u
        for sweep in range(max_sweeps):
            total_sweeps += 1
            u_new = implicit_solve(rhs, policy, theta)
            new_policy = np.where(w_of(u_new) >= 0.0, hi2, lo2)
            if np.array_equal(new_policy, policy):
                break
            policy = new_policy
        else:
            warnings.warn("policy iteration did not settle; keeping the last iterate")
        u = u_new
    value = _interp(y, u, y0)
    return (value, total_sweeps) if with_sweeps else value
