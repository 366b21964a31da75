"""Backward second-order BSDE scheme for uncertain-volatility pricing.

Given reference lognormal paths, the scheme regresses likelihood-ratio
weighted responses step by step backward in time, producing

* ``y0`` — the scheme's value estimate at time 0,
* per-step delta estimates (the dual martingale candidate), and
* per-step gamma estimates, whose Hamiltonian argmax is the sub-optimal
  feedback control used by the forward lower bound.

The weights are the score derivatives of the one-step lognormal
transition: with ``U^j = sum_k inv(rho)_{jk} dW^k / dt``,

    Z^j: E[Y U^j] / (s_j X^j),
    Gamma^{jk}: E[Y (U^j U^k - inv(rho)_{jk}/dt - s_j U^j 1_{j=k})]
                / (s_j s_k X^j X^k),

with X taken at the regression time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .discretize import ControlBox, TimeGrid
from .errors import ConfigError
from .paths import ModelSpec, NoiseBatch, Payoff, evolve_reference
from .regress import (
    DEFAULT_RIDGE,
    BasisSpec,
    RegressedFn,
    constant_fn,
    fit_many,
    from_text,
    to_text,
)

PSD_TOL = 1e-12


def _as_vec(v, d: int, name: str) -> np.ndarray:
    out = np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()
    return out


@dataclass(frozen=True)
class UvmSpec:
    """Uncertain volatility model: per-asset vol bounds, correlation bounds.

    ``rho_lo``/``rho_hi`` (two assets) put the off-diagonal correlation in
    the control; ``rho_fixed`` freezes it instead.  ``sigma_hat`` and
    ``rho_hat`` are the reference dynamics used to generate regression
    paths; both default to the box midpoint.
    """

    dim: int
    x0: np.ndarray
    sigma_lo: np.ndarray
    sigma_hi: np.ndarray
    payoff: Payoff
    rho_lo: float | None = None
    rho_hi: float | None = None
    rho_fixed: np.ndarray | None = None
    sigma_hat: np.ndarray | None = None
    rho_hat: np.ndarray | None = None

    def __post_init__(self):
        d = self.dim
        object.__setattr__(self, "x0", _as_vec(self.x0, d, "x0"))
        object.__setattr__(self, "sigma_lo", _as_vec(self.sigma_lo, d, "sigma_lo"))
        object.__setattr__(self, "sigma_hi", _as_vec(self.sigma_hi, d, "sigma_hi"))
        if np.any(self.sigma_lo < 0) or np.any(self.sigma_lo > self.sigma_hi):
            raise ConfigError("need 0 <= sigma_lo <= sigma_hi per asset")
        if self.sigma_hat is None:
            object.__setattr__(self, "sigma_hat", 0.5 * (self.sigma_lo + self.sigma_hi))
        else:
            object.__setattr__(self, "sigma_hat", _as_vec(self.sigma_hat, d, "sigma_hat"))
        if np.any(self.sigma_hat < self.sigma_lo) or np.any(self.sigma_hat > self.sigma_hi):
            raise ConfigError("sigma_hat must lie inside [sigma_lo, sigma_hi]")

        if self.corr_varies:
            if d != 2:
                raise ConfigError("correlation bounds are supported for 2 assets only")
            if self.rho_fixed is not None:
                raise ConfigError("give either rho bounds or rho_fixed, not both")
            if not (-1.0 <= self.rho_lo <= self.rho_hi <= 1.0):
                raise ConfigError("need -1 <= rho_lo <= rho_hi <= 1")
        elif (self.rho_lo is None) != (self.rho_hi is None):
            raise ConfigError("rho_lo and rho_hi must be given together")
        if self.rho_fixed is not None:
            rf = np.asarray(self.rho_fixed, dtype=float)
            if rf.shape != (d, d):
                raise ConfigError(f"rho_fixed must be {(d, d)}")
            object.__setattr__(self, "rho_fixed", rf)

        if self.rho_hat is None:
            if self.corr_varies:
                mid = 0.5 * (self.rho_lo + self.rho_hi)
                rh = np.array([[1.0, mid], [mid, 1.0]])
            elif self.rho_fixed is not None:
                rh = self.rho_fixed
            else:
                rh = np.eye(d)
            object.__setattr__(self, "rho_hat", rh)
        else:
            object.__setattr__(self, "rho_hat", np.asarray(self.rho_hat, dtype=float))
        if np.linalg.eigvalsh(self.rho_hat)[0] < -PSD_TOL:
            raise ConfigError("rho_hat is not positive semi-definite")

    @property
    def corr_varies(self) -> bool:
        return self.rho_lo is not None and self.rho_hi is not None

    def control_box(self) -> ControlBox:
        """Box over (sigma_1..sigma_d [, rho]) with the PSD feasibility test."""
        if not self.corr_varies:
            return ControlBox(self.sigma_lo, self.sigma_hi)
        lo = np.append(self.sigma_lo, self.rho_lo)
        hi = np.append(self.sigma_hi, self.rho_hi)

        def feasible(point: np.ndarray) -> bool:
            rho = point[-1]
            corr = np.array([[1.0, rho], [rho, 1.0]])
            return bool(np.linalg.eigvalsh(corr)[0] >= -PSD_TOL)

        return ControlBox(lo, hi, feasible=feasible)

    def to_model(self) -> ModelSpec:
        return ModelSpec(
            dim=self.dim,
            x0=self.x0,
            box=self.control_box(),
            payoff=self.payoff,
            kind="uvm",
            rho_fixed=None if (self.corr_varies or self.dim == 1) else self.rho_fixed,
            corr_in_control=self.corr_varies,
        )


def _hamiltonian_d1(spec: UvmSpec, x: np.ndarray, g: np.ndarray):
    w = x[:, 0] ** 2 * g[:, 0, 0]
    lo, hi = spec.sigma_lo[0], spec.sigma_hi[0]
    v_lo, v_hi = 0.5 * lo * lo * w, 0.5 * hi * hi * w
    take_hi = v_hi > v_lo  # ties break toward the smaller volatility
    H = np.where(take_hi, v_hi, v_lo)
    ctrl = np.where(take_hi, hi, lo)[:, None]
    return H, ctrl


def _hamiltonian_d2(spec: UvmSpec, x: np.ndarray, g: np.ndarray):
    a = x[:, 0] ** 2 * g[:, 0, 0]
    b = x[:, 1] ** 2 * g[:, 1, 1]
    c = x[:, 0] * x[:, 1] * g[:, 0, 1]
    l1, h1 = spec.sigma_lo[0], spec.sigma_hi[0]
    l2, h2 = spec.sigma_lo[1], spec.sigma_hi[1]
    if spec.corr_varies:
        rhos = [spec.rho_lo, spec.rho_hi] if spec.rho_lo != spec.rho_hi else [spec.rho_lo]
    else:
        rho_mat = spec.rho_fixed if spec.rho_fixed is not None else np.eye(2)
        rhos = [float(rho_mat[0, 1])]
    n = x.shape[0]

    def edge_s2(s1, rho):
        # interior vertex of the quadratic along the s1-edge; only a max if b < 0
        out = np.full(n, l2)
        np.divide(-rho * c * s1, b, out=out, where=b < 0)
        return np.clip(out, l2, h2)

    def edge_s1(s2, rho):
        out = np.full(n, l1)
        np.divide(-rho * c * s2, a, out=out, where=a < 0)
        return np.clip(out, l1, h1)

    best_v = None
    best = [None, None, None]
    for rho in rhos:
        cands = [
            (np.full(n, l1), np.full(n, l2)),
            (np.full(n, l1), np.full(n, h2)),
            (np.full(n, h1), np.full(n, l2)),
            (np.full(n, h1), np.full(n, h2)),
            (np.full(n, l1), edge_s2(l1, rho)),
            (np.full(n, h1), edge_s2(h1, rho)),
            (edge_s1(l2, rho), np.full(n, l2)),
            (edge_s1(h2, rho), np.full(n, h2)),
        ]
        for s1, s2 in cands:
            v = 0.5 * (a * s1 * s1 + b * s2 * s2) + rho * c * s1 * s2
            if best_v is None:
                best_v = v
                best = [s1.copy(), s2.copy(), np.full(n, rho)]
                continue
            rv = np.full(n, rho)
            lex = (s1 < best[0]) | (
                (s1 == best[0]) & ((s2 < best[1]) | ((s2 == best[1]) & (rv < best[2])))
            )
            take = (v > best_v) | ((v == best_v) & lex)
            best_v = np.where(take, v, best_v)
            best[0] = np.where(take, s1, best[0])
            best[1] = np.where(take, s2, best[1])
            best[2] = np.where(take, rv, best[2])
    cols = best[:3] if spec.corr_varies else best[:2]
    return best_v, np.column_stack(cols)


def _hamiltonian_grid(spec: UvmSpec, x: np.ndarray, g: np.ndarray, points_per_axis: int):
    """Projected grid search for d > 2 (exact candidate mode unsupported)."""
    d = spec.dim
    rho = spec.rho_fixed if spec.rho_fixed is not None else np.eye(d)
    q = np.einsum("nj,nk,njk,jk->njk", x, x, g, rho, optimize=True)
    axes = [np.linspace(spec.sigma_lo[j], spec.sigma_hi[j], points_per_axis) for j in range(d)]
    from itertools import product as _product

    best_v = np.full(x.shape[0], -np.inf)
    best_s = np.zeros((x.shape[0], d))
    for cand in _product(*axes):  # lexicographic: strict improvement keeps lex-smallest ties
        s = np.asarray(cand)
        v = 0.5 * np.einsum("njk,j,k->n", q, s, s)
        take = v > best_v
        if np.any(take):
            best_v = np.where(take, v, best_v)
            best_s[take] = s
    return best_v, best_s


def hamiltonian_batch(
    spec: UvmSpec, x: np.ndarray, gamma: np.ndarray, points_per_axis: int = 11
):
    """Vectorized H(x, gamma) = 1/2 max over the box of sum rho s_j s_k x_j x_k g_jk.

    ``x`` is (N, d) and ``gamma`` (N, d, d) symmetric.  Returns values
    (N,) and argmax controls (N, k).  For one or two assets the maximum
    is exact (endpoints plus interior quadratic vertices; the objective
    is affine in rho so rho sits at a bound); ties break toward the
    lexicographically smallest control.  For d > 2 a projected grid
    search with ``points_per_axis`` per coordinate is used instead.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = np.asarray(gamma, dtype=float)
    if g.ndim == 2:
        g = g[None]
    if spec.dim == 1:
        return _hamiltonian_d1(spec, x, g)
    if spec.dim == 2:
        return _hamiltonian_d2(spec, x, g)
    return _hamiltonian_grid(spec, x, g, points_per_axis)


def hamiltonian(spec: UvmSpec, x: np.ndarray, gamma: np.ndarray):
    """Scalar wrapper around :func:`hamiltonian_batch`; gamma must be symmetric."""
    g = np.asarray(gamma, dtype=float)
    g = np.atleast_2d(g)
    if not np.allclose(g, g.T, atol=1e-12):
        raise ConfigError("gamma must be symmetric")
    H, ctrl = hamiltonian_batch(spec, np.atleast_1d(x)[None, :], g[None])
    return float(H[0]), ctrl[0]


@dataclass
class BsdeSolution:
    """Output of the backward sweep.

    ``z_fns[i][j]`` and ``gamma_fns[i]`` (a dict keyed by (j, k), j<=k)
    are the regressions fitted at time ``t_i`` for i = 0..n-1.  Gamma
    evaluations are clamped to the empirical quantile window recorded
    during the sweep before entering any Hamiltonian; ``h_corr_abs`` and
    ``h_scale`` record, per step, the largest Hamiltonian correction in
    the value recursion and its natural scale (for the degenerate-box
    cancellation check).
    """

    spec: UvmSpec
    grid: TimeGrid
    basis: BasisSpec
    y0: float
    y0_stderr: float
    z_fns: list
    gamma_fns: list
    clamp_lo: np.ndarray  # (n, d, d)
    clamp_hi: np.ndarray
    h_corr_abs: np.ndarray  # (n,)
    h_scale: np.ndarray
    feedback_tables: bool = True

    def z_at(self, i: int, x: np.ndarray) -> np.ndarray:
        """Delta estimate at step i, states (N, d) -> (N, d)."""
        x = np.atleast_2d(x)
        return np.column_stack([fn(x) for fn in self.z_fns[i]])

    def gamma_at(self, i: int, x: np.ndarray) -> np.ndarray:
        """Clamped gamma estimate at step i, states (N, d) -> (N, d, d)."""
        x = np.atleast_2d(x)
        d = self.spec.dim
        g = np.empty((x.shape[0], d, d))
        for (j, k), fn in self.gamma_fns[i].items():
            vals = np.clip(fn(x), self.clamp_lo[i, j, k], self.clamp_hi[i, j, k])
            g[:, j, k] = vals
            g[:, k, j] = vals
        return g

    def phi(self) -> Callable:
        """Martingale candidate: phi(t, x) = Z-hat at the step containing t."""

        def evaluate(t: float, x: np.ndarray) -> np.ndarray:
            return self.z_at(self.grid.interval_of(t), x)

        return evaluate

    def feedback_rule(self) -> Callable:
        """Sub-optimal control rule: argmax of H at the current state."""

        def rule(t: float, x: np.ndarray) -> np.ndarray:
            i = self.grid.interval_of(t)
            _, ctrl = hamiltonian_batch(self.spec, x, self.gamma_at(i, x))
            return ctrl

        return rule

    def save(self, dest) -> None:
        """Plain-text serialization, one RegressedFn record per (step, component)."""
        times = " ".join(f"{t:.17g}" for t in self.grid.times)
        dest.write("bsdesolution v1\n")
        dest.write(f"y0 {self.y0:.17g}\ny0_stderr {self.y0_stderr:.17g}\n")
        dest.write(f"times {times}\n")
        n = self.grid.n_steps
        for i in range(n):
            for (j, k) in self.gamma_fns[i]:
                dest.write(
                    f"clamp {i} {j} {k} {self.clamp_lo[i, j, k]:.17g} "
                    f"{self.clamp_hi[i, j, k]:.17g}\n"
                )
        for i in range(n):
            for j, fn in enumerate(self.z_fns[i]):
                dest.write(f"# step {i} z {j}\n")
                dest.write(to_text(fn))
            for (j, k), fn in self.gamma_fns[i].items():
                dest.write(f"# step {i} gamma {j} {k}\n")
                dest.write(to_text(fn))

    @classmethod
    def load(cls, src, spec: UvmSpec) -> "BsdeSolution":
        lines = src.read().splitlines()
        if not lines or lines[0].split()[0] != "bsdesolution":
            raise ConfigError("not a bsdesolution record")
        y0 = y0_stderr = 0.0
        times = None
        clamps = []
        records: list[tuple[str, str]] = []
        label = None
        buf: list[str] = []
        for line in lines[1:]:
            if line.startswith("# "):
                if label is not None:
                    records.append((label, "\n".join(buf)))
                label, buf = line[2:].strip(), []
            elif label is not None:
                if line.strip():
                    buf.append(line)
            elif line.startswith("y0 "):
                y0 = float(line.split()[1])
            elif line.startswith("y0_stderr "):
                y0_stderr = float(line.split()[1])
            elif line.startswith("times "):
                times = np.array([float(v) for v in line.split()[1:]])
            elif line.startswith("clamp "):
                clamps.append(line.split()[1:])
        if label is not None:
            records.append((label, "\n".join(buf)))
        if times is None:
            raise ConfigError("bsdesolution record is missing the time grid")
        grid = TimeGrid(times)
        n, d = grid.n_steps, spec.dim
        z_fns = [[None] * d for _ in range(n)]
        gamma_fns = [dict() for _ in range(n)]
        basis = None
        for lab, text in records:
            tok = lab.split()
            fn = from_text(text)
            basis = basis or fn.basis
            if tok[2] == "z":
                z_fns[int(tok[1])][int(tok[3])] = fn
            else:
                gamma_fns[int(tok[1])][(int(tok[3]), int(tok[4]))] = fn
        clamp_lo = np.full((n, d, d), -np.inf)
        clamp_hi = np.full((n, d, d), np.inf)
        for i, j, k, lo, hi in clamps:
            i, j, k = int(i), int(j), int(k)
            clamp_lo[i, j, k] = clamp_lo[i, k, j] = float(lo)
            clamp_hi[i, j, k] = clamp_hi[i, k, j] = float(hi)
        return cls(
            spec=spec, grid=grid, basis=basis, y0=y0, y0_stderr=y0_stderr,
            z_fns=z_fns, gamma_fns=gamma_fns, clamp_lo=clamp_lo, clamp_hi=clamp_hi,
            h_corr_abs=np.zeros(n), h_scale=np.zeros(n),
        )


def backward_sweep(
    spec: UvmSpec,
    batch: NoiseBatch,
    basis: BasisSpec,
    ridge: float = DEFAULT_RIDGE,
    clamp_quantiles: tuple[float, float] = (0.001, 0.999),
) -> BsdeSolution:
    """Run the backward scheme on reference paths from ``batch``.

    The batch must have been generated with the spec's reference
    correlation ``rho_hat``.  Conditional expectations use ``basis`` at
    every step; at time 0 all paths share the spot, so plain averages
    replace the degenerate regression.  Returns the solution with y0 the
    time-0 value estimate.
    """
    d = spec.dim
    if np.any(spec.sigma_hat <= 0.0):
        raise ConfigError("sigma_hat must be positive in every coordinate")
    if batch.factors != d:
        raise ConfigError("batch factor count must equal the asset count")
    grid = batch.grid
    n, dt = grid.n_steps, grid.dt
    model = spec.to_model()
    X = evolve_reference(model, spec.sigma_hat, batch)
    rho_inv = np.linalg.inv(spec.rho_hat)
    sh = spec.sigma_hat
    N = batch.n_paths

    pairs = [(j, k) for j in range(d) for k in range(j, d)]
    Y = model.payoff(X[:, n])
    z_fns: list = [None] * n
    gamma_fns: list = [None] * n
    clamp_lo = np.zeros((n, d, d))
    clamp_hi = np.zeros((n, d, d))
    h_corr_abs = np.zeros(n)
    h_scale = np.zeros(n)
    y0_stderr = 0.0

    for i in range(n, 0, -1):
        xs = X[:, i - 1]
        u = batch.increments[:, i - 1] @ rho_inv.T / dt[i - 1]
        resp = [Y]
        for j in range(d):
            resp.append(Y * u[:, j] / (sh[j] * xs[:, j]))
        for j, k in pairs:
            w = u[:, j] * u[:, k] - rho_inv[j, k] / dt[i - 1]
            if j == k:
                w = w - sh[j] * u[:, j]
            resp.append(Y * w / (sh[j] * sh[k] * xs[:, j] * xs[:, k]))
        R = np.column_stack(resp)

        if i == 1:
            means = R.mean(axis=0)
            fns = [constant_fn(basis, m, n_samples=N) for m in means]
            y0_stderr = float(R[:, 0].std(ddof=1) / np.sqrt(N))
        else:
            fns = fit_many(basis, xs, R, ridge)

        mean_vals = fns[0](xs)
        g = np.empty((N, d, d))
        gdict = {}
        for idx, (j, k) in enumerate(pairs):
            fn = fns[1 + d + idx]
            vals = fn(xs)
            ql = float(np.quantile(vals, clamp_quantiles[0]))
            qh = float(np.quantile(vals, clamp_quantiles[1]))
            vals = np.clip(vals, ql, qh)
            g[:, j, k] = vals
            g[:, k, j] = vals
            clamp_lo[i - 1, j, k] = clamp_lo[i - 1, k, j] = ql
            clamp_hi[i - 1, j, k] = clamp_hi[i - 1, k, j] = qh
            gdict[(j, k)] = fn
        H, _ = hamiltonian_batch(spec, xs, g)
        scaled = xs * sh[None, :]
        half = 0.5 * np.einsum("nj,nk,njk,jk->n", scaled, scaled, g, spec.rho_hat)
        corr = H - half
        h_corr_abs[i - 1] = float(np.abs(corr).max())
        h_scale[i - 1] = float(max(np.abs(H).max(), np.abs(half).max()))

        Y = mean_vals + corr * dt[i - 1]
        z_fns[i - 1] = fns[1 : 1 + d]
        gamma_fns[i - 1] = gdict

    return BsdeSolution(
        spec=spec,
        grid=grid,
        basis=basis,
        y0=float(Y.mean()),
        y0_stderr=y0_stderr,
        z_fns=z_fns,
        gamma_fns=gamma_fns,
        clamp_lo=clamp_lo,
        clamp_hi=clamp_hi,
        h_corr_abs=h_corr_abs,
        h_scale=h_scale,
    )
