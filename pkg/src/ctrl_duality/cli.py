"""Experiment driver: config parsing, the four-step pipeline, tables, CSV.

Configs are flat ``key = value`` files with section headers (stdlib
configparser syntax); see ``demos/configs/`` for working examples.  All
randomness flows from exactly two seeds: ``stage1`` drives the
regression paths of the backward scheme, ``stage2`` the bound paths
(the forward lower-bound batch uses ``stage2`` and the dual batch
``stage2 + 1``, keeping the two bound estimators decoupled).

Subcommands
-----------
``ctrl-duality uvm --config FILE [--out CSV]``
    Steps 1-4 per time step Delta: reference simulation, backward
    sweep, forward lower bound at Delta_LS, dual upper bound.
``ctrl-duality cva --config FILE [--phi {disc-delta,zero}] [--out CSV]``
    Intensity x time-step table of dual estimates plus the reference
    solver column.
``ctrl-duality american --config FILE [--out CSV]``
    Dual bound for the capped-put stopping toy model.
``ctrl-duality pde --config FILE``
    Reference finite-difference value only.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeSolution, UvmSpec, backward_sweep
from .cva import CvaSpec, cva_dual
from .discretize import ControlBox, make_control_net, make_time_grid
from .dual import Estimate, american_dual, dual_upper_bound, lower_bound, simulate_feedback
from .errors import ConfigError, CtrlDualityError, NumericalError
from .paths import ModelSpec, Payoff, sample_noise
from .pde import Grid1D, default_bsb_grid, default_cva_grid, solve_bsb_1d, solve_cva_pde
from .regress import BasisSpec

CSV_COLUMNS = [
    "experiment_id", "estimator", "delta_t", "mean", "stderr",
    "n_paths", "seed", "runtime_s",
]

UVM_CROSS_MONOMIALS = ((0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1))


def _fraction(text: str, where: str) -> float:
    try:
        if "/" in text:
            num, den = text.split("/")
            return float(num) / float(den)
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{where}: cannot parse time step {text!r}") from exc


class _Section:
    """Typed accessors over one config section with field-naming errors."""

    def __init__(self, cp: configparser.ConfigParser, name: str):
        self.name = name
        self.present = cp.has_section(name)
        self._sec = cp[name] if self.present else {}

    def _raw(self, key: str, default=None, required: bool = False):
        if key in self._sec:
            return self._sec[key]
        if required:
            raise ConfigError(f"[{self.name}] {key} is required")
        return default

    def str(self, key, default=None, required=False):
        return self._raw(key, default, required)

    def float(self, key, default=None, required=False):
        v = self._raw(key, None, required)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} must be a number, got {v!r}") from exc

    def int(self, key, default=None, required=False):
        v = self._raw(key, None, required)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} must be an integer, got {v!r}") from exc

    def floats(self, key, default=None, required=False):
        v = self._raw(key, None, required)
        if v is None:
            return default
        return [float(tok) for tok in v.split()]

    def fractions(self, key, default=None, required=False):
        v = self._raw(key, None, required)
        if v is None:
            return default
        return [_fraction(tok, f"[{self.name}] {key}") for tok in v.split()]


def _make_payoff(sec: _Section, assets: int) -> Payoff:
    kind = sec.str("payoff", required=True)
    cap = sec.float("payoff_cap", 1e6)
    if kind == "call-spread":
        k1 = sec.float("strike_lo", required=True)
        k2 = sec.float("strike_hi", required=True)
        fn = lambda x: np.maximum(x[..., 0] - k1, 0.0) - np.maximum(x[..., 0] - k2, 0.0)
    elif kind == "call":
        k = sec.float("strike", required=True)
        fn = lambda x: np.maximum(x[..., 0] - k, 0.0)
    elif kind == "put":
        k = sec.float("strike", required=True)
        fn = lambda x: np.maximum(k - x[..., 0], 0.0)
    elif kind == "digital":
        k = sec.float("strike", required=True)
        payout = sec.float("payout", 100.0)
        fn = lambda x: payout * (x[..., 0] >= k)
    elif kind == "linear":
        fn = lambda x: x[..., 0]
    elif kind == "outperformer":
        if assets != 2:
            raise ConfigError("[model] payoff outperformer needs assets = 2")
        fn = lambda x: np.maximum(x[..., 1] - x[..., 0], 0.0)
    elif kind == "outperformer-spread":
        if assets != 2:
            raise ConfigError("[model] payoff outperformer-spread needs assets = 2")
        w1 = sec.float("weight_lo", 0.9)
        w2 = sec.float("weight_hi", 1.1)
        fn = lambda x: (np.maximum(x[..., 1] - w1 * x[..., 0], 0.0)
                        - np.maximum(x[..., 1] - w2 * x[..., 0], 0.0))
    else:
        raise ConfigError(f"[model] unknown payoff {kind!r}")
    return Payoff(kind="european", fn=fn, cap=cap)


def _uvm_spec(model: _Section) -> tuple[UvmSpec, float]:
    d = model.int("assets", 1)
    horizon = model.float("horizon", 1.0)
    rho_lo, rho_hi = model.float("rho_lo"), model.float("rho_hi")
    rho_fixed = model.float("rho_fixed")
    rf = None
    if rho_fixed is not None:
        if d != 2:
            raise ConfigError("[model] rho_fixed expects assets = 2")
        rf = np.array([[1.0, rho_fixed], [rho_fixed, 1.0]])
    spec = UvmSpec(
        dim=d,
        x0=model.floats("x0", required=True),
        sigma_lo=model.floats("sigma_lo", required=True),
        sigma_hi=model.floats("sigma_hi", required=True),
        payoff=_make_payoff(model, d),
        rho_lo=rho_lo,
        rho_hi=rho_hi,
        rho_fixed=rf,
        sigma_hat=model.floats("sigma_hat"),
    )
    return spec, horizon


def _basis_for(spec: UvmSpec, bsde_sec: _Section) -> BasisSpec:
    name = bsde_sec.str("basis", "degree")
    if name == "uvm-cross":
        if spec.dim != 2:
            raise ConfigError("[bsde] basis uvm-cross expects assets = 2")
        return BasisSpec(dim=2, monomials=UVM_CROSS_MONOMIALS, scale=spec.x0)
    degree = bsde_sec.int("basis_degree", 5)
    return BasisSpec(dim=spec.dim, degree=degree, scale=spec.x0)


@dataclass
class ReportRow:
    experiment_id: str
    estimator: str
    delta_t: float
    mean: float
    stderr: float
    n_paths: int
    seed: int
    runtime_s: float

    def as_csv(self) -> list[str]:
        return [
            self.experiment_id, self.estimator, f"{self.delta_t:.12g}",
            f"{self.mean:.12g}", f"{self.stderr:.12g}",
            str(self.n_paths), str(self.seed), f"{self.runtime_s:.6f}",
        ]


def _write_csv(rows: list[ReportRow], dest_path: str | None) -> None:
    if dest_path is None:
        return
    with open(dest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())


def _print_rows(rows: list[ReportRow]) -> None:
    print(f"{'estimator':<12}{'delta_t':>10}{'mean':>12}{'stderr':>10}{'paths':>8}")
    for r in rows:
        print(
            f"{r.estimator:<12}{r.delta_t:>10.4g}{r.mean:>12.4f}"
            f"{r.stderr:>10.4f}{r.n_paths:>8d}"
        )


def load_config(path: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    return cp


def _seeds(cp: configparser.ConfigParser) -> tuple[int, int]:
    sec = _Section(cp, "seeds")
    s1 = sec.int("stage1", 20140901)
    s2 = sec.int("stage2", 20140902)
    if s1 == s2:
        raise ConfigError("[seeds] stage1 and stage2 must be distinct "
                          "(the bound paths must be independent of the regression paths)")
    return s1, s2


def run_uvm(cp: configparser.ConfigParser, out_csv: str | None = None) -> list[ReportRow]:
    """Steps 1-4 for every configured time step; returns the report rows."""
    exp_id = _Section(cp, "experiment").str("id", "uvm")
    spec, horizon = _uvm_spec(_Section(cp, "model"))
    bsde_sec = _Section(cp, "bsde")
    dual_sec = _Section(cp, "dual")
    n1 = bsde_sec.int("n1", 8192)
    ridge = bsde_sec.float("ridge", 1e-8)
    basis = _basis_for(spec, bsde_sec)
    n2 = dual_sec.int("n2", 8192)
    deltas = dual_sec.fractions("deltas", [0.5, 0.25, 0.125, 1.0 / 12.0])
    delta_ls = _fraction(dual_sec.str("delta_ls", "1/400"), "[dual] delta_ls")
    method = dual_sec.str("method", "polytope")
    restarts = dual_sec.int("restarts", 3)
    max_iter = dual_sec.int("max_iter")
    blocks = dual_sec.int("blocks")
    net_spacing = dual_sec.float("net_spacing", 0.05)
    cap = dual_sec.int("cap", 100_000)
    seed1, seed2 = _seeds(cp)

    model = spec.to_model()
    rows: list[ReportRow] = []
    grid_ls = make_time_grid(horizon, round(horizon / delta_ls))
    for delta in deltas:
        n_steps = max(1, round(horizon / delta))
        grid = make_time_grid(horizon, n_steps)

        t0 = time.perf_counter()
        batch1 = sample_noise(grid, spec.dim, spec.rho_hat, n1, seed1)
        sol = backward_sweep(spec, batch1, basis, ridge=ridge)
        rows.append(ReportRow(exp_id, "u0_BSDE", delta, sol.y0, sol.y0_stderr,
                              n1, seed1, time.perf_counter() - t0))

        batch_ls = sample_noise(grid_ls, spec.dim, spec.rho_hat, n2, seed2)
        lb = lower_bound(model, sol.feedback_rule(), batch_ls)
        rows.append(ReportRow(exp_id, "u0_LS", delta, lb.mean, lb.stderr,
                              lb.n_paths, lb.seed, lb.seconds))

        batch2 = sample_noise(grid, spec.dim, spec.rho_hat, n2, seed2 + 1)
        _, fb_controls, _ = simulate_feedback(model, sol.feedback_rule(), batch2)
        net = make_control_net(model.box, net_spacing) if method == "enumerate" else None
        ub = dual_upper_bound(
            model, sol.phi(), batch2, method=method, net=net, cap=cap,
            restarts=restarts, blocks=blocks, max_iter=max_iter,
            candidate_controls=[fb_controls],
        )
        rows.append(ReportRow(exp_id, "u0_dual", delta, ub.mean, ub.stderr,
                              ub.n_paths, ub.seed, ub.seconds))

        if lb.mean - 2.0 * lb.stderr > ub.mean + 2.0 * ub.stderr:
            _print_rows(rows)
            raise NumericalError(
                f"sandwich violated at delta {delta:g}: lower bound "
                f"{lb.mean:.4f} (se {lb.stderr:.4f}) exceeds dual "
                f"{ub.mean:.4f} (se {ub.stderr:.4f})"
            )
    _print_rows(rows)
    _write_csv(rows, out_csv)
    return rows


def run_cva(cp: configparser.ConfigParser, phi_override: str | None = None,
            out_csv: str | None = None) -> list[ReportRow]:
    """Intensity x time-step table of dual estimates plus the PDE column."""
    exp_id = _Section(cp, "experiment").str("id", "cva")
    model = _Section(cp, "model")
    cva_sec = _Section(cp, "cva")
    intensities = model.floats("intensities", [0.01, 0.05, 0.1, 0.7])
    sigma = model.float("sigma", 1.0)
    x0 = model.float("x0", 0.0)
    horizon = model.float("horizon", 1.0)
    scale = model.float("scale", 100.0)
    phi = phi_override or model.str("phi", "disc-delta")
    deltas = cva_sec.fractions("deltas", [0.5, 0.25, 0.125, 1.0 / 200.0])
    n_paths = cva_sec.int("n_paths", 8192)
    _, seed2 = _seeds(cp)

    rows: list[ReportRow] = []
    table: dict[float, list[str]] = {}
    for c in intensities:
        spec = CvaSpec(intensity=c, horizon=horizon, x0=x0, sigma=sigma,
                       phi=phi, scale=scale)
        t0 = time.perf_counter()
        pde_val = solve_cva_pde(spec)
        rows.append(ReportRow(exp_id, "cva_pde", 0.0, pde_val, 0.0, 0, 0,
                              time.perf_counter() - t0))
        cells = [f"{pde_val:7.2f}"]
        for delta in deltas:
            grid = make_time_grid(horizon, max(1, round(horizon / delta)))
            est = cva_dual(spec, grid, n_paths, seed2)
            rows.append(ReportRow(exp_id, "cva_dual", delta, est.mean, est.stderr,
                                  est.n_paths, est.seed, est.seconds))
            cells.append(f"{est.mean:7.2f} ({est.stderr:.2f})")
        table[c] = cells

    header = ["c", "PDE"] + [f"{d:g}" for d in deltas]
    widths = [8] + [max(14, len(h) + 2) for h in header[1:]]
    print("".join(h.ljust(w) for h, w in zip(header, widths)))
    for c, cells in table.items():
        line = [f"{c:g}".ljust(widths[0])]
        line += [cell.ljust(w) for cell, w in zip(cells, widths[1:])]
        print("".join(line))
    _write_csv(rows, out_csv)
    return rows


def run_american(cp: configparser.ConfigParser, out_csv: str | None = None) -> list[ReportRow]:
    """Dual bound for the capped-put toy stopping model (phi = 0)."""
    exp_id = _Section(cp, "experiment").str("id", "american")
    model = _Section(cp, "model")
    x0 = model.float("x0", 100.0)
    strike = model.float("strike", 100.0)
    cap = model.float("payoff_cap", required=True)
    horizon = model.float("horizon", 1.0)
    box = ControlBox(
        lo=[model.float("a0_lo", 0.0), model.float("a1_lo", 0.0)],
        hi=[model.float("a0_hi", 0.0), model.float("a1_hi", 1.0)],
    )
    spec = ModelSpec(
        dim=1, x0=[x0], box=box,
        payoff=Payoff(kind="american", fn=lambda x: np.maximum(strike - x[..., 0], 0.0), cap=cap),
        kind="toy",
    )
    dual_sec = _Section(cp, "dual")
    n_steps = dual_sec.int("n_steps", 12)
    n_paths = dual_sec.int("n_paths", 8192)
    restarts = dual_sec.int("restarts", 3)
    max_iter = dual_sec.int("max_iter")
    _, seed2 = _seeds(cp)
    grid = make_time_grid(horizon, n_steps)
    batch = sample_noise(grid, 1, None, n_paths, seed2 + 1)
    est = american_dual(spec, None, batch, restarts=restarts, max_iter=max_iter)
    rows = [ReportRow(exp_id, "american_dual", horizon / n_steps, est.mean,
                      est.stderr, est.n_paths, est.seed, est.seconds)]
    _print_rows(rows)
    _write_csv(rows, out_csv)
    return rows


def run_pde(cp: configparser.ConfigParser) -> float:
    """Reference finite-difference solve; prints value, grid, iterations."""
    target = _Section(cp, "pde").str("target", required=True)
    pde_sec = _Section(cp, "pde")
    n_space = pde_sec.int("n_space", 400)
    n_time = pde_sec.int("n_time", 400)
    if target == "bsb":
        spec, horizon = _uvm_spec(_Section(cp, "model"))
        base = default_bsb_grid(spec, horizon)
        grid = Grid1D(lo=base.lo, hi=base.hi, n_space=n_space, n_time=n_time)
        value, sweeps = solve_bsb_1d(spec, grid, horizon=horizon, with_sweeps=True)
        print(f"bsb value {value:.6f}  grid {n_space}x{n_time} "
              f"[{grid.lo:.4f}, {grid.hi:.4f}]  policy sweeps {sweeps}")
        return value
    if target == "cva":
        model = _Section(cp, "model")
        spec = CvaSpec(
            intensity=model.float("intensity", required=True),
            horizon=model.float("horizon", 1.0),
            x0=model.float("x0", 0.0),
            sigma=model.float("sigma", 1.0),
            scale=model.float("scale", 100.0),
        )
        base = default_cva_grid(spec)
        grid = Grid1D(lo=base.lo, hi=base.hi, n_space=n_space, n_time=n_time)
        value = solve_cva_pde(spec, grid)
        print(f"cva value {value:.6f}  grid {n_space}x{n_time} "
              f"[{grid.lo:.4f}, {grid.hi:.4f}]  iterations {n_time}")
        return value
    raise ConfigError(f"[pde] unknown target {target!r}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ctrl-duality",
        description="Monte-Carlo lower/dual-upper bounds for stochastic control problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("uvm", "cva", "american", "pde"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        if name != "pde":
            p.add_argument("--out", default=None)
        if name == "cva":
            p.add_argument("--phi", choices=["disc-delta", "zero"], default=None)
    args = parser.parse_args(argv)
    try:
        cp = load_config(args.config)
        if args.command == "uvm":
            run_uvm(cp, out_csv=args.out)
        elif args.command == "cva":
            run_cva(cp, phi_override=args.phi, out_csv=args.out)
        elif args.command == "american":
            run_american(cp, out_csv=args.out)
        else:
            run_pde(cp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
