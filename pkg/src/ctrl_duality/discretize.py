"""Time partitions, control boxes, finite control nets and control paths.

The estimators in this package discretize a continuous-time control
problem twice: the horizon [0, T] is cut into a finite partition, and the
compact control set is replaced by a finite net.  Piecewise-constant,
net-valued control paths (one control per partition interval) then form
the finite family over which the pathwise deterministic maximization
runs.  A control path is represented as a plain ``(n_steps, dim)`` float
array throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Callable

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TimeGrid:
    """Increasing instants ``0 = t_0 < ... < t_n = T`` (in years)."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ConfigError("time grid needs at least two instants")
        if t[0] != 0.0:
            raise ConfigError("time grid must start at 0")
        if np.any(np.diff(t) <= 0.0):
            raise ConfigError("time grid instants must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        """Step lengths ``t_{i+1} - t_i``, shape ``(n_steps,)``."""
        return np.diff(self.times)

    @property
    def mesh(self) -> float:
        return float(np.max(self.dt))

    def interval_of(self, t: float) -> int:
        """Index i with ``t in [t_i, t_{i+1})``, clamped to the last interval."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(i, 0), self.n_steps - 1)


def make_time_grid(horizon: float, n_steps: int) -> TimeGrid:
    """Uniform partition of ``[0, horizon]`` into ``n_steps`` intervals.

    Power-of-two refinements of the same horizon are nested, which the
    convergence checks rely on.
    """
    if not horizon > 0.0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigError(f"n_steps must be a positive integer, got {n_steps}")
    return TimeGrid(np.linspace(0.0, float(horizon), int(n_steps) + 1))


@dataclass(frozen=True)
class ControlBox:
    """Product of closed intervals, optionally cut down by a feasibility test.

    ``feasible`` (if given) maps a control point to a bool; lattice points
    failing it are dropped when a net is built.  Boxes are immutable and
    safe to share.
    """

    lo: np.ndarray
    hi: np.ndarray
    feasible: Callable[[np.ndarray], bool] | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError("box lo/hi must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigError("control box must be bounded")
        if np.any(lo > hi):
            raise ConfigError("control box needs lo <= hi in every coordinate")

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, point: np.ndarray, tol: float = 1e-12) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def clip(self, points: np.ndarray) -> np.ndarray:
        """Project ``(..., dim)`` points onto the box."""
        return np.clip(points, self.lo, self.hi)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class ControlNet:
    """Finite set of feasible points covering a box to within ``spacing``."""

    points: np.ndarray  # (n_points, dim), lexicographically ordered
    spacing: float
    box: ControlBox

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ConfigError("control net must contain at least one point")
        if pts.shape[1] != self.box.dim:
            raise ConfigError("net points do not match the box dimension")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def make_control_net(box: ControlBox, h: float) -> ControlNet:
    """Per-coordinate arithmetic lattice with step at most ``h``.

    Interval endpoints are always included; lattice points failing the
    box's feasibility predicate are dropped.
    """
    if not h > 0.0:
        raise ConfigError(f"net spacing must be positive, got {h}")
    axes = []
    for lo, hi in zip(box.lo, box.hi):
        if hi == lo:
            axes.append(np.array([lo]))
        else:
            # ceil with a small slack so that e.g. (0.2-0.1)/0.05 -> 2 intervals
            m = int(np.ceil((hi - lo) / h - 1e-9))
            axes.append(np.linspace(lo, hi, m + 1))
    pts = np.array(list(product(*axes)), dtype=float)
    if box.feasible is not None:
        keep = np.fromiter((box.feasible(p) for p in pts), dtype=bool, count=len(pts))
        pts = pts[keep]
    if pts.shape[0] == 0:
        raise ConfigError("control net is empty after feasibility filtering")
    return ControlNet(points=pts, spacing=float(h), box=box)


def enumerate_control_paths(net: ControlNet, grid: TimeGrid, cap: int = 100_000) -> np.ndarray:
    """All net-valued piecewise-constant control paths, lexicographically.

    Returns an array of shape ``(count, n_steps, dim)`` with
    ``count = net.size ** n_steps``.  Guarded by ``cap``: exhaustive
    enumeration explodes combinatorially and is meant for brute-force
    verification on tiny instances only.
    """
    n = grid.n_steps
    count = net.size**n
    if count > cap:
        raise ConfigError(
            f"enumeration would produce {count} control paths (> cap {cap}); "
            "use optimizer mode instead"
        )
    idx = np.array(list(product(range(net.size), repeat=n)), dtype=int)
    return net.points[idx]
