"""Polynomial-basis least-squares estimation of conditional expectations.

The backward scheme and the dual candidate both reduce to fitting
E[response | state] by ridge-regularized least squares on a small
polynomial basis, then evaluating the fit at arbitrary states.  States
are divided by a normalization scale (typically the spot) before the
monomials are formed; without this the degree-5 basis at spot 100 hits
condition numbers around 100^10.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, NumericalError

DEFAULT_RIDGE = 1e-8


def _degree_exponents(dim: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """All monomial exponents with total degree <= degree, graded order."""
    out: list[tuple[int, ...]] = []
    for total in range(degree + 1):
        grade = [e for e in product(range(total + 1), repeat=dim) if sum(e) == total]
        grade.sort(reverse=True)  # x1 before x2 within a grade
        out.extend(grade)
    return tuple(out)


@dataclass(frozen=True)
class BasisSpec:
    """Monomial basis: full total-degree or an explicit exponent list.

    ``monomials`` entries are exponent tuples, e.g. ``(1, 1)`` for
    ``x1*x2``.  The constant function must be present (it is, in degree
    mode).  ``scale`` divides states before evaluation; pass the spot or
    a per-coordinate array.
    """

    dim: int
    degree: int | None = None
    monomials: tuple[tuple[int, ...], ...] | None = None
    scale: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("basis dimension must be >= 1")
        if (self.degree is None) == (self.monomials is None):
            raise ConfigError("specify exactly one of degree / monomials")
        if self.degree is not None:
            if self.degree < 0:
                raise ConfigError("degree must be >= 0")
            exps = _degree_exponents(self.dim, self.degree)
        else:
            exps = tuple(tuple(int(v) for v in e) for e in self.monomials)
            object.__setattr__(self, "monomials", exps)
            if len(exps) == 0:
                raise ConfigError("basis must be nonempty")
            if any(len(e) != self.dim for e in exps):
                raise ConfigError("monomial exponents must have length dim")
            if tuple([0] * self.dim) not in exps:
                raise ConfigError("basis must include the constant function")
            if len(set(exps)) != len(exps):
                raise ConfigError("duplicate monomials in basis")
        object.__setattr__(self, "_exps", np.array(exps, dtype=int))
        s = np.broadcast_to(np.asarray(self.scale, dtype=float), (self.dim,)).copy()
        if np.any(s <= 0):
            raise ConfigError("normalization scale must be positive")
        object.__setattr__(self, "_scale_vec", s)

    @property
    def size(self) -> int:
        return self._exps.shape[0]

    @property
    def exponents(self) -> np.ndarray:
        return self._exps

    def describe(self) -> str:
        exps = " ".join(",".join(str(v) for v in e) for e in self._exps)
        scale = " ".join(f"{v:.17g}" for v in self._scale_vec)
        return f"dim {self.dim} scale {scale} monomials {exps}"


def eval_basis(spec: BasisSpec, x: np.ndarray) -> np.ndarray:
    """Feature vector(s) for states ``x`` of shape (d,) or (N, d).

    Deterministic; the first entry is the constant 1.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1 and spec.dim > 1 or x.ndim == 0
    if spec.dim == 1 and x.ndim == 1:
        pts = x[:, None]
        single = False
    else:
        pts = np.atleast_2d(x)
    if pts.shape[-1] != spec.dim:
        raise ConfigError(f"state dimension {pts.shape[-1]} != basis dim {spec.dim}")
    pts = pts / spec._scale_vec
    exps = spec._exps
    qmax = int(exps.max())
    # power table pw[..., j, q] = (x_j)^q
    pw = np.ones(pts.shape + (qmax + 1,))
    for q in range(1, qmax + 1):
        pw[..., q] = pw[..., q - 1] * pts
    feats = np.prod(pw[:, np.arange(spec.dim)[None, :], exps], axis=-1)
    return feats[0] if single else feats


@dataclass(frozen=True)
class RegressedFn:
    """A fitted conditional-expectation estimate, evaluable anywhere."""

    basis: BasisSpec
    coef: np.ndarray
    ridge: float
    n_samples: int

    def __post_init__(self):
        c = np.asarray(self.coef, dtype=float)
        object.__setattr__(self, "coef", c)
        if c.shape != (self.basis.size,):
            raise ConfigError("coefficient length must equal the basis size")
        if not np.all(np.isfinite(c)):
            raise NumericalError("regression produced non-finite coefficients")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return eval_basis(self.basis, x) @ self.coef


def fit_many(
    spec: BasisSpec,
    xs: np.ndarray,
    ys: np.ndarray,
    ridge: float = DEFAULT_RIDGE,
) -> list[RegressedFn]:
    """Fit several responses sharing one design matrix (one factorization).

    ``ys`` has shape (N,) or (N, q).  Minimizes
    ``sum (y - beta.phi(x))^2 + ridge * |beta|^2`` by normal equations
    with a Cholesky solve; falls back to the pseudo-inverse if the
    factorization fails with ridge > 0, and raises with a condition
    number diagnostic when ridge == 0.
    """
    Y = np.asarray(ys, dtype=float)
    one = Y.ndim == 1
    if one:
        Y = Y[:, None]
    phi = eval_basis(spec, np.asarray(xs, dtype=float))
    if phi.ndim == 1:
        phi = phi[None]
    n = phi.shape[0]
    if Y.shape[0] != n:
        raise ConfigError("xs and ys lengths differ")
    if n < spec.size:
        raise ConfigError(f"need at least {spec.size} samples for this basis, got {n}")
    gram = phi.T @ phi + ridge * np.eye(spec.size)
    rhs = phi.T @ Y
    try:
        coefs = cho_solve(cho_factor(gram), rhs)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(gram)
        if ridge == 0.0:
            raise NumericalError(
                f"rank-deficient regression with ridge 0 (condition number {cond:.3e})"
            ) from exc
        coefs = np.linalg.pinv(gram, hermitian=True) @ rhs
    fns = [RegressedFn(spec, coefs[:, j], float(ridge), n) for j in range(Y.shape[1])]
    return fns


def fit(spec: BasisSpec, xs: np.ndarray, ys: np.ndarray, ridge: float = DEFAULT_RIDGE) -> RegressedFn:
    """Least-squares fit of a single response; see :func:`fit_many`."""
    return fit_many(spec, xs, ys, ridge)[0]


def constant_fn(spec: BasisSpec, value: float, n_samples: int = 0) -> RegressedFn:
    """Degenerate fit returning ``value`` everywhere (time-0 averaging)."""
    coef = np.zeros(spec.size)
    coef[_constant_index(spec)] = float(value)
    return RegressedFn(spec, coef, 0.0, n_samples)


def _constant_index(spec: BasisSpec) -> int:
    idx = np.flatnonzero(~spec._exps.any(axis=1))
    return int(idx[0])


def to_text(fn: RegressedFn) -> str:
    """Plain-text record: basis descriptor plus decimal coefficients."""
    coefs = " ".join(f"{c:.17g}" for c in fn.coef)
    return (
        f"regressedfn {fn.basis.describe()} ridge {fn.ridge:.17g} "
        f"n {fn.n_samples}\ncoef {coefs}\n"
    )


def from_text(text: str) -> RegressedFn:
    """Rebuild a :class:`RegressedFn` written by :func:`to_text`."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 2 or not lines[0].startswith("regressedfn"):
        raise ConfigError("not a regressedfn record")
    head = lines[0].split()
    def _section(name: str) -> list[str]:
        i = head.index(name) + 1
        j = i
        while j < len(head) and not head[j].isalpha():
            j += 1
        return head[i:j]
    dim = int(_section("dim")[0])
    scale = np.array([float(v) for v in _section("scale")])
    exps = tuple(tuple(int(v) for v in tok.split(",")) for tok in _section("monomials"))
    ridge = float(_section("ridge")[0])
    n = int(_section("n")[0])
    spec = BasisSpec(dim=dim, monomials=exps, scale=scale if scale.size > 1 else float(scale[0]))
    coef = np.array([float(v) for v in lines[1].split()[1:]])
    return RegressedFn(spec, coef, ridge, n)


def save_fns(records: Iterable[tuple[str, RegressedFn]], dest) -> None:
    """Write labelled RegressedFn records to a text stream."""
    for label, fn in records:
        dest.write(f"# {label}\n")
        dest.write(to_text(fn))


def load_fns(src) -> list[tuple[str, RegressedFn]]:
    """Read back records written by :func:`save_fns`."""
    out: list[tuple[str, RegressedFn]] = []
    label = None
    buf: list[str] = []
    for line in src.read().splitlines():
        if line.startswith("# "):
            if label is not None and buf:
                out.append((label, from_text("\n".join(buf))))
            label, buf = line[2:].strip(), []
        elif line.strip():
            buf.append(line)
    if label is not None and buf:
        out.append((label, from_text("\n".join(buf))))
    return out
