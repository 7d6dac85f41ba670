"""Univariate B-spline spaces on open knot vectors.

Basis functions are evaluated with the Cox--de Boor recursion, vectorized
over evaluation points. Only the ``p + 1`` functions that are nonzero on a
knot span are computed and then scattered into dense rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import AssemblyError, DomainError, InvalidDimensionError

Weight = Union[float, Callable[[np.ndarray], np.ndarray]]

MODES = ("mass", "stiff_00", "stiff_01", "stiff_10", "stiff_11")


@dataclass(frozen=True, eq=False)
class SplineSpace:
    """Degree ``p`` spline space over an open knot vector.

    Args:
        degree: polynomial degree ``p >= 0``.
        knots: nondecreasing knots in [0, 1]; the first and last ``p + 1``
            entries must equal 0 and 1, interior multiplicities are at most ``p``.
    """

    degree: int
    knots: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = int(self.degree)
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1:
            raise InvalidDimensionError("knot vector must be one-dimensional")
        if p < 0:
            raise InvalidDimensionError(f"degree must be nonnegative, got {p}")
        n = knots.size - p - 1
        if n < p + 1:
            raise InvalidDimensionError(
                f"{knots.size} knots give {n} basis functions, need at least {p + 1}")
        if np.any(np.diff(knots) < 0):
            raise InvalidDimensionError("knots must be nondecreasing")
        if np.any(knots[: p + 1] != 0.0) or np.any(knots[-p - 1:] != 1.0):
            raise InvalidDimensionError("knot vector is not open on [0, 1]")
        interior = knots[p + 1: n]
        if interior.size:
            if interior[0] <= 0.0 or interior[-1] >= 1.0:
                raise InvalidDimensionError("interior knots must lie in (0, 1)")
            _, counts = np.unique(interior, return_counts=True)
            if counts.max() > max(p, 1):
                raise InvalidDimensionError(
                    f"interior knot multiplicity {counts.max()} exceeds degree {p}")
        object.__setattr__(self, "degree", p)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def n(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    def greville(self) -> np.ndarray:
        """Knot averages; unisolvent interpolation nodes for the space."""
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        idx = np.arange(self.n)[:, None] + np.arange(1, p + 1)[None, :]
        return self.knots[idx].mean(axis=1)

    def __repr__(self):
        return f"SplineSpace(degree={self.degree}, n={self.n})"


def make_uniform_open_knots(n: int, p: int) -> SplineSpace:
    """Open knot vector with ``n - p - 1`` equally spaced simple interior knots."""
    if p < 0 or n < p + 1:
        raise InvalidDimensionError(f"need n >= p + 1 >= 1, got n={n}, p={p}")
    n_int = n - p - 1
    interior = np.arange(1, n_int + 1) / (n_int + 1)
    knots = np.concatenate([np.zeros(p + 1), interior, np.ones(p + 1)])
    return SplineSpace(p, knots)


def find_span(space: SplineSpace, x: np.ndarray) -> np.ndarray:
    """Index ``s`` with ``knots[s] <= x < knots[s+1]``; x = 1 maps to the last span."""
    s = np.searchsorted(space.knots, x, side="right") - 1
    return np.clip(s, space.degree, space.n - 1)


def _check_domain(x):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        bad = x[(~np.isfinite(x)) | (x < 0.0) | (x > 1.0)].ravel()[0]
        raise DomainError(f"evaluation point {bad!r} outside [0, 1]")
    return x


def _nonzero_basis(knots, spans, x, p):
    """Values of the p+1 basis functions nonzero on each span, shape (m, p+1)."""
    m = x.size
    vals = np.zeros((m, p + 1))
    vals[:, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    for j in range(1, p + 1):
        left[:, j] = x - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - x
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(vals[:, r], denom, out=np.zeros(m), where=denom != 0)
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    return vals


def _nonzero_derivs(knots, spans, x, p):
    if p == 0:
        return np.zeros((x.size, 1))
    lower = _nonzero_basis(knots, spans, x, p - 1)
    m = x.size
    padded = np.zeros((m, p + 2))
    padded[:, 1:p + 1] = lower
    out = np.zeros((m, p + 1))
    for k in range(p + 1):
        i = spans - p + k
        d1 = knots[i + p] - knots[i]
        d2 = knots[i + p + 1] - knots[i + 1]
        t1 = np.divide(padded[:, k], d1, out=np.zeros(m), where=d1 != 0)
        t2 = np.divide(padded[:, k + 1], d2, out=np.zeros(m), where=d2 != 0)
        out[:, k] = p * (t1 - t2)
    return out


def collocation_matrix(space: SplineSpace, x, deriv: int = 0) -> np.ndarray:
    """Dense matrix ``B[k, i] = beta_i^{(deriv)}(x_k)`` for deriv in {0, 1}."""
    x = np.atleast_1d(_check_domain(x)).ravel()
    p = space.degree
    spans = find_span(space, x)
    if deriv == 0:
        local = _nonzero_basis(space.knots, spans, x, p)
    elif deriv == 1:
        local = _nonzero_derivs(space.knots, spans, x, p)
    else:
        raise ValueError("only first derivatives are supported")
    out = np.zeros((x.size, space.n))
    cols = spans[:, None] - p + np.arange(p + 1)[None, :]
    np.put_along_axis(out, cols, local, axis=1)
    return out


def eval_basis(space: SplineSpace, x: float) -> np.ndarray:
    """All ``n`` basis values at a scalar point."""
    if np.ndim(x) != 0:
        raise DomainError("eval_basis takes a scalar; use collocation_matrix for arrays")
    return collocation_matrix(space, x)[0]


def eval_basis_deriv(space: SplineSpace, x: float) -> np.ndarray:
    if np.ndim(x) != 0:
        raise DomainError("eval_basis_deriv takes a scalar; use collocation_matrix for arrays")
    return collocation_matrix(space, x, deriv=1)[0]


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Composite Gauss--Legendre rule with ``order`` points per interval."""

    points: np.ndarray
    weights: np.ndarray
    breakpoints: np.ndarray
    order: int


def gauss_rule(breakpoints: Sequence[float], order: int) -> QuadratureRule:
    breaks = np.unique(np.asarray(breakpoints, dtype=float))
    ref_x, ref_w = np.polynomial.legendre.leggauss(order)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    pts = (0.5 * (a + b))[:, None] + half[:, None] * ref_x[None, :]
    wts = half[:, None] * ref_w[None, :]
    return QuadratureRule(pts.ravel(), wts.ravel(), breaks, order)


def default_rule(space: SplineSpace) -> QuadratureRule:
    return gauss_rule(space.breakpoints, space.degree + 2)


def merged_rule(*spaces: SplineSpace, extra_degree: int = 0) -> QuadratureRule:
    """Rule on the union of breakpoints, exact for products of two basis
    functions of the first space times a polynomial of ``extra_degree``."""
    breaks = np.unique(np.concatenate([s.breakpoints for s in spaces]))
    p = spaces[0].degree
    order = int(np.ceil((2 * p + extra_degree + 1) / 2))
    return gauss_rule(breaks, max(order, 1))


def _weight_values(weight: Weight, x: np.ndarray) -> np.ndarray:
    if callable(weight):
        w = np.asarray(weight(x), dtype=float)
        w = np.broadcast_to(w, x.shape)
    else:
        w = np.full(x.shape, float(weight))
    bad = ~np.isfinite(w)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise AssemblyError(f"non-finite weight {w[k]!r} at Gauss point x={x[k]:.17g}")
    return w


def univariate_matrix(space: SplineSpace, weight: Weight, mode: str = "mass",
                      quad: QuadratureRule | None = None) -> np.ndarray:
    """Weighted univariate Gram matrix.

    ``mode`` is ``"mass"`` or ``"stiff_ab"`` where ``a``/``b`` flag whether
    the row/column basis function is differentiated, so
    ``M[i, j] = int (d^a beta_i)(d^b beta_j) weight``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    quad = quad or default_rule(space)
    da, db = (0, 0) if mode == "mass" else (int(mode[-2]), int(mode[-1]))
    w = _weight_values(weight, quad.points) * quad.weights
    left = collocation_matrix(space, quad.points, deriv=da)
    right = left if db == da else collocation_matrix(space, quad.points, deriv=db)
    return left.T @ (w[:, None] * right)
