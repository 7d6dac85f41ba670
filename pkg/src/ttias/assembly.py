"""IGA mass and stiffness operators as Kronecker sums, plus a dense oracle.

The Kronecker path builds every term from univariate weighted Gram
matrices (one factor per dimension). The oracle integrates the same
integrands with a full tensor-product Gauss rule and never separates the
weight, so the two paths differ only by the low-rank truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bspline import SplineSpace, collocation_matrix, merged_rule, univariate_matrix
from .errors import ShapeMismatchError, SizeCapError
from .geometry import ControlNet, WeightSet, grid_weights, interpolate_weights
from .tensor_train import TTOperator, tt_from_kron_sum

ORACLE_CAP = 2 ** 22


@dataclass(eq=False)
class KroneckerSumOperator:
    """``sum_t kron(A_t^(1), ..., A_t^(D))`` with dense univariate factors."""

    terms: list
    symmetric: bool = False
    sizes: tuple = field(default=None)

    def __post_init__(self):
        self.terms = [tuple(np.asarray(f, dtype=float) for f in t) for t in self.terms]
        if self.sizes is None:
            if not self.terms:
                raise ShapeMismatchError("empty Kronecker sum needs explicit sizes")
            self.sizes = tuple(f.shape[0] for f in self.terms[0])
        for t in self.terms:
            if tuple(f.shape for f in t) != tuple((n, n) for n in self.sizes):
                raise ShapeMismatchError("all terms must share per-dimension sizes")

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def dim(self) -> int:
        return len(self.sizes)

    @property
    def N(self) -> int:
        return int(np.prod(self.sizes))

    def to_dense(self, cap: int = ORACLE_CAP) -> np.ndarray:
        if self.N ** 2 > cap:
            raise SizeCapError(f"dense operator of size {self.N}^2 exceeds cap {cap}")
        out = np.zeros((self.N, self.N))
        for t in self.terms:
            k = t[0]
            for f in t[1:]:
                k = np.kron(k, f)
            out += k
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Apply to a vector (flat or shaped as ``sizes``); returns the same layout."""
        x = np.asarray(x, dtype=float)
        X = x.reshape(self.sizes)
        out = np.zeros_like(X)
        for t in self.terms:
            Y = X
            for d, f in enumerate(t):
                Y = np.moveaxis(np.tensordot(f, Y, axes=([1], [d])), 0, d)
            out += Y
        return out.reshape(x.shape)

    def transpose(self) -> "KroneckerSumOperator":
        return KroneckerSumOperator([tuple(f.T for f in t) for t in self.terms],
                                    self.symmetric, self.sizes)

    def scaled(self, a: float) -> "KroneckerSumOperator":
        terms = [(a * t[0],) + t[1:] for t in self.terms]
        return KroneckerSumOperator(terms, self.symmetric, self.sizes)

    def __add__(self, other: "KroneckerSumOperator") -> "KroneckerSumOperator":
        if other.sizes != self.sizes:
            raise ShapeMismatchError("sizes differ")
        return KroneckerSumOperator(self.terms + other.terms,
                                    self.symmetric and other.symmetric, self.sizes)

    def restrict(self, keep: Sequence[np.ndarray]) -> "KroneckerSumOperator":
        """Keep the index sets ``keep[d]`` in every factor (rows and columns)."""
        terms = [tuple(f[np.ix_(k, k)] for f, k in zip(t, keep)) for t in self.terms]
        return KroneckerSumOperator(terms, self.symmetric, tuple(len(k) for k in keep))

    def interior(self) -> "KroneckerSumOperator":
        """Drop the first and last basis function per dimension (homogeneous Dirichlet)."""
        return self.restrict([np.arange(1, n - 1) for n in self.sizes])

    def to_tt(self, eps: float | None = 1e-14) -> TTOperator:
        return tt_from_kron_sum(self.terms, eps)


class _UnivariateAssembler:
    """Cached basis tables for weighted univariate matrices in one dimension."""

    def __init__(self, space: SplineSpace, wspace: SplineSpace):
        self.space, self.wspace = space, wspace
        self.quad = merged_rule(space, wspace, extra_degree=wspace.degree)
        x = self.quad.points
        self.B = collocation_matrix(space, x)
        self.dB = collocation_matrix(space, x, deriv=1)
        self.W = collocation_matrix(wspace, x)

    def matrix(self, coef: np.ndarray, mode: str) -> np.ndarray:
        w = (self.W @ coef) * self.quad.weights
        if not np.all(np.isfinite(w)):
            return univariate_matrix(self.space, lambda x: collocation_matrix(self.wspace, x) @ coef,
                                     mode, self.quad)  # raises with the offending point
        da, db = (0, 0) if mode == "mass" else (int(mode[-2]), int(mode[-1]))
        left = self.dB if da else self.B
        right = self.dB if db else self.B
        return left.T @ (w[:, None] * right)


def _assemblers(spaces, wspaces):
    return [_UnivariateAssembler(s, w) for s, w in zip(spaces, wspaces)]


def assemble_mass(spaces: Sequence[SplineSpace], weights: WeightSet) -> KroneckerSumOperator:
    """One Kronecker term per separable term of the interpolated ``omega``."""
    lw = weights.omega
    asm = _assemblers(spaces, lw.spaces)
    terms = [tuple(a.matrix(term[d], "mass") for d, a in enumerate(asm)) for term in lw.factors]
    return KroneckerSumOperator(terms, symmetric=True, sizes=tuple(s.n for s in spaces))


def assemble_stiffness(spaces: Sequence[SplineSpace], weights: WeightSet) -> KroneckerSumOperator:
    """Terms for every (k, l) block and every separable term of ``q_kl``.

    In dimension ``d`` the row function is differentiated when ``l == d`` and
    the column function when ``k == d``.
    """
    D = len(spaces)
    asm = _assemblers(spaces, weights.omega.spaces)
    terms = []
    for k in range(D):
        for l in range(D):
            for term in weights.q[k][l].factors:
                terms.append(tuple(
                    a.matrix(term[d], f"stiff_{int(l == d)}{int(k == d)}")
                    for d, a in enumerate(asm)))
    return KroneckerSumOperator(terms, symmetric=True, sizes=tuple(s.n for s in spaces))


def _oracle_tables(spaces, wspaces):
    tabs = []
    for s, w in zip(spaces, wspaces):
        quad = merged_rule(s, w, extra_degree=w.degree)
        tabs.append((quad, collocation_matrix(s, quad.points),
                     collocation_matrix(s, quad.points, deriv=1), collocation_matrix(w, quad.points)))
    return tabs


def _contract_weight(values, factors):
    """sum_q values[q_1..q_D] prod_d T_d[q_d, i_d, j_d] -> (N, N)."""
    out = values
    D = len(factors)
    for T in factors:
        # contract leading quadrature axis; append (i, j) at the end
        out = np.tensordot(out, T, axes=([0], [0]))
    # axes now (i1, j1, i2, j2, ...)
    sizes = [T.shape[1] for T in factors]
    perm = [2 * d for d in range(D)] + [2 * d + 1 for d in range(D)]
    N = int(np.prod(sizes))
    return out.transpose(perm).reshape(N, N)


def dense_oracle_assemble(net: ControlNet, spaces: Sequence[SplineSpace], kind: str,
                          weights: str = "interpolated", weight_set: WeightSet | None = None,
                          eps_w: float = 1e-8, cap: int = ORACLE_CAP) -> np.ndarray:
    """Direct tensor-product quadrature of the mass or stiffness integrand.

    ``weights="interpolated"`` integrates the full (unfactored) interpolant
    of omega/Q; ``weights="exact"`` evaluates the geometry Jacobian at every
    quadrature point.
    """
    if kind not in ("mass", "stiffness"):
        raise ValueError(f"kind must be 'mass' or 'stiffness', got {kind!r}")
    spaces = tuple(spaces)
    N = int(np.prod([s.n for s in spaces]))
    if N * N > cap:
        raise SizeCapError(f"oracle matrix of size {N}^2 exceeds cap {cap}")
    if weight_set is None:
        weight_set = interpolate_weights(net, eps_w, spaces)
    wspaces = weight_set.omega.spaces
    tabs = _oracle_tables(spaces, wspaces)
    D = len(spaces)

    def on_grid(coeffs):
        vals = coeffs
        for d, (_, _, _, Wt) in enumerate(tabs):
            vals = np.moveaxis(np.tensordot(Wt, vals, axes=([1], [d])), 0, d)
        return vals

    if weights == "exact":
        omega_q, Q_q = grid_weights(net, [t[0].points for t in tabs])
    elif weights == "interpolated":
        omega_q = on_grid(weight_set.omega_coeffs)
        Q_q = None
    else:
        raise ValueError(f"weights must be 'interpolated' or 'exact', got {weights!r}")

    def table(d, da, db):
        quad, B, dB, _ = tabs[d]
        left = dB if da else B
        right = dB if db else B
        return quad.weights[:, None, None] * left[:, :, None] * right[:, None, :]

    if kind == "mass":
        return _contract_weight(omega_q, [table(d, 0, 0) for d in range(D)])
    out = np.zeros((N, N))
    for k in range(D):
        for l in range(D):
            q_kl = Q_q[..., k, l] if Q_q is not None else on_grid(weight_set.q_coeffs[k, l])
            if not np.any(q_kl):
                continue
            out += _contract_weight(q_kl, [table(d, int(l == d), int(k == d)) for d in range(D)])
    return out


def interior_indices(sizes: Sequence[int]) -> np.ndarray:
    """Flat (C-order) indices of basis functions that vanish on the boundary."""
    grids = np.meshgrid(*[np.arange(1, n - 1) for n in sizes], indexing="ij")
    return np.ravel_multi_index(tuple(g.ravel() for g in grids), tuple(sizes))


@dataclass(eq=False)
class Discretization:
    """Geometry, analysis spaces, weights and the assembled operators."""

    net: ControlNet
    spaces: tuple
    weights: WeightSet
    mass_full: KroneckerSumOperator
    stiffness_full: KroneckerSumOperator

    @property
    def mass(self) -> KroneckerSumOperator:
        return self.mass_full.interior()

    @property
    def stiffness(self) -> KroneckerSumOperator:
        return self.stiffness_full.interior()

    @property
    def interior_shape(self) -> tuple:
        return tuple(s.n - 2 for s in self.spaces)


def discretize(net: ControlNet, spaces: Sequence[SplineSpace], eps_w: float = 1e-8) -> Discretization:
    spaces = tuple(spaces)
    ws = interpolate_weights(net, eps_w, spaces)
    return Discretization(net, spaces, ws, assemble_mass(spaces, ws), assemble_stiffness(spaces, ws))
