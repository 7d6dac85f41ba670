"""Spline geometry maps, their Jacobian weights, and low-rank weight factors.

A :class:`ControlNet` maps the unit cube onto the physical domain. The mass
integrand carries ``omega = |det grad G|`` and the stiffness integrand the
matrix ``Q = (grad G^T grad G)^{-1} omega``. Both are interpolated in a
finer spline space and factored into sums of separable terms so that the
Galerkin matrices become Kronecker sums.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bspline import SplineSpace, collocation_matrix, make_uniform_open_knots
from .errors import (DegenerateGeometryError, DomainError, InvalidDimensionError,
                     KnotConfigurationError, ToleranceUnreachableError)
from .tensor_train import _svd, _truncation_rank, dense_to_tt

DET_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class ControlNet:
    """Tensor-product B-spline map ``G(x) = sum_i C_i beta_i(x)``.

    ``control_points`` has shape ``(D, n_1, ..., n_D)``.
    """

    spaces: tuple
    control_points: np.ndarray = field(repr=False)
    name: str = "custom"

    def __post_init__(self):
        spaces = tuple(self.spaces)
        cp = np.asarray(self.control_points, dtype=float)
        D = len(spaces)
        if D not in (2, 3):
            raise InvalidDimensionError(f"only 2D and 3D geometries are supported, got D={D}")
        expected = (D,) + tuple(s.n for s in spaces)
        if cp.shape != expected:
            raise InvalidDimensionError(f"control points have shape {cp.shape}, expected {expected}")
        object.__setattr__(self, "spaces", spaces)
        object.__setattr__(self, "control_points", cp)

    @property
    def dim(self) -> int:
        return len(self.spaces)

    def check_injective(self, samples: int = 7) -> None:
        """Raise if the Jacobian determinant changes sign or vanishes on a sample grid."""
        pts = [np.linspace(0.0, 1.0, samples)] * self.dim
        det = np.linalg.det(grid_jacobian(self, pts))
        if np.any(np.abs(det) < DET_TOL) or not (np.all(det > 0) or np.all(det < 0)):
            raise DegenerateGeometryError(f"Jacobian determinant of {self.name!r} is not of one sign")


def _contract(cp, mats):
    """Contract control points (D, n_1..n_D) with per-dimension (k_d, n_d) matrices."""
    out = cp
    for d, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(out, m, axes=([d + 1], [1])), -1, d + 1)
    return out


def _grid_points(net, pts):
    if len(pts) != net.dim:
        raise DomainError(f"expected {net.dim} coordinate arrays, got {len(pts)}")
    return [np.atleast_1d(np.asarray(p, dtype=float)) for p in pts]


def grid_geometry(net: ControlNet, pts: Sequence[np.ndarray]) -> np.ndarray:
    """G on the tensor grid ``pts[0] x ... x pts[D-1]``; shape (D, k_1, ..., k_D)."""
    pts = _grid_points(net, pts)
    mats = [collocation_matrix(s, p) for s, p in zip(net.spaces, pts)]
    return _contract(net.control_points, mats)


def grid_jacobian(net: ControlNet, pts: Sequence[np.ndarray]) -> np.ndarray:
    """Jacobian ``J[..., a, e] = dG_a / dx_e`` on a tensor grid; shape (k_1..k_D, D, D)."""
    pts = _grid_points(net, pts)
    vals = [collocation_matrix(s, p) for s, p in zip(net.spaces, pts)]
    ders = [collocation_matrix(s, p, deriv=1) for s, p in zip(net.spaces, pts)]
    cols = []
    for e in range(net.dim):
        mats = [ders[d] if d == e else vals[d] for d in range(net.dim)]
        cols.append(_contract(net.control_points, mats))
    J = np.stack(cols, axis=-1)  # (D, k.., D)
    return np.moveaxis(J, 0, -2)


def grid_weights(net: ControlNet, pts: Sequence[np.ndarray]):
    """``omega`` (k_1..k_D) and ``Q`` (k_1..k_D, D, D) on a tensor grid."""
    J = grid_jacobian(net, pts)
    det = np.linalg.det(J)
    bad = np.abs(det) < DET_TOL
    if np.any(bad):
        idx = tuple(int(i[0]) for i in np.nonzero(bad))
        raise DegenerateGeometryError(f"|det grad G| < {DET_TOL} at grid index {idx}")
    omega = np.abs(det)
    Jinv = np.linalg.inv(J)
    Q = np.einsum("...ij,...kj->...ik", Jinv, Jinv) * omega[..., None, None]
    return omega, Q


def eval_geometry(net: ControlNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return grid_geometry(net, [[c] for c in x]).reshape(net.dim)


def jacobian(net: ControlNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return grid_jacobian(net, [[c] for c in x]).reshape(net.dim, net.dim)


def weight_omega(net: ControlNet, x) -> float:
    omega, _ = grid_weights(net, [[c] for c in np.asarray(x, dtype=float)])
    return float(omega.ravel()[0])


def weight_Q(net: ControlNet, x) -> np.ndarray:
    _, Q = grid_weights(net, [[c] for c in np.asarray(x, dtype=float)])
    return Q.reshape(net.dim, net.dim)


# ---------------------------------------------------------------------------
# built-in geometries

def _linear_space():
    return SplineSpace(1, [0.0, 0.0, 1.0, 1.0])


def _quadratic_bezier():
    return SplineSpace(2, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0])


def identity_net(dim: int = 2, degree: int = 1, n: int | None = None) -> ControlNet:
    """Unit square/cube; control points at Greville abscissae so G(x) = x."""
    n = n or degree + 1
    spaces = tuple(make_uniform_open_knots(n, degree) for _ in range(dim))
    grev = [s.greville() for s in spaces]
    mesh = np.meshgrid(*grev, indexing="ij")
    return ControlNet(spaces, np.stack(mesh), name="unit_square" if dim == 2 else "unit_cube")


def scaled_net(dim: int = 2, factor: float = 2.0) -> ControlNet:
    net = identity_net(dim)
    return ControlNet(net.spaces, factor * net.control_points, name=f"scaled_{factor:g}")


def _arc_points():
    # quadratic Bezier through (1,0) and (0,1); polynomial stand-in for a circle arc
    return np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def quarter_annulus(r_inner: float = 1.0, r_outer: float = 2.0) -> ControlNet:
    """First coordinate radial (linear), second angular (quadratic)."""
    radii = np.array([r_inner, r_outer])
    arc = _arc_points()
    cp = np.einsum("i,jd->dij", radii, arc)
    return ControlNet((_linear_space(), _quadratic_bezier()), cp, name="quarter_annulus")


def quarter_pipe(r_inner: float = 1.0, r_outer: float = 2.0, length: float = 2.0) -> ControlNet:
    radii = np.array([r_inner, r_outer])
    arc = _arc_points()
    heights = np.array([0.0, length])
    cp = np.zeros((3, 2, 3, 2))
    cp[:2] = np.einsum("i,jd->dij", radii, arc)[..., None]
    cp[2] = heights[None, None, :]
    return ControlNet((_linear_space(), _quadratic_bezier(), _linear_space()), cp,
                      name="quarter_pipe")


def twisted_bar(twist: float = np.pi / 4, height: float = 2.0, taper: float = 0.3) -> ControlNet:
    """Square cross-section rotated and tapered along the quadratic third direction."""
    corners = np.array([-0.5, 0.5])
    cp = np.zeros((3, 2, 2, 3))
    for k, t in enumerate((0.0, 0.5, 1.0)):
        ang = twist * t
        scale = 1.0 - taper * 4 * t * (1 - t)
        c, s = np.cos(ang), np.sin(ang)
        for i, a in enumerate(corners):
            for j, b in enumerate(corners):
                cp[0, i, j, k] = scale * (c * a - s * b)
                cp[1, i, j, k] = scale * (s * a + c * b)
                cp[2, i, j, k] = height * t + 0.25 * a * b * 4 * t * (1 - t)
    return ControlNet((_linear_space(), _linear_space(), _quadratic_bezier()), cp,
                      name="twisted_bar")


BUILTIN = {
    "unit_square": lambda: identity_net(2),
    "unit_cube": lambda: identity_net(3),
    "quarter_annulus": quarter_annulus,
    "quarter_pipe": quarter_pipe,
    "twisted_bar": twisted_bar,
}


def builtin_geometry(name: str) -> ControlNet:
    try:
        net = BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown geometry {name!r}; choose from {sorted(BUILTIN)}") from None
    net.check_injective()
    return net


def load_control_net(path) -> ControlNet:
    data = json.loads(Path(path).read_text())
    D = int(data["dimension"])
    degrees, knots = data["degrees"], data["knots"]
    if len(degrees) != D or len(knots) != D:
        raise InvalidDimensionError("degrees/knots must have one entry per dimension")
    spaces = tuple(SplineSpace(int(p), np.asarray(k, dtype=float)) for p, k in zip(degrees, knots))
    net = ControlNet(spaces, np.asarray(data["control_points"], dtype=float),
                     name=Path(path).stem)
    net.check_injective()
    return net


def save_control_net(net: ControlNet, path) -> None:
    data = {
        "dimension": net.dim,
        "degrees": [s.degree for s in net.spaces],
        "knots": [s.knots.tolist() for s in net.spaces],
        "control_points": net.control_points.tolist(),
    }
    Path(path).write_text(json.dumps(data))


# ---------------------------------------------------------------------------
# weight interpolation and low-rank factors

@dataclass(eq=False)
class LowRankWeight:
    """Weight ``sum_r prod_d (w_r^(d) . B~^(d)(x_d))`` in an interpolation space.

    ``factors[r][d]`` is the coefficient vector of term ``r`` in dimension ``d``.
    Terms are ordered by decreasing magnitude, so truncating to the first
    ``R`` terms never increases the error.
    """

    spaces: tuple
    factors: list
    rel_error: float = 0.0
    norm: float = 0.0

    @property
    def rank(self) -> int:
        return len(self.factors)

    @property
    def dim(self) -> int:
        return len(self.spaces)

    def full(self) -> np.ndarray:
        shape = tuple(s.n for s in self.spaces)
        out = np.zeros(shape)
        for term in self.factors:
            t = term[0]
            for v in term[1:]:
                t = np.multiply.outer(t, v)
            out += t
        return out

    def truncate(self, R: int) -> "LowRankWeight":
        return LowRankWeight(self.spaces, self.factors[:R], float("nan"), self.norm)

    def term_function(self, r: int, d: int):
        """Univariate weight ``x -> w_r^(d) . B~^(d)(x)`` for assembly."""
        coef = self.factors[r][d]
        space = self.spaces[d]
        return lambda x: collocation_matrix(space, x) @ coef

    def evaluate_grid(self, pts: Sequence[np.ndarray]) -> np.ndarray:
        mats = [collocation_matrix(s, p) for s, p in zip(self.spaces, pts)]
        out = 0.0
        for term in self.factors:
            vals = [m @ v for m, v in zip(mats, term)]
            t = vals[0]
            for v in vals[1:]:
                t = np.multiply.outer(t, v)
            out = out + t
        if np.isscalar(out):
            out = np.zeros(tuple(len(p) for p in pts))
        return out


def interpolation_spaces(spaces: Sequence[SplineSpace]) -> tuple:
    """Degree 2p, 2n basis functions on uniform open knots, per dimension."""
    return tuple(make_uniform_open_knots(2 * s.n, 2 * s.degree) for s in spaces)


def interpolate_tensor(values: np.ndarray, spaces: Sequence[SplineSpace]) -> np.ndarray:
    """Coefficients ``W`` with ``W : B~(g) = values`` on the Greville grid."""
    W = values
    for d, s in enumerate(spaces):
        B = collocation_matrix(s, s.greville())
        cond = np.linalg.cond(B)
        if not np.isfinite(cond) or cond > 1e12:
            raise KnotConfigurationError(f"interpolation matrix in dimension {d} is singular")
        W = np.moveaxis(np.tensordot(np.linalg.inv(B), W, axes=([1], [d])), 0, d)
    return W


def _factor_2d(W, eps, max_rank):
    u, s, vt = _svd(W)
    nrm = np.linalg.norm(s)
    if nrm == 0.0:
        return [], 0.0
    R = _truncation_rank(s, eps * nrm)
    if max_rank is not None and R > max_rank:
        raise ToleranceUnreachableError(f"rank {R} needed for eps={eps:g} exceeds {max_rank}")
    factors = [(u[:, r] * s[r], vt[r].copy()) for r in range(R)]
    return factors, R


def _factor_3d(W, eps, max_rank):
    nrm = np.linalg.norm(W)
    if nrm == 0.0:
        return [], 0
    # near-exact TT-SVD, then split each slice of the last two cores by SVD
    tt = dense_to_tt(W, 1e-15)
    g1, g2, g3 = tt.cores
    terms = []
    for a in range(g1.shape[2]):
        mat = np.einsum("nb,bm->nm", g2[a], g3[:, :, 0])
        u, s, vt = _svd(mat)
        for k in range(s.size):
            terms.append((s[k], g1[0, :, a], u[:, k], vt[k]))
    terms.sort(key=lambda t: -t[0])
    sv = np.array([t[0] for t in terms])
    R = _truncation_rank(sv, eps * nrm)
    if max_rank is not None and R > max_rank:
        raise ToleranceUnreachableError(f"rank {R} needed for eps={eps:g} exceeds {max_rank}")
    factors = [(t[1] * t[0], t[2].copy(), t[3].copy()) for t in terms[:R]]
    return factors, R


def factor_weight(W: np.ndarray, spaces, eps: float = 1e-8, max_rank: int | None = None) -> LowRankWeight:
    """Separable factorization of a weight coefficient tensor to relative accuracy ``eps``."""
    if W.ndim == 2:
        factors, _ = _factor_2d(W, eps, max_rank)
    elif W.ndim == 3:
        factors, _ = _factor_3d(W, eps, max_rank)
    else:
        raise InvalidDimensionError(f"weights of dimension {W.ndim} are not supported")
    lw = LowRankWeight(tuple(spaces), factors, 0.0, float(np.linalg.norm(W)))
    if lw.norm > 0:
        lw.rel_error = float(np.linalg.norm(W - lw.full()) / lw.norm)
    return lw


@dataclass(eq=False)
class WeightSet:
    omega: LowRankWeight
    q: list  # D x D nested list of LowRankWeight
    omega_coeffs: np.ndarray = field(repr=False)
    q_coeffs: np.ndarray = field(repr=False)

    @property
    def stiffness_terms(self) -> int:
        return sum(w.rank for row in self.q for w in row)


def interpolate_weights(net: ControlNet, eps_w: float = 1e-8, spaces=None,
                        max_rank: int | None = None) -> WeightSet:
    """Interpolate ``omega`` and every ``q_kl`` at the Greville grid of the
    interpolation space and factor each into separable terms.

    ``spaces`` are the analysis spaces the interpolation space is derived
    from (default: the geometry's own spaces).
    """
    spaces = tuple(spaces or net.spaces)
    ispaces = interpolation_spaces(spaces)
    pts = [s.greville() for s in ispaces]
    omega_vals, Q_vals = grid_weights(net, pts)
    W = interpolate_tensor(omega_vals, ispaces)
    D = net.dim
    Vq = np.empty((D, D) + W.shape)
    for k in range(D):
        for l in range(D):
            Vq[k, l] = interpolate_tensor(Q_vals[..., k, l], ispaces)
    # entries that vanish identically come out at roundoff level; drop them
    scale = max(np.linalg.norm(Vq[k, l]) for k in range(D) for l in range(D))
    Vq[np.linalg.norm(Vq.reshape(D, D, -1), axis=-1) <= 1e-13 * scale] = 0.0
    omega = factor_weight(W, ispaces, eps_w, max_rank)
    q = [[factor_weight(Vq[k, l], ispaces, eps_w, max_rank) for l in range(D)] for k in range(D)]
    return WeightSet(omega, q, W, Vq)
