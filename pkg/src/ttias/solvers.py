"""Inner linear solvers.

* ``cgls``: damped CGLS on the reduced problem ``min |A D^(1/2) w - z|^2 + |w|^2``.
* ``amen_solve``: one-site AMEn for TT systems with residual-based basis
  enrichment; an SPD Galerkin solver, or a symmetric indefinite one when
  ``symmetric="indefinite"``.
* ``build_kkt`` / ``amen_block_solve``: the optimality system of the
  PDE-constrained formulation and a block AMEn for it, in which the three
  unknown blocks (state, parameter, multiplier) share their TT frames.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, cg, eigsh, minres

from .errors import ShapeMismatchError, VarianceDomainError
from .tensor_train import (
    TTOperator, TTVector, _truncation_rank, apply_dense, dense_to_tt,
    tt_apply, tt_axpby, tt_diag, tt_from_kron_sum, tt_matmul, tt_norm, tt_round, tt_round_operator,
)


@dataclass
class SolverReport:
    """Outcome of one linear solve; ``trace`` holds one residual per iteration/sweep."""

    method: str
    iterations: int = 0
    residual: float = float("nan")
    converged: bool = False
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def rows(self):
        return [(i + 1, r) for i, r in enumerate(self.trace)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in self.rows():
                w.writerow([i, repr(float(r))])


# ---------------------------------------------------------------------------
# CGLS


def _check_theta(theta):
    theta = np.asarray(theta, dtype=float)
    bad = ~(np.isfinite(theta) & (theta > 0))
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise VarianceDomainError(f"variance theta[{j}] = {theta[j]!r} must be positive and finite")
    return theta


def cgls(apply_A: Callable, apply_At: Callable, theta, z, max_iter: int = 30, tol: float = 1e-6,
         u0=None) -> tuple[np.ndarray, SolverReport]:
    """Minimize ``|A u - z|^2 + |D^(-1/2) u|^2`` with ``D = diag(theta)``.

    Works on ``w = D^(-1/2) u`` so the problem is ``min |B w - z|^2 + |w|^2``
    with ``B = A D^(1/2)``; stops when the normal-equation residual
    ``|B^T (z - B w) - w|`` drops below ``tol`` times its initial value.
    ``u0`` warm-starts the iteration.

    The report's ``trace`` holds the relative normal-equation residual per
    iteration and ``extra["ls_residuals"]`` the damped least-squares
    residual ``sqrt(|z - B w|^2 + |w|^2)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    theta = _check_theta(theta)
    z = np.asarray(z, dtype=float)
    sq = np.sqrt(theta)
    rep = SolverReport("cgls")
    w = np.zeros_like(theta) if u0 is None else np.asarray(u0, dtype=float) / sq
    r = z - apply_A(sq * w) if np.any(w) else z.copy()
    s = sq * apply_At(r) - w
    # reference scale: normal residual at w = 0, so warm and cold starts share a criterion
    ref = np.linalg.norm(sq * apply_At(z)) if u0 is not None else np.linalg.norm(s)
    gamma = s @ s
    ls = [float(np.sqrt(r @ r + w @ w))]
    if ref == 0.0 or np.sqrt(gamma) <= tol * ref:
        rep.converged, rep.residual = True, 0.0 if ref == 0.0 else float(np.sqrt(gamma) / ref)
        rep.extra["ls_residuals"] = ls
        return sq * w, rep
    p = s.copy()
    for it in range(max_iter):
        q = apply_A(sq * p)
        delta = q @ q + p @ p
        alpha = gamma / delta
        w += alpha * p
        r -= alpha * q
        s = sq * apply_At(r) - w
        gamma_new = s @ s
        rel = float(np.sqrt(gamma_new) / ref)
        rep.trace.append(rel)
        ls.append(float(np.sqrt(r @ r + w @ w)))
        rep.iterations = it + 1
        if rel <= tol:
            rep.converged = True
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    rep.residual = rep.trace[-1]
    rep.extra["ls_residuals"] = ls
    return sq * w, rep


# ---------------------------------------------------------------------------
# AMEn


def _flip3(c):
    return c.transpose(2, 1, 0)


def _flip4(c):
    return c.transpose(3, 1, 2, 0)


def _upd_op(phi, X, A, Y):
    """Next interface ``sum phi[a,A,c] X[a,i,b] A[A,i,j,B] Y[c,j,d] -> [b,B,d]``."""
    t = np.einsum("aAc,cjd->aAjd", phi, Y, optimize=True)
    t = np.einsum("aAjd,AijB->aiBd", t, A, optimize=True)
    return np.einsum("aiBd,aib->bBd", t, X, optimize=True)


def _upd_vec(phi, X, b):
    t = np.einsum("ag,gih->aih", phi, b, optimize=True)
    return np.einsum("aih,aib->bh", t, X, optimize=True)


def _local_apply(phi, A, psi, x):
    """``sum phi[a,A,c] A[A,i,j,B] psi[b,B,d] x[c,j,d] -> y[a,i,b]`` as three GEMMs."""
    ra, rA, rc = phi.shape
    _, n, m, rB = A.shape
    rb, _, rd = psi.shape
    t = phi.reshape(ra * rA, rc) @ x.reshape(rc, m * rd)  # (a, A, j, d)
    t = t.reshape(ra, rA, m, rd).transpose(0, 3, 1, 2).reshape(ra * rd, rA * m)
    t = t @ A.transpose(0, 2, 1, 3).reshape(rA * m, n * rB)  # (a, d, i, B)
    t = t.reshape(ra, rd, n, rB).transpose(0, 2, 1, 3).reshape(ra * n, rd * rB)
    y = t @ psi.transpose(2, 1, 0).reshape(rd * rB, rb)
    return y.reshape(ra, n, rb)


def _local_rhs(phi, b, psi):
    return np.einsum("ag,gih,bh->aib", phi, b, psi, optimize=True)


def _local_matrix(phi, A, psi):
    B = np.einsum("aAc,AijB,bBd->aibcjd", phi, A, psi, optimize=True)
    n = phi.shape[0] * A.shape[1] * psi.shape[0]
    return B.reshape(n, n)


class _AmenState:
    """Cores and interfaces; ``flipped`` tracks whether the view is reversed."""

    def __init__(self, A, b, x, z):
        self.d = A.d
        self.ac = [c.copy() for c in A.cores]
        self.bc = [c.copy() for c in b.cores]
        self.xc = [c.copy() for c in x.cores]
        self.zc = [c.copy() for c in z.cores]
        one3, one2 = np.ones((1, 1, 1)), np.ones((1, 1))
        self.XAX = [one3] + [None] * (self.d - 1) + [one3]
        self.ZAX = [one3] + [None] * (self.d - 1) + [one3]
        self.XB = [one2] + [None] * (self.d - 1) + [one2]
        self.ZB = [one2] + [None] * (self.d - 1) + [one2]
        self.flipped = False

    def reverse(self):
        self.ac = [_flip4(c) for c in reversed(self.ac)]
        self.bc = [_flip3(c) for c in reversed(self.bc)]
        self.xc = [_flip3(c) for c in reversed(self.xc)]
        self.zc = [_flip3(c) for c in reversed(self.zc)]
        for name in ("XAX", "ZAX", "XB", "ZB"):
            setattr(self, name, list(reversed(getattr(self, name))))
        self.flipped = not self.flipped

    def update_left(self, k):
        X, Z, A, b = self.xc[k], self.zc[k], self.ac[k], self.bc[k]
        self.XAX[k + 1] = _upd_op(self.XAX[k], X, A, X)
        self.XB[k + 1] = _upd_vec(self.XB[k], X, b)
        self.ZAX[k + 1] = _upd_op(self.ZAX[k], Z, A, X)
        self.ZB[k + 1] = _upd_vec(self.ZB[k], Z, b)

    def orth_pass(self):
        """Left-orthogonalize x and z (all but the last core), building interfaces."""
        for k in range(self.d - 1):
            r0, n, r1 = self.xc[k].shape
            Q, R = np.linalg.qr(self.xc[k].reshape(r0 * n, r1))
            self.xc[k] = Q.reshape(r0, n, -1)
            self.xc[k + 1] = np.einsum("ab,bjc->ajc", R, self.xc[k + 1])
            r0, n, r1 = self.zc[k].shape
            Q, R = np.linalg.qr(self.zc[k].reshape(r0 * n, r1))
            self.zc[k] = Q.reshape(r0, n, -1)
            self.zc[k + 1] = np.einsum("ab,bjc->ajc", R, self.zc[k + 1])
            self.update_left(k)

    def x(self) -> TTVector:
        cores = self.xc if not self.flipped else [_flip3(c) for c in reversed(self.xc)]
        return TTVector(cores)


def _random_tt(shape, rank, rng):
    d = len(shape)
    ranks = [1] + [rank] * (d - 1) + [1]
    return TTVector([rng.standard_normal((ranks[k], shape[k], ranks[k + 1])) for k in range(d)])


def _solve_local(phi, A, psi, rhs, x_old, kind, dense_max, inner_tol, rep):
    shape = rhs.shape
    n = rhs.size
    f = rhs.ravel()
    if n <= dense_max:
        B = _local_matrix(phi, A, psi)
        B = 0.5 * (B + B.T)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                sol = sla.solve(B, f, assume_a="pos" if kind == "spd" else "sym")
        except (np.linalg.LinAlgError, sla.LinAlgWarning):
            shift = 1e-12 * abs(np.trace(B)) / n
            rep.warnings.append(f"singular local system of size {n}; added trace shift {shift:.3e}")
            sol = sla.solve(B + shift * np.eye(n), f, assume_a="sym")
        return sol.reshape(shape)

    def mv(v):
        return _local_apply(phi, A, psi, v.reshape(shape)).ravel()

    op = LinearOperator((n, n), matvec=mv, dtype=float)
    if kind == "spd":
        sol, info = cg(op, f, x0=x_old.ravel(), rtol=inner_tol, maxiter=10 * n)
    else:
        sol, info = minres(op, f, x0=x_old.ravel(), rtol=inner_tol, maxiter=10 * n)
    if info != 0:
        rep.warnings.append(f"inner iterative solve of size {n} stopped with info={info}")
    return sol.reshape(shape)


def _true_residual(A, x, b, bnorm, cap):
    if x.size <= cap and int(np.prod(A.row_shape)) <= cap:
        xf = x.full().ravel()
        r = apply_dense(A, xf).ravel() - b.full().ravel()
        return float(np.linalg.norm(r) / bnorm)
    r = tt_axpby(1.0, tt_apply(A, x), -1.0, b)
    return float(tt_norm(r) / bnorm)


def amen_solve(A: TTOperator, b: TTVector, x0: Optional[TTVector] = None, eps: float = 1e-8,
               rmax: Optional[int] = None, max_sweeps: int = 20, *, r_enrich: int = 3,
               symmetric: str = "spd", dense_max: int = 500, inner_tol: Optional[float] = None,
               track_energy: bool = False, residual_cap: int = 2 ** 20, seed: int = 0):
    """Solve ``A x = b`` in TT format by alternating one-site Galerkin updates.

    Args:
        A: square TT operator, symmetric (positive definite unless
            ``symmetric="indefinite"``).
        b: right-hand side.
        x0: initial guess (default: ``b``).
        eps: stop once ``|A x - b| <= eps |b|``; also sets the per-core SVD
            truncation threshold ``eps / sqrt(d)``.
        rmax: cap on solution TT-ranks.
        max_sweeps: maximum number of half sweeps (one pass over all cores).
        r_enrich: rank of the residual approximation used for enrichment.
        dense_max: local systems up to this size are solved directly, larger
            ones by CG (SPD) or MINRES (indefinite) to ``inner_tol``.
        track_energy: record ``x^T A x / 2 - b^T x`` after every core update.

    Returns:
        ``(x, SolverReport)``. The report trace holds the true relative
        residual after every sweep.
    """
    if A.row_shape != A.col_shape or A.col_shape != b.shape:
        raise ShapeMismatchError(f"operator {A.row_shape}x{A.col_shape} vs rhs {b.shape}")
    if symmetric not in ("spd", "indefinite"):
        raise ValueError("symmetric must be 'spd' or 'indefinite'")
    rep = SolverReport("amen" if symmetric == "spd" else "amen-block")
    bnorm = tt_norm(b)
    if bnorm == 0.0:
        rep.converged, rep.residual = True, 0.0
        return TTVector([np.zeros((1, n, 1)) for n in b.shape]), rep
    d = A.d
    inner_tol = inner_tol or eps * 1e-4
    rng = np.random.default_rng(seed)
    x = (x0 if x0 is not None else b).copy()
    if tt_norm(x) == 0.0:
        x = b.copy()
    if d == 1:
        B = A.full()
        sol = sla.solve(0.5 * (B + B.T), b.full(), assume_a="pos" if symmetric == "spd" else "sym")
        x = TTVector([sol.reshape(1, -1, 1)])
        rep.iterations, rep.residual = 1, _true_residual(A, x, b, bnorm, residual_cap)
        rep.trace.append(rep.residual)
        rep.converged = rep.residual <= eps
        return x, rep
    z = _random_tt(b.shape, r_enrich, rng)
    st = _AmenState(A, b, x, z)
    # prepare right interfaces: orthogonalize in the reversed view, then flip back
    st.reverse()
    st.orth_pass()
    st.reverse()
    delta = eps / np.sqrt(d)
    energy = []
    for sweep in range(max_sweeps):
        for k in range(d):
            phi, psi = st.XAX[k], st.XAX[k + 1]
            rhs = _local_rhs(st.XB[k], st.bc[k], st.XB[k + 1])
            sol = _solve_local(phi, st.ac[k], psi, rhs, st.xc[k], symmetric, dense_max, inner_tol, rep)
            if track_energy:
                Bs = _local_apply(phi, st.ac[k], psi, sol)
                energy.append(float(0.5 * np.vdot(sol, Bs) - np.vdot(rhs, sol)))
            if k == d - 1:
                st.xc[k] = sol
                break
            r0, n, r1 = sol.shape
            U, s, Vt = np.linalg.svd(sol.reshape(r0 * n, r1), full_matrices=False)
            nrm = np.linalg.norm(s)
            r = _truncation_rank(s, delta * nrm, rmax) if nrm > 0 else 1
            U, SV = U[:, :r], s[:r, None] * Vt[:r]
            xt = (U @ SV).reshape(r0, n, r1)
            # residual projected onto z frames on both sides: new z core
            rz = _local_apply(st.ZAX[k], st.ac[k], st.ZAX[k + 1], xt) \
                - _local_rhs(st.ZB[k], st.bc[k], st.ZB[k + 1])
            z0 = rz.shape[0]
            Qz, _ = np.linalg.qr(rz.reshape(z0 * n, -1))
            st.zc[k] = Qz.reshape(z0, n, -1)
            # residual in the x left frame and z right frame: enrichment
            enr = _local_apply(st.XAX[k], st.ac[k], st.ZAX[k + 1], xt) \
                - _local_rhs(st.XB[k], st.bc[k], st.ZB[k + 1])
            Ue = np.hstack([U, enr.reshape(r0 * n, -1)])
            Q, R = np.linalg.qr(Ue)
            carry = R @ np.vstack([SV, np.zeros((enr.shape[2], r1))])
            if rmax is not None and Q.shape[1] > rmax + r_enrich:
                Q, carry = Q[:, : rmax + r_enrich], carry[: rmax + r_enrich]
            st.xc[k] = Q.reshape(r0, n, -1)
            st.xc[k + 1] = np.einsum("ab,bjc->ajc", carry, st.xc[k + 1])
            st.update_left(k)
        x = st.x()
        res = _true_residual(A, x, b, bnorm, residual_cap)
        rep.trace.append(res)
        rep.iterations = sweep + 1
        if res <= eps:
            rep.converged = True
            break
        st.reverse()
    rep.residual = rep.trace[-1]
    if track_energy:
        rep.extra["energy"] = energy
    x = tt_round(st.x(), delta)
    rep.extra["ranks"] = x.ranks
    return x, rep

# ---------------------------------------------------------------------------
# KKT system of the constrained formulation

BLOCKS = ("y", "u", "lam")


def _kron_prefix(mats, op: TTOperator) -> TTOperator:
    """TT operator ``kron(mats[0], ..., mats[-1], op)``."""
    cores = [np.asarray(m, dtype=float)[None, :, :, None] for m in mats]
    return TTOperator(cores + [c.copy() for c in op.cores])


def _eye_at(n, i, j=None):
    E = np.zeros((n, n))
    E[i, i if j is None else j] = 1.0
    return E


@dataclass(eq=False)
class KktSystem:
    """Symmetric indefinite optimality system in the unknown ``(y, u, lam)``.

    Every block lives on the TT modes ``(N_t, n_1, ..., n_D)``. The parameter
    block stores ``u`` in time slot 0; the other slots carry identity rows so
    their solution is zero. ``blocks[(a, b)]`` is the TT operator coupling
    block ``b`` into equation ``a`` (absent pairs are zero) and ``rhs[a]``
    the right-hand side (None for zero).
    """

    sys: object
    theta: np.ndarray
    z: np.ndarray
    scale: float
    blocks: dict
    rhs: list
    u_scale: object = 1.0
    lam_scale: float = 1.0
    y_scale: float = 1.0

    @property
    def n_space(self) -> int:
        return int(self.theta.size)

    @property
    def mode_shape(self) -> tuple:
        return (self.sys.N_t,) + tuple(self.sys.space_shape)

    def rhs_norm(self) -> float:
        return float(np.sqrt(sum(tt_norm(b) ** 2 for b in self.rhs if b is not None)))

    def dense(self) -> np.ndarray:
        """Dense expansion of the padded 3x3 block operator used by the TT solver."""
        N = int(np.prod(self.mode_shape))
        out = np.zeros((3 * N, 3 * N))
        for (a, b), op in self.blocks.items():
            out[a * N:(a + 1) * N, b * N:(b + 1) * N] = op.full()
        return out

    def dense_rhs(self) -> np.ndarray:
        N = int(np.prod(self.mode_shape))
        f = np.zeros(3 * N)
        for a, b in enumerate(self.rhs):
            if b is not None:
                f[a * N:(a + 1) * N] = b.full().ravel()
        return f

    def normal_form(self, eps: float = 1e-12) -> tuple[dict, list]:
        """Blocks and rhs of ``S^T S x = S^T f`` (``S`` the padded block operator).

        Galerkin projection of this SPD system onto a frame minimizes the KKT
        residual over that frame.
        """
        cols = {}
        for (c, a) in self.blocks:
            cols.setdefault(a, []).append(c)
        blocks = {}
        for a in range(3):
            for b in range(3):
                acc = None
                for c in cols.get(a, []):
                    if (c, b) not in self.blocks:
                        continue
                    prod = tt_matmul(self.blocks[(c, a)].T, self.blocks[(c, b)])
                    acc = prod if acc is None else acc + prod
                if acc is not None:
                    blocks[(a, b)] = tt_round_operator(acc, eps)
        rhs = []
        for a in range(3):
            acc = None
            for c in cols.get(a, []):
                if self.rhs[c] is not None:
                    v = tt_apply(self.blocks[(c, a)].T, self.rhs[c])
                    acc = v if acc is None else acc + v
            rhs.append(None if acc is None else tt_round(acc, eps))
        return blocks, rhs

    def extract_u(self, x_full: np.ndarray) -> np.ndarray:
        X = np.asarray(x_full).reshape(3, self.sys.N_t, self.n_space)
        return self.u_scale * X[1, 0]

    def dense_compact(self) -> tuple[np.ndarray, np.ndarray]:
        """Unpadded matrix ``[C^T C, 0, K^T; 0, D^-1, -M0^T; K, -M0, 0]`` and rhs."""
        s = self.sys
        Kb = s.dense_big()
        n, Nt = self.n_space, s.N_t
        M = s.mass_dense()
        C = np.zeros((n, n * Nt))
        C[:, -n:] = np.eye(n)
        M0 = np.zeros((n * Nt, n))
        M0[:n] = self.scale * M
        ny = n * Nt
        S = np.zeros((2 * ny + n, 2 * ny + n))
        S[:ny, :ny] = C.T @ C
        S[:ny, ny + n:] = Kb.T
        S[ny:ny + n, ny:ny + n] = np.diag(1.0 / self.theta)
        S[ny:ny + n, ny + n:] = -M0.T
        S[ny + n:, :ny] = Kb
        S[ny + n:, ny:ny + n] = -M0
        f = np.zeros(2 * ny + n)
        f[:ny] = C.T @ (self.scale * self.z)
        return S, f


def _spectral_norm(op) -> float:
    """Largest eigenvalue of a symmetric PSD Kronecker-sum operator."""
    if op.N <= 400:
        return float(np.linalg.eigvalsh(op.to_dense(cap=2 ** 20))[-1])
    lin = LinearOperator((op.N, op.N), matvec=op.matvec, dtype=float)
    return float(eigsh(lin, k=1, which="LA", tol=1e-3, return_eigenvectors=False)[0])


def kkt_balance(sys, theta, scale: float = 1.0) -> tuple[float, np.ndarray, float]:
    """Scaling ``(a, b, c)`` used by ``build_kkt(balance="auto")``.

    The stored unknowns are ``(y/c, u/b, lam/a)`` and rows are scaled to
    match. ``b = sqrt(theta)`` turns the variance block into the identity
    (the change of variables used by CGLS). With ``k = |K_big|`` and
    ``m = s |M| max(b)`` the choice ``a = m/k^2``, ``c = m/k`` gives the
    time-stepping blocks, the coupling blocks and the data block the same
    norm ``m^2/k^2``. Inside IAS the variances span many orders of
    magnitude; without this the local saddle systems of block AMEn are too
    ill-conditioned to solve.
    """
    b = np.sqrt(_check_theta(theta))
    mnorm = _spectral_norm(sys.M)
    knorm = _spectral_norm(sys.step_operator) + mnorm
    m = abs(scale) * mnorm * float(b.max())
    return m / knorm ** 2, b, m / knorm


def build_kkt(sys, theta, z, scale: float = 1.0, eps: float = 1e-12,
              balance="auto") -> KktSystem:
    """Optimality conditions of ``min |C y - s z|^2 + |D^(-1/2) u|^2`` s.t. ``K y = s M0 u``.

    ``s = scale`` whitens the data; the parameter block then minimizes
    ``|s (A u - z)|^2 + |D^(-1/2) u|^2``.

    ``balance`` is ``"auto"`` (see :func:`kkt_balance`), None, or a tuple
    ``(a, b[, c])`` with ``b`` a scalar or per-component vector. The stored
    unknowns are then ``(y/c, u/b, lam/a)`` and rows are scaled the same
    way, so the operator stays symmetric; ``extract_u`` undoes the scaling.
    """
    theta = _check_theta(theta)
    z = np.asarray(z, dtype=float).ravel()
    n = int(np.prod(sys.space_shape))
    if theta.size != n or z.size != n:
        raise ShapeMismatchError(f"theta/z lengths {theta.size}/{z.size} vs {n} spatial dofs")
    if balance is None:
        a, b, c = 1.0, 1.0, 1.0
    elif isinstance(balance, str):
        if balance != "auto":
            raise ValueError(f"unknown balance {balance!r}")
        a, b, c = kkt_balance(sys, theta, scale)
    else:
        a, b, c = (tuple(balance) + (1.0,))[:3]
    a, c = float(a), float(c)
    b = np.broadcast_to(np.asarray(b, dtype=float), (n,)).copy()
    if np.any(b <= 0) or a <= 0 or c <= 0:
        raise ValueError("KKT scalings must be positive")
    Nt = sys.N_t
    It, II = np.eye(Nt), sys.time_bidiagonal()
    E00, ENN = _eye_at(Nt, 0), _eye_at(Nt, Nt - 1)
    Ispace = [np.eye(m) for m in sys.space_shape]

    # a c K_big = a c (tau I (x) nu K + II (x) M)
    kterms = [(It, c * a * sys.tau * sys.nu * t[0]) + t[1:] for t in sys.K.terms]
    kterms += [(c * a * II,) + t for t in sys.M.terms]
    Kbig = tt_from_kron_sum(kterms, eps)
    # coupling -a s M0 diag(b); variance block diag(b^2/theta) at t=0, identity elsewhere
    b_tt = dense_to_tt(b.reshape(sys.space_shape), eps)
    mb = tt_round_operator(tt_matmul(sys.tt_mass, tt_diag(b_tt)), eps)
    m0 = _kron_prefix([-a * scale * E00], mb)
    d_tt = dense_to_tt((b * b / theta).reshape(sys.space_shape), eps)
    uu = tt_from_kron_sum([(It - E00,) + tuple(Ispace)], None) + _kron_prefix([E00], tt_diag(d_tt))
    blocks = {
        (0, 0): tt_from_kron_sum([(c * c * ENN,) + tuple(Ispace)], None),
        (0, 2): Kbig.T,
        (2, 0): Kbig,
        (1, 1): tt_round_operator(uu, eps),
        (1, 2): m0.T,
        (2, 1): m0,
    }
    eN = np.zeros(Nt)
    eN[-1] = 1.0
    ztt = dense_to_tt((c * scale * z).reshape(sys.space_shape), eps)
    rhs_y = TTVector([eN[None, :, None]] + [g.copy() for g in ztt.cores])
    return KktSystem(sys, theta, z, float(scale), blocks, [rhs_y, None, None], b, a, c)


@dataclass
class BlockTT:
    """Three TT vectors sharing all cores but one; ``cores[pos]`` has shape (r0, n, 3, r1)."""

    cores: list
    pos: int

    def block(self, a: int) -> TTVector:
        cores = list(self.cores)
        cores[self.pos] = self.cores[self.pos][:, :, a, :]
        return TTVector(cores)

    @property
    def ranks(self) -> tuple:
        return (1,) + tuple(c.shape[-1] for c in self.cores)

    def rescaled(self, factors) -> "BlockTT":
        """Copy with block ``a`` multiplied by ``factors[a]``."""
        cores = list(self.cores)
        cores[self.pos] = self.cores[self.pos] * np.asarray(factors, dtype=float)[None, None, :, None]
        return BlockTT(cores, self.pos)


def _move_block_to_end(x: BlockTT) -> BlockTT:
    cores = [c.copy() for c in x.cores]
    for k in range(x.pos, len(cores) - 1):
        r0, n, B, r1 = cores[k].shape
        Q, R = np.linalg.qr(cores[k].reshape(r0 * n, B * r1))
        cores[k] = Q.reshape(r0, n, -1)
        cores[k + 1] = np.einsum("aBb,bjc->ajBc", R.reshape(-1, B, r1), cores[k + 1])
    return BlockTT(cores, len(cores) - 1)


class _BlockState:
    """Shared frames for all blocks; the block index rides on the active core."""

    def __init__(self, blocks: dict, rhs: list, x: BlockTT, z: TTVector):
        self.d = len(x.cores)
        self.pairs = sorted(blocks)
        self.ac = {p: [c.copy() for c in blocks[p].cores] for p in self.pairs}
        self.bc = {a: [c.copy() for c in b.cores] for a, b in enumerate(rhs) if b is not None}
        self.xc = [c.copy() for c in x.cores]  # block core at the end
        self.zc = [c.copy() for c in z.cores]
        one3, one2 = np.ones((1, 1, 1)), np.ones((1, 1))
        d = self.d
        self.XAX = {p: [one3] + [None] * (d - 1) + [one3] for p in self.pairs}
        self.ZAX = {p: [one3] + [None] * (d - 1) + [one3] for p in self.pairs}
        self.XB = {a: [one2] + [None] * (d - 1) + [one2] for a in self.bc}
        self.ZB = {a: [one2] + [None] * (d - 1) + [one2] for a in self.bc}
        self.flipped = False

    def reverse(self):
        for p in self.pairs:
            self.ac[p] = [_flip4(c) for c in reversed(self.ac[p])]
            self.XAX[p] = list(reversed(self.XAX[p]))
            self.ZAX[p] = list(reversed(self.ZAX[p]))
        for a in self.bc:
            self.bc[a] = [_flip3(c) for c in reversed(self.bc[a])]
            self.XB[a] = list(reversed(self.XB[a]))
            self.ZB[a] = list(reversed(self.ZB[a]))
        self.xc = [c.transpose(3, 1, 2, 0) if c.ndim == 4 else _flip3(c) for c in reversed(self.xc)]
        self.zc = [_flip3(c) for c in reversed(self.zc)]
        self.flipped = not self.flipped

    def update_left(self, k):
        X, Z = self.xc[k], self.zc[k]
        for p in self.pairs:
            A = self.ac[p][k]
            self.XAX[p][k + 1] = _upd_op(self.XAX[p][k], X, A, X)
            self.ZAX[p][k + 1] = _upd_op(self.ZAX[p][k], Z, A, X)
        for a in self.bc:
            self.XB[a][k + 1] = _upd_vec(self.XB[a][k], X, self.bc[a][k])
            self.ZB[a][k + 1] = _upd_vec(self.ZB[a][k], Z, self.bc[a][k])

    def orth_pass(self):
        """Left-orthogonalize cores 0..d-2 (block core is last)."""
        for k in range(self.d - 1):
            r0, n, r1 = self.xc[k].shape
            Q, R = np.linalg.qr(self.xc[k].reshape(r0 * n, r1))
            self.xc[k] = Q.reshape(r0, n, -1)
            nxt = self.xc[k + 1]
            sub = "ab,bjc->ajc" if nxt.ndim == 3 else "ab,bjBc->ajBc"
            self.xc[k + 1] = np.einsum(sub, R, nxt)
            r0, n, r1 = self.zc[k].shape
            Qz, Rz = np.linalg.qr(self.zc[k].reshape(r0 * n, r1))
            self.zc[k] = Qz.reshape(r0, n, -1)
            self.zc[k + 1] = np.einsum("ab,bjc->ajc", Rz, self.zc[k + 1])
            self.update_left(k)

    # local pieces ---------------------------------------------------------
    def local_apply(self, k, X, L="XAX", R="XAX"):
        """``sum_b A_ab x_b`` projected with interfaces L (left) and R (right)."""
        left, right = getattr(self, L), getattr(self, R)
        out = [None, None, None]
        for (a, b) in self.pairs:
            y = _local_apply(left[(a, b)][k], self.ac[(a, b)][k], right[(a, b)][k + 1], X[b])
            out[a] = y if out[a] is None else out[a] + y
        return out

    def local_rhs(self, k, L="XB", R="XB", shape=None):
        left, right = getattr(self, L), getattr(self, R)
        out = []
        for a in range(3):
            if a in self.bc:
                out.append(_local_rhs(left[a][k], self.bc[a][k], right[a][k + 1]))
            else:
                out.append(np.zeros(shape))
        return out

    def x(self) -> BlockTT:
        if not self.flipped:
            return BlockTT([c.copy() for c in self.xc], self.d - 1)
        cores = [c.transpose(3, 1, 2, 0) if c.ndim == 4 else _flip3(c) for c in reversed(self.xc)]
        return BlockTT(cores, 0)


def _abs_block_jacobi(st, k, shape) -> LinearOperator:
    """SPD preconditioner ``|B_pq|^-1`` from the rank-diagonal blocks of the local matrix.

    For every pair of left/right rank indices ``(p, q)`` the 3n x 3n block
    coupling all three unknowns at that pair is taken; its eigenvalues are
    replaced by their absolute values so MINRES can use it.
    """
    r0, n, r1 = shape
    D = np.zeros((r0, r1, 3, n, 3, n))
    for (a, b) in st.pairs:
        phi = np.einsum("pAp->pA", st.XAX[(a, b)][k])
        psi = np.einsum("qBq->qB", st.XAX[(a, b)][k + 1])
        D[:, :, a, :, b, :] = np.einsum("pA,AijB,qB->pqij", phi, st.ac[(a, b)][k], psi, optimize=True)
    D = D.reshape(r0 * r1, 3 * n, 3 * n)
    lam, V = np.linalg.eigh(0.5 * (D + D.transpose(0, 2, 1)))
    lam = np.abs(lam)
    lam = np.maximum(lam, 1e-14 * lam.max(axis=1, keepdims=True) + 1e-300)
    P = (V / lam[:, None, :]) @ V.transpose(0, 2, 1)

    def apply(v):
        X = v.reshape(3, r0, n, r1).transpose(1, 3, 0, 2).reshape(r0 * r1, 3 * n, 1)
        Y = np.matmul(P, X)
        return Y.reshape(r0, r1, 3, n).transpose(2, 0, 3, 1).ravel()

    return LinearOperator((3 * r0 * n * r1,) * 2, matvec=apply, dtype=float)


def _block_local_solve(st, k, rhs, x_old, dense_max, inner_tol, rep, spd=False, maxiter=3000):
    shape = rhs[0].shape
    N = rhs[0].size
    f = np.concatenate([r.ravel() for r in rhs])
    if 3 * N <= dense_max:
        Bm = np.zeros((3 * N, 3 * N))
        for (a, b) in st.pairs:
            Bm[a * N:(a + 1) * N, b * N:(b + 1) * N] = _local_matrix(
                st.XAX[(a, b)][k], st.ac[(a, b)][k], st.XAX[(a, b)][k + 1])
        Bm = 0.5 * (Bm + Bm.T)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                sol = sla.solve(Bm, f, assume_a="pos" if spd else "sym")
        except (np.linalg.LinAlgError, sla.LinAlgWarning):
            shift = 1e-12 * max(abs(np.trace(Bm)), 1.0) / (3 * N)
            rep.warnings.append(f"singular local system of size {3 * N}; added trace shift {shift:.3e}")
            sol = sla.lstsq(Bm + shift * np.eye(3 * N), f)[0]
    else:
        def mv(v):
            X = v.reshape((3,) + shape)
            return np.concatenate([y.ravel() for y in st.local_apply(k, X)])

        op = LinearOperator((3 * N, 3 * N), matvec=mv, dtype=float)
        x0 = np.moveaxis(x_old, 2, 0).ravel()
        solver, name = (cg, "CG") if spd else (minres, "MINRES")
        sol, info = solver(op, f, x0=x0, rtol=inner_tol, maxiter=min(20 * N, maxiter), M=_abs_block_jacobi(st, k, shape))
        if info != 0:
            rep.warnings.append(f"local {name} of size {3 * N} stopped with info={info}")
    return np.moveaxis(sol.reshape((3,) + shape), 0, 2)  # (r0, n, 3, r1)


def _residual_rank(st, k, U, s, Vt, rhs, delta, rmax):
    """Smallest rank whose truncated local solution keeps the local residual small.

    Frobenius truncation of the stacked blocks can wipe out a block whose
    scale is far below the others; the saddle operator then amplifies the
    loss. The target is ``max(delta |f|, 2 |res(full)|)`` on the local system.
    """
    r0, n, r1 = rhs[0].shape
    f = np.sqrt(sum(float(np.sum(b * b)) for b in rhs))

    def res(r):
        xt = ((U[:, :r] * s[:r]) @ Vt[:r]).reshape(r0, n, 3, r1)
        y = st.local_apply(k, [xt[:, :, b, :] for b in range(3)])
        return np.sqrt(sum(float(np.sum((y[a] - rhs[a]) ** 2)) for a in range(3)))

    full = len(s)
    cap = full if rmax is None else min(full, rmax)
    target = max(delta * f, 2.0 * res(full))
    nrm = np.linalg.norm(s)
    lo = max(_truncation_rank(s, delta * nrm, cap), 1) if nrm > 0 else 1
    if lo >= cap or res(lo) <= target:
        return min(lo, cap)
    hi = cap
    # bisection on the (empirically monotone) residual-versus-rank curve
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if res(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def _block_residual(kkt: KktSystem, x: BlockTT, bnorm: float) -> float:
    xs = [x.block(b).full().ravel() for b in range(3)]
    res = 0.0
    f = [b.full().ravel() if b is not None else 0.0 for b in kkt.rhs]
    for a in range(3):
        r = -f[a] if np.ndim(f[a]) else np.zeros_like(xs[0])
        for (aa, b), op in kkt.blocks.items():
            if aa == a:
                r = r + apply_dense(op, xs[b]).ravel()
        res += float(r @ r)
    return float(np.sqrt(res) / bnorm)


def amen_block_solve(kkt: KktSystem, eps: float = 1e-4, rmax: Optional[int] = None,
                     max_sweeps: int = 20, x0: Optional[BlockTT] = None, *, r_enrich: int = 3,
                     dense_max: int = 1200, inner_tol: Optional[float] = None,
                     inner_maxiter: int = 3000, seed: int = 0,
                     stall_ratio: Optional[float] = 0.9, projection: str = "galerkin"):
    """Block AMEn for the KKT system.

    The three unknown blocks share their TT frames; the block index is
    carried by the core being updated, so every local problem is a small
    3x3 saddle-point system solved by a symmetric indefinite factorization
    (or block-Jacobi preconditioned MINRES when larger than ``dense_max``).
    Frames are enriched with residual projections of all blocks.
    Convergence is judged on the full (balanced) KKT residual after every
    sweep; the last core of a sweep is only replaced when that residual
    drops. Sweeping stops early (``converged=False``, ``extra["stalled"]``)
    once two consecutive sweeps fail to push the best residual below
    ``stall_ratio`` times its earlier value; None disables this.

    The reconstructed parameter is much less accurate than the KKT residual
    (inverse-problem conditioning), so local solves default to
    ``inner_tol = 1e-4 eps``, capped at ``inner_maxiter`` MINRES steps.

    Returns:
        ``(u, report, x)`` with ``x`` a :class:`BlockTT` usable as a warm start.
    """
    rep = SolverReport("amen-block")
    bnorm = kkt.rhs_norm()
    shape = kkt.mode_shape
    d = len(shape)
    if bnorm == 0.0:
        rep.converged, rep.residual = True, 0.0
        zero = BlockTT([np.zeros((1, n, 1)) for n in shape[:-1]] + [np.zeros((1, shape[-1], 3, 1))], d - 1)
        return np.zeros(kkt.n_space), rep, zero
    inner_tol = inner_tol or eps * 1e-4
    rng = np.random.default_rng(seed)
    if x0 is None:
        cores = [rng.standard_normal((1 if k == 0 else 2, n, 1 if k == d - 1 else 2))
                 for k, n in enumerate(shape)]
        cores[-1] = rng.standard_normal((cores[-1].shape[0], shape[-1], 3, 1))
        x0 = BlockTT(cores, d - 1)
    else:
        x0 = _move_block_to_end(x0)
    if projection == "galerkin":
        blocks, rhs_tt, spd = kkt.blocks, kkt.rhs, False
    elif projection == "min-residual":
        (blocks, rhs_tt), spd = kkt.normal_form(), True
    else:
        raise ValueError(f"unknown projection {projection!r}")
    st = _BlockState(blocks, rhs_tt, x0, _random_tt(shape, r_enrich, rng))
    st.orth_pass()
    st.reverse()
    delta = eps / np.sqrt(d)
    rejected = False
    for sweep in range(max_sweeps):
        for k in range(d):
            x_old = st.xc[k]
            r0, n, _, r1 = x_old.shape
            rhs = st.local_rhs(k, shape=(r0, n, r1))
            if k == 0 and rejected:
                sol = x_old  # same core and frames as the rejected solve
            else:
                sol = _block_local_solve(st, k, rhs, x_old, dense_max, inner_tol, rep, spd, inner_maxiter)
            if k == d - 1:
                # A Galerkin step on a saddle system may raise the residual;
                # the end-of-sweep core keeps whichever candidate is better.
                st.xc[k] = x_old
                res_old = _block_residual(kkt, st.x(), bnorm)
                st.xc[k] = sol
                res = _block_residual(kkt, st.x(), bnorm)
                rejected = res_old < res
                if rejected:
                    st.xc[k], res = x_old, res_old
                break
            U, s, Vt = np.linalg.svd(sol.reshape(r0 * n, 3 * r1), full_matrices=False)
            r = _residual_rank(st, k, U, s, Vt, rhs, delta, rmax)
            U, SV = U[:, :r], s[:r, None] * Vt[:r]
            xt = (U @ SV).reshape(r0, n, 3, r1)
            Xb = [xt[:, :, b, :] for b in range(3)]
            # z frame: dominant directions of all block residuals
            zr = st.local_apply(k, Xb, "ZAX", "ZAX")
            zb = st.local_rhs(k, "ZB", "ZB", shape=zr[0].shape)
            z0 = zr[0].shape[0]
            Zm = np.concatenate([(zr[a] - zb[a]).reshape(z0 * n, -1) for a in range(3)], axis=1)
            Uz = np.linalg.svd(Zm, full_matrices=False)[0][:, :r_enrich]
            st.zc[k] = Uz.reshape(z0, n, -1)
            # enrichment from the x-left / z-right projected residual of every block
            er = st.local_apply(k, Xb, "XAX", "ZAX")
            eb = st.local_rhs(k, "XB", "ZB", shape=er[0].shape)
            E = np.concatenate([(er[a] - eb[a]).reshape(r0 * n, -1) for a in range(3)], axis=1)
            Q, R = np.linalg.qr(np.hstack([U, E]))
            carry = R @ np.vstack([SV, np.zeros((E.shape[1], 3 * r1))])
            st.xc[k] = Q.reshape(r0, n, -1)
            st.xc[k + 1] = np.einsum("aBb,bjc->ajBc", carry.reshape(-1, 3, r1), st.xc[k + 1])
            st.update_left(k)
        x = st.x()
        rep.trace.append(res)
        rep.iterations = sweep + 1
        if res <= eps:
            rep.converged = True
            break
        tr = rep.trace
        if stall_ratio is not None and len(tr) >= 4 and min(tr[-2:]) > stall_ratio * min(tr[:-2]):
            rep.extra["stalled"] = True
            break
        st.reverse()
    rep.residual = rep.trace[-1]
    rep.extra["ranks"] = x.ranks
    return _extract_u(kkt, x), rep, x


def _extract_u(kkt: KktSystem, x: BlockTT) -> np.ndarray:
    """Parameter block at time slot 0, without expanding other time slots."""
    ub = x.block(1)
    first = ub.cores[0][:, 0:1, :]
    head = first.reshape(-1)  # (1, 1, r1) -> r1
    rest = ub.cores[1:]
    core = np.einsum("b,bjc->jc", head, rest[0])[None]
    return kkt.u_scale * TTVector([core] + rest[1:]).full().ravel()
