"""Implicit-Euler space-time discretization of the heat problem.

Each step solves ``(tau nu K + M) y_i = M y_{i-1}`` with ``y_0 = u``; the
observation is the terminal state. The all-at-once matrix is
``K_big = tau I (x) nu K + II (x) M`` with ``II`` lower bidiagonal, and the
parameter-to-observable map is ``A = C K_big^{-1} M0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .assembly import Discretization, KroneckerSumOperator, discretize
from .bspline import make_uniform_open_knots
from .errors import ShapeMismatchError, SolverError
from .geometry import ControlNet
from .solvers import amen_solve
from .tensor_train import TTVector, dense_to_tt, tt_apply, tt_round


@dataclass(eq=False)
class SpaceTimeSystem:
    """Interior (Dirichlet-reduced) mass/stiffness plus time-stepping data."""

    M: KroneckerSumOperator
    K: KroneckerSumOperator
    N_t: int = 50
    T: float = 1.0
    nu: float = 0.1

    def __post_init__(self):
        if self.N_t < 1 or self.T <= 0 or self.nu < 0:
            raise ValueError(f"need N_t >= 1, T > 0, nu >= 0; got {self.N_t}, {self.T}, {self.nu}")
        if self.M.sizes != self.K.sizes:
            raise ShapeMismatchError("mass and stiffness sizes differ")

    @property
    def tau(self) -> float:
        return self.T / self.N_t

    @property
    def space_shape(self) -> tuple:
        return tuple(self.M.sizes)

    @property
    def n(self) -> int:
        return int(np.prod(self.space_shape))

    @property
    def step_operator(self) -> KroneckerSumOperator:
        """``S = tau nu K + M``, symmetric positive definite."""
        return self.K.scaled(self.tau * self.nu) + self.M

    def time_bidiagonal(self) -> np.ndarray:
        return np.eye(self.N_t) - np.eye(self.N_t, k=-1)

    # dense pieces (small grids and the full-matrix solver path)
    def mass_dense(self) -> np.ndarray:
        return self._mass_dense

    @cached_property
    def _mass_dense(self):
        return self.M.to_dense(cap=2 ** 28)

    @cached_property
    def _step_cholesky(self):
        S = self.step_operator.to_dense(cap=2 ** 28)
        return sla.cho_factor(0.5 * (S + S.T))

    def dense_big(self) -> np.ndarray:
        """All-at-once block-bidiagonal matrix (oracle use only)."""
        S = self.step_operator.to_dense()
        M = self.mass_dense()
        return np.kron(np.eye(self.N_t), S - M) + np.kron(self.time_bidiagonal(), M)

    @cached_property
    def tt_step(self):
        return self.step_operator.to_tt(1e-14)

    @cached_property
    def tt_mass(self):
        return self.M.to_tt(1e-14)


def build_system(net: ControlNet, n_basis, degree: int = 2, N_t: int = 50, T: float = 1.0,
                 nu: float = 0.1, eps_w: float = 1e-8) -> tuple[SpaceTimeSystem, Discretization]:
    """Discretize ``net`` with uniform open knots and wrap it in a SpaceTimeSystem."""
    if np.ndim(n_basis) == 0:
        n_basis = [int(n_basis)] * net.dim
    if len(n_basis) != net.dim:
        raise ShapeMismatchError(f"{len(n_basis)} basis counts for a {net.dim}D geometry")
    spaces = [make_uniform_open_knots(int(n), degree) for n in n_basis]
    disc = discretize(net, spaces, eps_w)
    return SpaceTimeSystem(disc.mass, disc.stiffness, N_t, T, nu), disc


@dataclass
class ForwardResult:
    trajectory: list
    terminal: object
    reports: list = field(default_factory=list)


def _as_dense(u, n):
    if isinstance(u, TTVector):
        u = u.full()
    u = np.asarray(u, dtype=float).ravel()
    if u.size != n:
        raise ShapeMismatchError(f"vector of length {u.size}, expected {n} spatial dofs")
    return u


def _tt_step_solve(sys, b, x0, eps, rmax, max_sweeps, reports):
    y, rep = amen_solve(sys.tt_step, b, x0, eps, rmax, max_sweeps)
    reports.append(rep)
    if not rep.converged:
        if rmax is None:
            raise SolverError(f"time-step solve stalled at relative residual {rep.residual:.3e}", rep)
        # a rank cap makes the map inexact by design; keep the truncated state
        rep.warnings.append(f"rank cap {rmax} reached at relative residual {rep.residual:.3e}")
    return y


def simulate_forward(sys: SpaceTimeSystem, u0, path: str = "dense", eps: float = 1e-10,
                     rmax: Optional[int] = None, max_sweeps: int = 20,
                     keep_trajectory: bool = True) -> ForwardResult:
    """Run the implicit-Euler recursion from ``u0``.

    ``path="dense"`` uses a Cholesky factorization of the step matrix;
    ``path="tt"`` keeps states in TT format and solves each step with AMEn
    (warm-started from the previous state) to relative residual ``eps``.
    """
    if path == "dense":
        y = _as_dense(u0, sys.n)
        M = sys.mass_dense()
        traj = []
        for _ in range(sys.N_t):
            y = sla.cho_solve(sys._step_cholesky, M @ y)
            if keep_trajectory:
                traj.append(y)
        return ForwardResult(traj, y)
    if path != "tt":
        raise ValueError(f"unknown path {path!r}")
    y = u0 if isinstance(u0, TTVector) else dense_to_tt(_as_dense(u0, sys.n).reshape(sys.space_shape), 1e-14)
    if y.shape != sys.space_shape:
        raise ShapeMismatchError(f"TT shape {y.shape} vs spatial shape {sys.space_shape}")
    reports, traj = [], []
    for _ in range(sys.N_t):
        b = tt_round(tt_apply(sys.tt_mass, y), eps * 1e-2)
        y = _tt_step_solve(sys, b, y, eps, rmax, max_sweeps, reports)
        if keep_trajectory:
            traj.append(y)
    return ForwardResult(traj, y, reports)


def apply_A(sys: SpaceTimeSystem, u0, eps: float = 1e-10, path: str = "tt", **kw) -> np.ndarray:
    """Terminal state of the forward recursion, as a dense spatial vector."""
    res = simulate_forward(sys, u0, path, eps, keep_trajectory=False, **kw)
    y = res.terminal
    return y.full().ravel() if isinstance(y, TTVector) else y


def apply_At(sys: SpaceTimeSystem, w, eps: float = 1e-10, path: str = "tt", **kw) -> np.ndarray:
    """``M0^T lam`` where ``K_big^T lam = C^T w`` (a backward-in-time sweep).

    ``K_big^T`` is block upper bidiagonal with symmetric blocks, so
    ``S lam_N = w`` and ``S lam_i = M lam_{i+1}``; the result is ``M lam_1``.
    """
    if path == "dense":
        lam = sla.cho_solve(sys._step_cholesky, _as_dense(w, sys.n))
        M = sys.mass_dense()
        for _ in range(sys.N_t - 1):
            lam = sla.cho_solve(sys._step_cholesky, M @ lam)
        return M @ lam
    if path != "tt":
        raise ValueError(f"unknown path {path!r}")
    rmax, max_sweeps = kw.get("rmax"), kw.get("max_sweeps", 20)
    wv = _as_dense(w, sys.n)
    if not np.any(wv):
        return np.zeros(sys.n)
    b = dense_to_tt(wv.reshape(sys.space_shape), 1e-14)
    reports = []
    lam = _tt_step_solve(sys, b, b, eps, rmax, max_sweeps, reports)
    for _ in range(sys.N_t - 1):
        b = tt_round(tt_apply(sys.tt_mass, lam), eps * 1e-2)
        lam = _tt_step_solve(sys, b, lam, eps, rmax, max_sweeps, reports)
    return tt_apply(sys.tt_mass, lam).full().ravel()


def dense_A(sys: SpaceTimeSystem) -> np.ndarray:
    """Explicit ``A = (S^{-1} M)^{N_t}`` via repeated Cholesky solves."""
    M = sys.mass_dense()
    A = np.eye(sys.n)
    for _ in range(sys.N_t):
        A = sla.cho_solve(sys._step_cholesky, M @ A)
    return A


def dense_A_oracle(sys: SpaceTimeSystem) -> np.ndarray:
    """``C K_big^{-1} M0`` from the assembled all-at-once matrix."""
    n, Nt = sys.n, sys.N_t
    Kb = sys.dense_big()
    M0 = np.zeros((n * Nt, n))
    M0[:n] = sys.mass_dense()
    Y = np.linalg.solve(Kb, M0)
    return Y[-n:]


@dataclass
class Observation:
    z: np.ndarray
    sigma: float
    seed: int
    clean: Optional[np.ndarray] = None


def make_observation(sys: SpaceTimeSystem, u_true, sigma: float, seed: int,
                     A: Optional[np.ndarray] = None, path: str = "dense") -> Observation:
    """``z = A u_true + e`` with i.i.d. ``N(0, sigma^2)`` noise from ``default_rng(seed)``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    u = _as_dense(u_true, sys.n)
    clean = A @ u if A is not None else apply_A(sys, u, path=path)
    noise = np.random.default_rng(seed).standard_normal(clean.shape) * sigma
    return Observation(clean + noise, float(sigma), int(seed), clean)
