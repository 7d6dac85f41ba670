"""Hierarchical sparsity prior and the IAS (iterative alternating sequential) MAP solver.

The prior is ``u_j | theta_j ~ N(0, theta_j)`` with a generalized gamma
hyperprior on ``theta_j``. The MAP objective

    F(u, theta) = 1/2 |z - A u|^2 + 1/2 sum u_j^2 / theta_j
                  - (r beta - 3/2) sum log(theta_j / vartheta_j) + sum (theta_j / vartheta_j)^r

is minimized alternately in ``u`` (a Tikhonov-type least-squares solve)
and in ``theta`` (a componentwise scalar equation). ``z`` and ``A`` are
assumed whitened.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import HyperModelError, SolverError, VarianceDomainError
from .solvers import SolverReport, amen_block_solve, build_kkt, cgls

log = logging.getLogger(__name__)

NONZERO_REL = 1e-3


@dataclass(frozen=True, eq=False)
class HyperModel:
    """Generalized gamma hyperprior ``(r, beta, vartheta)``.

    ``eta`` is stored explicitly: it is the magnitude of ``r beta - 3/2``.
    """

    r: float
    beta: float
    eta: float
    vartheta: object = 1.0

    def __post_init__(self):
        if self.r == 0 or not np.isfinite(self.r):
            raise HyperModelError("r must be a nonzero real")
        if not self.beta > 0 or not self.eta > 0:
            raise HyperModelError(f"beta and eta must be positive, got {self.beta}, {self.eta}")
        vt = np.asarray(self.vartheta, dtype=float)
        if np.any(~(vt > 0)):
            raise HyperModelError("vartheta must be positive")
        if not np.isclose(abs(self.signed_eta), self.eta, rtol=1e-8, atol=1e-12):
            raise HyperModelError(
                f"eta={self.eta} does not match |r beta - 3/2| = {abs(self.signed_eta)}")

    @property
    def signed_eta(self) -> float:
        """``r beta - 3/2`` (negative for the inverse gamma row)."""
        return self.r * self.beta - 1.5

    def same_as(self, other: "HyperModel") -> bool:
        return (self.r, self.beta, self.eta) == (other.r, other.beta, other.eta) and bool(
            np.all(np.asarray(self.vartheta) == np.asarray(other.vartheta)))

    def with_vartheta(self, vartheta) -> "HyperModel":
        return HyperModel(self.r, self.beta, self.eta, vartheta)

    @classmethod
    def preset(cls, r: float, vartheta=None) -> "HyperModel":
        """Table rows for ``r`` in {1, 0.5, -1}; ``vartheta`` overrides the constant."""
        if r == 1:
            eta, beta, vt = 1e-5, 1.5 + 1e-5, 3.3
        elif r == 0.5:
            eta, beta, vt = 1e-3, (1.5 + 1e-3) / 0.5, 8.3
        elif r == -1:
            eta, beta, vt = 4.5, 3.0, 1.5e-4
        else:
            raise HyperModelError(f"no preset for r={r}")
        return cls(float(r), beta, eta, vt if vartheta is None else vartheta)


# ---------------------------------------------------------------------------
# theta updates


def _stationarity(xi, zsq, r, s):
    """``r xi^(r+1) - s xi - z^2/2`` (stationarity in scaled variables)."""
    return r * xi ** (r + 1) - s * xi - 0.5 * zsq


def _solve_xi(zsq, r, s):
    """Positive root of the scaled stationarity equation, vectorized.

    Brackets the root by doubling/halving and bisects in ``log xi``; the
    function is negative left of the unique positive root and positive right
    of it for every admissible (r, s).
    """
    zsq = np.asarray(zsq, dtype=float)
    if r > 0 and s > 0:
        lo = np.full(zsq.shape, (s / r) ** (1.0 / r))
        hi = np.maximum((2 * s / r) ** (1.0 / r), (np.maximum(zsq, 1e-300) / r) ** (1.0 / (r + 1)))
        hi = np.maximum(hi, lo)
    else:
        lo = np.ones_like(zsq)
        hi = np.ones_like(zsq)
        for _ in range(2000):
            bad = _stationarity(lo, zsq, r, s) > 0
            if not bad.any():
                break
            lo[bad] *= 0.5
        for _ in range(2000):
            bad = _stationarity(hi, zsq, r, s) < 0
            if not bad.any():
                break
            hi[bad] *= 2.0
        if np.any(_stationarity(lo, zsq, r, s) > 0) or np.any(_stationarity(hi, zsq, r, s) < 0):
            raise HyperModelError(f"no positive stationary point for r={r}, r*beta-3/2={s}")
    a, b = np.log(lo), np.log(hi)
    for _ in range(200):
        m = 0.5 * (a + b)
        neg = _stationarity(np.exp(m), zsq, r, s) < 0
        a = np.where(neg, m, a)
        b = np.where(neg, b, m)
        if np.all(b - a < 1e-15):
            break
    return np.exp(0.5 * (a + b))


def update_theta(u, m: HyperModel) -> np.ndarray:
    """Componentwise minimizer of ``F`` in ``theta`` for fixed ``u``."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise VarianceDomainError("u must be finite")
    vt = np.broadcast_to(np.asarray(m.vartheta, dtype=float), u.shape)
    if m.r == 1:
        s = m.signed_eta
        return 0.5 * vt * (s + np.sqrt(s * s + 2.0 * u * u / vt))
    if m.r == -1:
        return (0.5 * u * u + vt) / (-m.signed_eta)
    xi = _solve_xi(u * u / vt, m.r, m.signed_eta)
    return vt * xi


def update_theta_ode(z_abs, m: HyperModel, rtol: float = 1e-12, atol: float = 1e-14) -> np.ndarray:
    """Scaled variance ``xi = phi(|z|)`` from the initial value problem

    ``phi'(z) = 2 z phi / (2 r^2 phi^(r+1) + z^2)``, ``phi(0) = (eta/r)^(1/r)``,

    integrated once up to ``max|z|`` with dense output at every ``|z_j|``.
    ``theta_j = vartheta_j * xi_j`` with ``z_j = u_j / sqrt(vartheta_j)``.
    """
    if m.r <= 0:
        raise HyperModelError("the ODE path needs r > 0; use update_theta for r < 0")
    z = np.abs(np.asarray(z_abs, dtype=float))
    phi0 = (m.eta / m.r) ** (1.0 / m.r)
    out = np.full(z.shape, phi0)
    zmax = float(z.max()) if z.size else 0.0
    if zmax == 0.0:
        return out
    r = m.r

    def rhs(t, y):
        return [2 * t * y[0] / (2 * r * r * y[0] ** (r + 1) + t * t)]

    pts = np.unique(z[z > 0])
    sol = solve_ivp(rhs, (0.0, zmax), [phi0], method="DOP853", t_eval=pts, rtol=rtol, atol=atol)
    if not sol.success:
        raise HyperModelError(f"phi integration failed: {sol.message}")
    vals = np.interp(z, np.concatenate([[0.0], sol.t]), np.concatenate([[phi0], sol.y[0]]))
    return vals


def convexity_threshold(m2: HyperModel, exponent: float = 1.0) -> np.ndarray:
    """``vartheta * (eta / (|r| |r - 1|))^exponent``; below it the model-2 objective is convex."""
    if m2.r in (0, 1):
        raise HyperModelError("threshold undefined for r in {0, 1}")
    return np.asarray(m2.vartheta, dtype=float) * (m2.eta / (abs(m2.r) * abs(m2.r - 1))) ** exponent


# ---------------------------------------------------------------------------
# objective and sensitivity scaling


def objective(u, theta, m: HyperModel, apply_A: Callable, z, m2: Optional[HyperModel] = None,
              mask=None, Au=None) -> float:
    """MAP objective; components with ``mask`` set use ``m2``."""
    u = np.asarray(u, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(~(theta > 0)):
        raise VarianceDomainError("theta must be positive")
    r, s, vt = _component_params(m, u.shape, m2, mask)
    res = np.asarray(z, dtype=float) - (apply_A(u) if Au is None else Au)
    q = theta / vt
    return float(0.5 * res @ res + 0.5 * np.sum(u * u / theta) - np.sum(s * np.log(q)) + np.sum(q ** r))


def _component_params(m, shape, m2=None, mask=None):
    r = np.full(shape, m.r)
    s = np.full(shape, m.signed_eta)
    vt = np.broadcast_to(np.asarray(m.vartheta, dtype=float), shape).copy()
    if m2 is not None and mask is not None and np.any(mask):
        mask = np.asarray(mask, dtype=bool)
        r[mask] = m2.r
        s[mask] = m2.signed_eta
        vt[mask] = np.broadcast_to(np.asarray(m2.vartheta, dtype=float), shape)[mask]
    return r, s, vt


@dataclass
class ScaleResult:
    vartheta: np.ndarray
    col_norms_sq: np.ndarray
    flagged: np.ndarray
    rel_error: float = 0.0


def sensitivity_scale(apply_A: Callable, n: int, C: float = 1.0, probes: Optional[int] = None,
                      apply_At: Optional[Callable] = None, mode: str = "exact",
                      seed: int = 0) -> ScaleResult:
    """``vartheta_j = C / |A e_j|^2``.

    Modes:
        exact: one forward application per column.
        stochastic: randomized range finder with ``probes`` Gaussian probes,
            ``|A e_j|^2 ~= |Q^T A e_j|^2`` computed from ``A^T Q``; needs
            ``apply_At``. ``rel_error`` is an a posteriori estimate of the
            relative range error from 8 extra probes.
        hutchinson: diagonal estimator ``mean(v * A^T A v)`` with Rademacher
            probes (kept for comparison; high variance for smoothing maps).
    """
    if not C > 0:
        raise ValueError("C must be positive")
    rng = np.random.default_rng(seed)
    rel_error = 0.0
    if mode == "exact":
        norms = np.array([np.sum(apply_A(e) ** 2) for e in np.eye(n)])
    elif mode == "stochastic":
        if apply_At is None or not probes:
            raise ValueError("stochastic mode needs apply_At and a probe count")
        Om = rng.standard_normal((n, probes))
        Y = np.column_stack([apply_A(Om[:, k]) for k in range(probes)])
        Q, _ = np.linalg.qr(Y)
        B = np.column_stack([apply_At(Q[:, k]) for k in range(Q.shape[1])])
        norms = np.sum(B * B, axis=1)
        test = np.column_stack([apply_A(v) for v in rng.standard_normal((8, n))])
        resid = test - Q @ (Q.T @ test)
        rel_error = float(np.linalg.norm(resid) / max(np.linalg.norm(test), 1e-300))
    elif mode == "hutchinson":
        if apply_At is None or not probes:
            raise ValueError("hutchinson mode needs apply_At and a probe count")
        acc = np.zeros(n)
        for _ in range(probes):
            v = rng.choice([-1.0, 1.0], size=n)
            acc += v * apply_At(apply_A(v))
        norms = acc / probes
    else:
        raise ValueError(f"unknown mode {mode!r}")
    flagged = ~(norms > 0)
    vt = np.empty(n)
    vt[~flagged] = C / norms[~flagged]
    if flagged.any():
        warnings.warn(f"{int(flagged.sum())} zero-sensitivity columns; using neighbor medians")
        good = vt[~flagged]
        fallback = np.median(good) if good.size else C
        for j in np.flatnonzero(flagged):
            nb = [vt[k] for k in (j - 1, j + 1) if 0 <= k < n and not flagged[k]]
            vt[j] = np.median(nb) if nb else fallback
    return ScaleResult(vt, norms, flagged, rel_error)


# ---------------------------------------------------------------------------
# problems


class InverseProblem:
    """Whitened reduced problem with a choice of inner u-solver.

    Args:
        sys: a SpaceTimeSystem.
        z: observed terminal state.
        sigma: noise standard deviation; data and map are scaled by 1/sigma.
            Noiseless data (``sigma = 0``) is whitened with
            ``noise_floor * rms(z)`` instead.
        solver: ``full-cgls`` (explicit dense A), ``tt-cgls`` (TT forward and
            adjoint solves with tolerance ``matvec_eps``) or ``amen-kkt``
            (constrained formulation solved by block AMEn).
        warm_start: start each inner solve from the previous one. Off by
            default for CGLS, whose early iterates shape the sparsity path.
        amen_inner_tol, amen_inner_maxiter: local MINRES controls passed
            to :func:`amen_block_solve`.
    """

    SOLVERS = ("full-cgls", "tt-cgls", "amen-kkt")

    def __init__(self, sys, z, sigma: float = 1.0, solver: str = "full-cgls",
                 cgls_iter: int = 30, cgls_tol: float = 1e-6, matvec_eps: float = 1e-6,
                 amen_eps: float = 1e-4, amen_sweeps: int = 20, rmax: Optional[int] = None,
                 A: Optional[np.ndarray] = None, warm_start: bool = False,
                 amen_inner_tol: Optional[float] = None, amen_inner_maxiter: int = 3000,
                 noise_floor: float = 1e-6):
        if solver not in self.SOLVERS:
            raise ValueError(f"solver must be one of {self.SOLVERS}, got {solver!r}")
        self.sys = sys
        self.z = np.asarray(z, dtype=float).ravel()
        self.sigma = float(sigma)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        eff = self.sigma if self.sigma > 0 else noise_floor * float(np.sqrt(np.mean(self.z ** 2)))
        self.scale = 1.0 / eff if eff > 0 else 1.0
        self.solver = solver
        self.cgls_iter, self.cgls_tol = cgls_iter, cgls_tol
        self.matvec_eps, self.amen_eps, self.amen_sweeps, self.rmax = matvec_eps, amen_eps, amen_sweeps, rmax
        self.warm_start = warm_start
        self.amen_inner_tol, self.amen_inner_maxiter = amen_inner_tol, amen_inner_maxiter
        self._A = A
        self._kkt_x = None
        self.n = sys.n

    @property
    def zw(self) -> np.ndarray:
        return self.scale * self.z

    @property
    def dense_A(self) -> np.ndarray:
        if self._A is None:
            from .forward import dense_A
            self._A = dense_A(self.sys)
        return self._A

    def apply_A(self, u) -> np.ndarray:
        from .forward import apply_A
        if self.solver == "tt-cgls":
            return self.scale * apply_A(self.sys, u, self.matvec_eps, "tt", rmax=self.rmax)
        if self.solver == "full-cgls":
            return self.scale * (self.dense_A @ u)
        return self.scale * apply_A(self.sys, u, 1e-10, "dense")

    def apply_At(self, w) -> np.ndarray:
        from .forward import apply_At
        if self.solver == "tt-cgls":
            return self.scale * apply_At(self.sys, w, self.matvec_eps, "tt", rmax=self.rmax)
        if self.solver == "full-cgls":
            return self.scale * (self.dense_A.T @ w)
        return self.scale * apply_At(self.sys, w, 1e-10, "dense")

    def solve(self, theta, u_prev=None) -> tuple[np.ndarray, SolverReport]:
        if self.solver in ("full-cgls", "tt-cgls"):
            return cgls(self.apply_A, self.apply_At, theta, self.zw, self.cgls_iter, self.cgls_tol,
                        u_prev if self.warm_start else None)
        kkt = build_kkt(self.sys, theta, self.z, scale=self.scale)
        x0 = None
        if self.warm_start and self._kkt_x is not None:
            # stored blocks are (y/c, u/b, lam/a); b changes with theta, so the
            # parameter block of the guess is only approximately rescaled
            x_prev, b_prev, a_prev, c_prev = self._kkt_x
            ratio = float(np.exp(np.mean(np.log(b_prev / kkt.u_scale))))
            x0 = x_prev.rescaled([c_prev / kkt.y_scale, ratio, a_prev / kkt.lam_scale])
        u, rep, x = amen_block_solve(kkt, self.amen_eps, self.rmax, self.amen_sweeps, x0=x0,
                                     inner_tol=self.amen_inner_tol, inner_maxiter=self.amen_inner_maxiter)
        self._kkt_x = (x, kkt.u_scale, kkt.lam_scale, kkt.y_scale)
        return u, rep


# ---------------------------------------------------------------------------
# IAS drivers


@dataclass
class IasState:
    u: np.ndarray
    theta: np.ndarray
    switched: np.ndarray  # per-index flag: True once the index uses model 2
    iteration: int = 0
    objective: list = field(default_factory=list)
    objective_half: list = field(default_factory=list)
    nonzeros: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    switch_counts: list = field(default_factory=list)
    u_change: list = field(default_factory=list)
    converged: bool = False
    reports: list = field(default_factory=list)

    @property
    def switched_set(self) -> set:
        return set(np.flatnonzero(self.switched).tolist())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "nonzero_count", "inner_iterations", "model_switch_count"])
            for i in range(self.iteration):
                obj = self.objective[i] if i < len(self.objective) else float("nan")
                w.writerow([i + 1, repr(float(obj)), self.nonzeros[i], self.inner_iterations[i],
                            self.switch_counts[i]])


def nonzero_count(u, rel: float = NONZERO_REL) -> int:
    u = np.abs(np.asarray(u))
    top = u.max() if u.size else 0.0
    return int(np.count_nonzero(u > rel * top)) if top > 0 else 0


def support(u, rel: float = NONZERO_REL) -> np.ndarray:
    u = np.abs(np.asarray(u))
    top = u.max() if u.size else 0.0
    return np.flatnonzero(u > rel * top) if top > 0 else np.array([], dtype=int)


def _run(problem, m1, m2, choose, max_iter, tol, check_from, bound_c=None, threshold=None,
         track_objective=True, callback=None) -> IasState:
    n = problem.n
    vt1 = np.broadcast_to(np.asarray(m1.vartheta, dtype=float), (n,))
    st = IasState(np.zeros(n), vt1.copy(), np.zeros(n, dtype=bool))
    for i in range(max_iter):
        try:
            u, rep = problem.solve(st.theta, st.u if i > 0 else None)
        except SolverError as exc:
            raise SolverError(f"inner solve failed at IAS iteration {i + 1}: {exc}", exc.report) from exc
        if bound_c is not None and st.switched.any():
            cap = bound_c * np.sqrt(threshold[st.switched])
            u[st.switched] = np.clip(u[st.switched], -cap, cap)
        Au = problem.apply_A(u) if track_objective else None
        if track_objective:
            st.objective_half.append(objective(u, st.theta, m1, problem.apply_A, problem.zw, m2,
                                               st.switched, Au=Au))
        switched = choose(i, st)
        th = update_theta(u, m1)
        if m2 is not None and switched.any():
            th[switched] = update_theta(u, m2)[switched]
        change = np.linalg.norm(u - st.u) / max(np.linalg.norm(u), 1e-300)
        st.u, st.theta, st.switched = u, th, switched
        st.iteration = i + 1
        st.reports.append(rep)
        st.inner_iterations.append(rep.iterations)
        st.nonzeros.append(nonzero_count(u))
        st.switch_counts.append(int(switched.sum()))
        st.u_change.append(float(change))
        if track_objective:
            st.objective.append(objective(u, th, m1, problem.apply_A, problem.zw, m2, switched, Au=Au))
        if callback is not None:
            callback(st)
        log.debug("IAS %d: nnz=%d inner=%d change=%.3e", i + 1, st.nonzeros[-1], rep.iterations, change)
        if i >= check_from and change <= tol:
            st.converged = True
            break
    return st


def ias_plain(problem, m: HyperModel, max_iter: int = 50, tol: float = 1e-6, **kw) -> IasState:
    """Alternate the u-solve and the theta update with a single hypermodel."""
    return _run(problem, m, None, lambda i, st: st.switched, max_iter, tol, 1, **kw)


def ias_global_hybrid(problem, m1: HyperModel, m2: HyperModel, i_s: int = 10, max_iter: int = 50,
                      tol: float = 1e-6, **kw) -> IasState:
    """Model ``m1`` for the first ``i_s`` iterations, ``m2`` for all components after.

    Convergence is only tested once the switch has happened.
    """
    if i_s < 1:
        raise ValueError("i_s must be >= 1")
    n = problem.n
    allm2 = np.ones(n, dtype=bool)
    none = np.zeros(n, dtype=bool)
    return _run(problem, m1, m2, lambda i, st: allm2 if i >= i_s else none, max_iter, tol,
                max(i_s, 1), **kw)


def ias_local_hybrid(problem, m1: HyperModel, m2: HyperModel, bound_c: float = 1.0,
                     max_iter: int = 50, tol: float = 1e-6, exponent: float = 1.0, **kw) -> IasState:
    """Per-index switch to ``m2`` once ``theta_j`` falls below the convexity threshold.

    Switched indices never return to ``m1``; their ``u_j`` is clipped to
    ``|u_j| <= bound_c * sqrt(t_j)`` after every inner solve.
    """
    n = problem.n
    if m2.same_as(m1):
        thr = np.full(n, -np.inf)
    else:
        thr = np.broadcast_to(convexity_threshold(m2, exponent), (n,)).astype(float)

    def choose(i, st):
        return st.switched | (st.theta < thr)

    return _run(problem, m1, m2, choose, max_iter, tol, 1, bound_c=bound_c,
                threshold=np.maximum(thr, 0.0), **kw)
