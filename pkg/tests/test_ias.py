import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from ttias.errors import HyperModelError, VarianceDomainError
from ttias.forward import build_system, dense_A
from ttias.geometry import quarter_annulus
from ttias.ias import (
    HyperModel, InverseProblem, IasState, convexity_threshold, ias_global_hybrid, ias_local_hybrid,
    ias_plain, nonzero_count, objective, sensitivity_scale, support, update_theta, update_theta_ode,
)
from ttias.solvers import SolverReport, cgls

R1, R05, RM1 = HyperModel.preset(1), HyperModel.preset(0.5), HyperModel.preset(-1)


class DenseProblem:
    """Explicit-matrix problem with a tight CGLS inner solve."""

    def __init__(self, A, z, iters=200, tol=1e-12):
        self.A, self.zw, self.n = A, np.asarray(z, dtype=float), A.shape[1]
        self.iters, self.tol = iters, tol

    def apply_A(self, u):
        return self.A @ u

    def solve(self, theta, u_prev=None):
        return cgls(self.apply_A, lambda w: self.A.T @ w, theta, self.zw, self.iters, self.tol)


def sparse_toy(seed=0, m=60, n=100, k=4, noise=1e-3):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n)) / np.sqrt(m)
    u = np.zeros(n)
    idx = rng.choice(n, k, replace=False)
    u[idx] = rng.choice([-1.0, 1.0], k) * rng.uniform(1, 2, k)
    z = A @ u + noise * rng.standard_normal(m)
    return A / noise, u, z / noise  # whitened, as the presets expect


# --- hypermodels and theta updates -----------------------------------------

def test_presets():
    assert RM1.eta == 4.5 and RM1.beta == 3.0 and RM1.vartheta == 1.5e-4
    assert RM1.signed_eta == pytest.approx(-4.5)
    assert R1.signed_eta == pytest.approx(R1.eta)
    with pytest.raises(HyperModelError):
        HyperModel(1.0, 1.6, 0.5)  # eta inconsistent with |r beta - 3/2|
    with pytest.raises(HyperModelError):
        HyperModel(0.0, 1.0, 1.5)
    with pytest.raises(HyperModelError):
        HyperModel.preset(2)


def test_theta_at_zero():
    assert update_theta(0.0, R1) == pytest.approx(R1.vartheta * R1.eta, rel=1e-12)
    assert update_theta(0.0, RM1) == pytest.approx(1.5e-4 / 4.5, rel=1e-12)
    assert update_theta(0.0, RM1) == pytest.approx(3.333e-5, rel=2e-4)


def _bisection_theta(u, m):
    # dF/dtheta * theta = -u^2/(2 theta) - (r beta - 3/2) + r (theta/vartheta)^r
    vt = float(m.vartheta)
    g = lambda t: -u * u / (2 * t) - m.signed_eta + m.r * (t / vt) ** m.r
    lo, hi = 1e-30, 1.0
    while g(hi) < 0:
        hi *= 2
    return brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


@pytest.mark.parametrize("m", [R1, RM1, R05], ids=["r=1", "r=-1", "r=0.5"])
def test_closed_forms_match_bisection(m):
    u = np.linspace(0, 10, 201)
    ref = np.array([_bisection_theta(x, m) for x in u])
    got = update_theta(u, m)
    np.testing.assert_allclose(got, ref, rtol=1e-10)


def test_ode_matches_closed_form():
    z = np.linspace(0, 10, 101)
    vt = float(R1.vartheta)
    closed = update_theta(z * np.sqrt(vt), R1) / vt
    np.testing.assert_allclose(update_theta_ode(z, R1), closed, rtol=1e-8, atol=0)
    assert update_theta_ode(np.zeros(3), R1) == pytest.approx(R1.eta)
    assert np.all(np.diff(update_theta_ode(z, R05)) > 0)
    with pytest.raises(HyperModelError):
        update_theta_ode(z, RM1)


@given(r=st.sampled_from([1.0, 0.5, -1.0, 2.0, -0.5, 1.5]), beta=st.floats(0.1, 8),
       seed=st.integers(0, 10 ** 6), vt=st.floats(1e-6, 1e2))
def test_theta_positive_and_monotone(r, beta, seed, vt):
    s = r * beta - 1.5
    if abs(s) < 1e-6 or (r < 0 and s >= 0):
        return  # not a proper hyperprior row
    m = HyperModel(r, beta, abs(s), vt)
    u = np.sort(np.abs(np.random.default_rng(seed).standard_normal(50) * 10 ** np.random.default_rng(seed).uniform(-3, 2)))
    th = update_theta(u, m)
    assert np.all(th > 0) and np.all(np.isfinite(th))
    assert np.all(np.diff(th) >= 0)
    if r > 0:
        th2 = vt * update_theta_ode(u / np.sqrt(vt), m)
        assert np.all(th2 > 0)


def test_theta_rejects_nonfinite():
    with pytest.raises(VarianceDomainError):
        update_theta(np.array([np.nan]), R1)


def test_convexity_threshold():
    assert convexity_threshold(RM1) == pytest.approx(3.375e-4)
    assert convexity_threshold(R05) == pytest.approx(8.3 * 1e-3 / 0.25)
    assert convexity_threshold(RM1.with_vartheta(3e-4)) == pytest.approx(2 * 3.375e-4)
    with pytest.raises(HyperModelError):
        convexity_threshold(R1)


# --- objective ---------------------------------------------------------------

def test_objective_values():
    n = 7
    A = lambda u: u
    z = np.zeros(n)
    vt = float(R1.vartheta)
    f0 = objective(np.zeros(n), np.full(n, vt), R1, A, z)
    assert f0 == pytest.approx(n)
    f1 = objective(np.zeros(n), np.full(n, 2 * vt), R1, A, z)
    assert f1 - f0 == pytest.approx(-R1.eta * n * np.log(2) + n, rel=1e-12)
    with pytest.raises(VarianceDomainError):
        objective(np.zeros(n), np.zeros(n), R1, A, z)


def test_objective_gradient(rng):
    M = rng.standard_normal((5, 6))
    z, u, th = rng.standard_normal(5), rng.standard_normal(6), rng.uniform(0.5, 2, 6)
    F = lambda v: objective(v, th, R1, lambda w: M @ w, z)
    grad = M.T @ (M @ u - z) + u / th
    h = 1e-5
    fd = np.array([(F(u + h * e) - F(u - h * e)) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(fd, grad, atol=1e-8)


# --- sensitivity scaling -----------------------------------------------------

def test_sensitivity_exact():
    np.testing.assert_allclose(sensitivity_scale(lambda u: u, 4, 2.0).vartheta, 2.0)
    np.testing.assert_allclose(sensitivity_scale(lambda u: np.array([1.0, 2.0]) * u, 2, 3.0).vartheta,
                               [3.0, 0.75])
    with pytest.warns(UserWarning):
        res = sensitivity_scale(lambda u: np.array([1.0, 0.0, 2.0]) * u, 3)
    assert res.flagged.tolist() == [False, True, False]
    assert np.all(res.vartheta > 0)


def test_sensitivity_stochastic(small_system):
    A = dense_A(small_system)
    exact = sensitivity_scale(lambda u: A @ u, small_system.n)
    est = sensitivity_scale(lambda u: A @ u, small_system.n, probes=64, apply_At=lambda w: A.T @ w,
                            mode="stochastic")
    assert np.linalg.norm(est.vartheta - exact.vartheta) / np.linalg.norm(exact.vartheta) <= 0.1
    with pytest.warns(UserWarning):  # Rademacher estimates can come out negative
        hut = sensitivity_scale(lambda u: A @ u, small_system.n, probes=16, apply_At=lambda w: A.T @ w,
                                mode="hutchinson")
    assert hut.vartheta.shape == (small_system.n,)


# --- drivers -----------------------------------------------------------------

def test_zero_data_fixed_point():
    A, _, _ = sparse_toy()
    st = ias_plain(DenseProblem(A, np.zeros(A.shape[0])), R1, max_iter=5)
    assert not st.u.any()
    np.testing.assert_allclose(st.theta, update_theta(np.zeros(A.shape[1]), R1))
    assert st.converged and st.iteration == 2


def test_plain_objective_monotone():
    A, _, z = sparse_toy(1)
    st = ias_plain(DenseProblem(A, z), R1, max_iter=30, tol=0)
    tol = 10 * 1e-12 * max(abs(f) for f in st.objective)
    for i in range(1, st.iteration):
        assert st.objective_half[i] <= st.objective[i - 1] + tol  # u half-step
        assert st.objective[i] <= st.objective_half[i] + tol  # theta half-step
    assert np.all(np.diff(st.objective) <= tol)


def test_global_switch_never_fires():
    A, _, z = sparse_toy(2)
    p = DenseProblem(A, z)
    a = ias_plain(p, R1, max_iter=8, tol=0)
    b = ias_global_hybrid(p, R1, RM1, i_s=20, max_iter=8, tol=0)
    np.testing.assert_array_equal(a.u, b.u)
    assert a.nonzeros == b.nonzeros and not b.switched.any()


def test_local_with_same_model_is_plain():
    A, _, z = sparse_toy(3)
    p = DenseProblem(A, z)
    a = ias_plain(p, R1, max_iter=8, tol=0)
    b = ias_local_hybrid(p, R1, R1, max_iter=8, tol=0)
    np.testing.assert_array_equal(a.u, b.u)
    assert b.switch_counts == [0] * 8


@pytest.mark.parametrize("variant", ["plain", "global-1", "global0.5", "local-1"])
def test_support_recovery_toy(variant):
    A, u_true, z = sparse_toy(4, noise=1e-4)
    p = DenseProblem(A, z)
    if variant == "plain":
        st = ias_plain(p, R1, max_iter=50)
    elif variant.startswith("global"):
        st = ias_global_hybrid(p, R1, HyperModel.preset(float(variant[6:])), i_s=10, max_iter=50)
    else:
        st = ias_local_hybrid(p, R1, RM1, max_iter=50)
    assert set(support(st.u).tolist()) == set(np.flatnonzero(u_true).tolist())
    assert np.linalg.norm(st.u - u_true) / np.linalg.norm(u_true) < 2e-3
    assert np.all(np.diff(st.switch_counts) >= 0)


def test_sparsity_ordering_toy():
    A, _, z = sparse_toy(6, noise=2e-2)  # noisy enough that the models differ
    p = DenseProblem(A, z)
    plain = ias_plain(p, R1, max_iter=50)
    g05 = ias_global_hybrid(p, R1, R05, max_iter=50)
    gm1 = ias_global_hybrid(p, R1, RM1, max_iter=50)
    assert gm1.nonzeros[-1] <= g05.nonzeros[-1] <= plain.nonzeros[-1]


def test_local_bound_projection():
    A, _, z = sparse_toy(7)
    st = ias_local_hybrid(DenseProblem(A, z), R1, RM1, bound_c=0.5, max_iter=20, tol=0)
    cap = 0.5 * np.sqrt(convexity_threshold(RM1))
    assert np.all(np.abs(st.u[st.switched]) <= cap + 1e-15)
    assert np.all(np.diff(st.switch_counts) >= 0)


def test_state_csv(tmp_path):
    A, _, z = sparse_toy(8)
    st = ias_plain(DenseProblem(A, z), R1, max_iter=3, tol=0)
    st.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,objective,nonzero_count,inner_iterations,model_switch_count"
    assert len(lines) == 4


def test_nonzero_helpers():
    u = np.array([1.0, -5e-4, 2e-3, 0.0])
    assert nonzero_count(u) == 2 and support(u).tolist() == [0, 2]
    assert nonzero_count(np.zeros(3)) == 0


@pytest.mark.parametrize("solver", ["full-cgls", "tt-cgls", "amen-kkt"])
def test_inverse_problem_inner_solvers_agree(solver):
    sys, _ = build_system(quarter_annulus(), 10, N_t=4)
    A = dense_A(sys)
    rng = np.random.default_rng(9)
    z = A @ rng.standard_normal(sys.n) + 0.01 * rng.standard_normal(sys.n)
    theta = rng.uniform(0.1, 1, sys.n)
    ref = np.linalg.solve(A.T @ A / 1e-4 + np.diag(1 / theta), A.T @ z / 1e-4)
    p = InverseProblem(sys, z, sigma=0.01, solver=solver, cgls_iter=400, cgls_tol=1e-12,
                       matvec_eps=1e-10, amen_eps=1e-9, amen_sweeps=30)
    u, rep = p.solve(theta)
    assert np.linalg.norm(u - ref) / np.linalg.norm(ref) <= 1e-5
    with pytest.raises(ValueError):
        InverseProblem(sys, z, solver="lu")
