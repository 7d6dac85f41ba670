import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttias.errors import ShapeMismatchError, VarianceDomainError
from ttias.forward import build_system, dense_A
from ttias.geometry import quarter_annulus
from ttias.solvers import (
    SolverReport, amen_block_solve, amen_solve, build_kkt, cgls, kkt_balance,
)
from ttias.tensor_train import TTVector, tt_from_kron_sum, tt_identity, tt_kron_operator, tt_rank1


def _normal_solution(A, theta, z):
    return np.linalg.solve(A.T @ A + np.diag(1 / theta), A.T @ z)


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# --- CGLS ------------------------------------------------------------------

def test_cgls_zero_data():
    A = np.eye(5)
    u, rep = cgls(lambda v: A @ v, lambda w: A.T @ w, np.ones(5), np.zeros(5))
    assert not u.any() and rep.converged


def test_cgls_vanishing_regularization(rng):
    z = rng.standard_normal(6)
    theta = np.full(6, 1e8)
    u, _ = cgls(lambda v: v, lambda w: w, theta, z, 50, 1e-12)
    np.testing.assert_allclose(u, z / (1 + 1 / theta), rtol=1e-10)


def test_cgls_matches_normal_equations(small_system, rng):
    A = dense_A(small_system)
    theta = rng.uniform(0.1, 2, small_system.n)
    z = rng.standard_normal(small_system.n) * 5
    u, rep = cgls(lambda v: 5 * A @ v, lambda w: 5 * A.T @ w, theta, z, 500, 1e-13)
    assert _rel(u, _normal_solution(5 * A, theta, z)) <= 1e-8
    assert rep.converged
    # CGLS minimizes the damped residual over growing Krylov spaces
    assert np.all(np.diff(rep.extra["ls_residuals"]) <= 1e-12)


def test_cgls_rejects_bad_variance():
    with pytest.raises(VarianceDomainError):
        cgls(lambda v: v, lambda w: w, np.array([1.0, -1.0]), np.ones(2))
    with pytest.raises(ValueError):
        cgls(lambda v: v, lambda w: w, np.ones(2), np.ones(2), tol=0)


def test_report_csv(tmp_path):
    rep = SolverReport("x", trace=[1.0, 0.5])
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["iteration,residual", "1,1.0", "2,0.5"]


# --- single-block AMEn -----------------------------------------------------

def _spd(n, rng):
    B = rng.standard_normal((n, n))
    return B @ B.T / n + 0.1 * np.eye(n)


def test_amen_identity(rng):
    b = TTVector([rng.standard_normal(s) for s in [(1, 4, 2), (2, 5, 2), (2, 3, 1)]])
    x, rep = amen_solve(tt_identity(b.shape), b, eps=1e-12)
    assert rep.iterations == 1
    np.testing.assert_allclose(x.full(), b.full(), atol=1e-12)


def test_amen_rank_one_kron(rng):
    mats = [_spd(8, rng) for _ in range(3)]
    b = tt_rank1([rng.standard_normal(8) for _ in range(3)])
    x, rep = amen_solve(tt_kron_operator(mats), b, eps=1e-8)
    A = np.kron(np.kron(mats[0], mats[1]), mats[2])
    ref = np.linalg.solve(A, b.full().ravel())
    assert rep.converged
    assert _rel(x.full().ravel(), ref) <= 1e-8 * np.linalg.cond(A)
    assert np.linalg.norm(A @ x.full().ravel() - b.full().ravel()) <= 1e-8 * np.linalg.norm(b.full())


@settings(max_examples=20)
@given(seed=st.integers(0, 10 ** 6))
def test_amen_energy_and_residual_monotone(seed):
    rng = np.random.default_rng(seed)
    ns = rng.integers(3, 7, 4)
    terms = [[_spd(n, rng) for n in ns] for _ in range(3)]
    A = tt_from_kron_sum(terms)
    r = [1, 2, 3, 2, 1]
    b = TTVector([rng.standard_normal((r[k], n, r[k + 1])) for k, n in enumerate(ns)])
    x, rep = amen_solve(A, b, eps=1e-10, max_sweeps=12, track_energy=True)
    e = np.asarray(rep.extra["energy"])
    assert np.all(np.diff(e) <= 1e-12 * np.abs(e).max())
    assert np.all(np.diff(rep.trace) <= 0)
    Ad = A.full()
    ref = np.linalg.solve(Ad, b.full().ravel())
    assert _rel(x.full().ravel(), ref) <= 10 * np.linalg.cond(Ad) * max(rep.residual, 1e-14)


def test_amen_shape_mismatch(rng):
    with pytest.raises(ShapeMismatchError):
        amen_solve(tt_identity((3, 4)), tt_rank1([np.ones(3), np.ones(5)]))


# --- KKT -------------------------------------------------------------------

@pytest.fixture(scope="module")
def kkt_case():
    sys, _ = build_system(quarter_annulus(), 10, N_t=4)
    rng = np.random.default_rng(0)
    theta = rng.uniform(0.1, 2, sys.n)
    z = rng.standard_normal(sys.n)
    s = 3.0
    A = s * dense_A(sys)
    return sys, theta, z, s, _normal_solution(A, theta, s * z)


def test_kkt_schur_oracle(kkt_case):
    sys, theta, z, s, u_ref = kkt_case
    kkt = build_kkt(sys, theta, z, scale=s)
    S, f = kkt.dense_compact()
    assert np.linalg.norm(S - S.T) == 0.0
    ev = np.linalg.eigvalsh(S)
    n, ny = sys.n, sys.n * sys.N_t
    assert (ev > 0).sum() == ny + n and (ev < 0).sum() == ny
    u = np.linalg.solve(S, f)[ny:ny + n]
    assert _rel(u, u_ref) <= 1e-8


@pytest.mark.parametrize("balance", [None, "auto", (0.5, 2.0, 3.0)])
def test_padded_operator(kkt_case, balance):
    sys, theta, z, s, u_ref = kkt_case
    kkt = build_kkt(sys, theta, z, scale=s, balance=balance)
    P = kkt.dense()
    assert np.linalg.norm(P - P.T) <= 1e-14 * np.linalg.norm(P)
    x = np.linalg.solve(P, kkt.dense_rhs())
    assert _rel(kkt.extract_u(x), u_ref) <= 1e-8


def test_balance_improves_conditioning(kkt_case):
    sys, theta, z, s, _ = kkt_case
    theta = np.geomspace(1e-5, 1.0, sys.n)
    plain = np.linalg.cond(build_kkt(sys, theta, z, s, balance=None).dense())
    bal = np.linalg.cond(build_kkt(sys, theta, z, s).dense())
    assert bal < 1e-3 * plain
    a, b, c = kkt_balance(sys, theta, s)
    np.testing.assert_allclose(b, np.sqrt(theta))
    assert a > 0 and c > 0


def test_kkt_zero_data(kkt_case):
    sys, theta, _, s, _ = kkt_case
    kkt = build_kkt(sys, theta, np.zeros(sys.n), scale=s)
    assert not np.linalg.solve(kkt.dense(), kkt.dense_rhs()).any()
    u, rep, _ = amen_block_solve(kkt)
    assert not u.any() and rep.converged


def test_kkt_input_checks(kkt_case):
    sys, theta, z, s, _ = kkt_case
    with pytest.raises(VarianceDomainError):
        build_kkt(sys, -theta, z)
    with pytest.raises(ShapeMismatchError):
        build_kkt(sys, theta[:-1], z)
    with pytest.raises(ValueError):
        build_kkt(sys, theta, z, balance="nope")


def test_block_amen_matches_dense(kkt_case):
    sys, theta, z, s, u_ref = kkt_case
    kkt = build_kkt(sys, theta, z, scale=s)
    u, rep, x = amen_block_solve(kkt, 1e-8, max_sweeps=30)
    assert rep.converged
    assert _rel(u, u_ref) <= 1e-6
    # blocks of the returned state reproduce the dense solution
    xd = np.linalg.solve(kkt.dense(), kkt.dense_rhs()).reshape(3, -1)
    for a in range(3):
        blk = x.block(a).full().ravel()
        assert np.linalg.norm(blk - xd[a]) <= 1e-6 * np.linalg.norm(xd)
    # warm start from the solution converges immediately
    u2, rep2, _ = amen_block_solve(kkt, 1e-8, x0=x)
    assert rep2.iterations <= 2 and _rel(u2, u_ref) <= 1e-6


def test_block_amen_large_theta_limit():
    # N_t = 1 keeps A well conditioned; with huge variances the MAP estimate
    # is the unregularized solution of A u = z
    sys, _ = build_system(quarter_annulus(), 8, N_t=1, nu=0.01)
    A = dense_A(sys)
    rng = np.random.default_rng(5)
    u_true = rng.standard_normal(sys.n)
    kkt = build_kkt(sys, np.full(sys.n, 1e8), A @ u_true)
    u, rep, _ = amen_block_solve(kkt, 1e-10, max_sweeps=30)
    assert _rel(u, u_true) <= 1e-5
