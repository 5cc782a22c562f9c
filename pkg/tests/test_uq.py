import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scpuq.models.gas import build_gas_market, toy_model
from scpuq.models.oligopoly import duopoly, make_oligopoly
from scpuq.ncp import FB, MIN, ConeSpec, ParametrizedNCP, classify_activity
from scpuq.solver import solve
from scpuq.uq import (CovarianceModel, NotPSDError, PreconditionError, block_covariance, build_linear_response,
                      columnwise_relative_error, condition_diagnostic, diagnostics, diagonal_cv,
                      finite_difference_T, propagate_covariance, relative_sensitivity, sensitivity, solve_response,
                      tornado, trace_uncertainty, wiener_covariance, with_correlation)

T_DUO = np.array([[2.0, -1.0, -1.0, -12.0], [-1.0, 2.0, -1.0, -15.0]]) / 3.0


@pytest.fixture(scope="module")
def duo():
    p = make_oligopoly(duopoly())
    sol = classify_activity(p, solve(p).x_star)
    return p, sol, build_linear_response(p, sol)


def linear(M, L, q, nonneg):
    n = len(q)
    M, L = np.asarray(M, float), np.asarray(L, float)
    return ParametrizedNCP(n=n, m=L.shape[1], cone=ConeSpec.from_mask(nonneg), theta_mean=np.zeros(L.shape[1]),
                           eval_F=lambda x, th: M @ x + L @ th + q, eval_G=lambda x, th: M,
                           eval_L=lambda x, th: L)


def test_duopoly_response(duo):
    _, _, lr = duo
    assert np.allclose(lr.T, T_DUO, atol=1e-12)
    assert not lr.used_pseudoinverse and lr.rank_Phi == 2


def test_identity_response():
    # interior (strong-x) rows respond one for one
    p = linear(np.eye(3), np.eye(3), -np.ones(3), [True] * 3)
    sol = classify_activity(p, np.ones(3))
    assert all(a == "strong-x" for a in sol.activity)
    assert np.array_equal(build_linear_response(p, sol).T, np.eye(3))
    # rows pinned at x = 0 by a positive F do not move at all
    q = linear(np.eye(3), np.eye(3), np.ones(3), [True] * 3)
    sol = classify_activity(q, np.zeros(3))
    assert all(a == "strong-F" for a in sol.activity)
    assert not build_linear_response(q, sol).T.any()


def test_fb_invariance(duo):
    p, sol, lr = duo
    assert np.abs(build_linear_response(p, sol, FB).T - lr.T).max() <= 1e-10


def test_weak_rows_zeroed_and_pinv():
    p = linear(np.eye(2), np.eye(2), np.array([0.0, -1.0]), [True, True])
    sol = classify_activity(p, np.array([0.0, 1.0]))
    assert list(sol.zero_set) == [0]
    lr = build_linear_response(p, sol)
    assert not lr.Phi_prime[0].any() and not lr.N_matrix[0].any()
    assert lr.used_pseudoinverse and lr.rank_Phi == 1
    assert np.allclose(lr.T, np.linalg.pinv(lr.Phi_prime) @ lr.N_matrix)
    assert np.isfinite(condition_diagnostic(lr))


def test_unclassified_precondition():
    p = make_oligopoly(duopoly())
    with pytest.raises(PreconditionError):
        build_linear_response(p, "not a solution")


def test_covariance_scenarios(duo):
    _, _, lr = duo
    r1 = propagate_covariance(lr, diagonal_cv([2, 1, 15, -1], 0.1))
    assert np.allclose(r1.C_star, [[0.4289, 0.4389], [0.4389, 0.5089]], atol=1e-4)
    assert trace_uncertainty(r1.C_star) == pytest.approx(0.9378, abs=1e-4)
    r2 = propagate_covariance(lr, np.diag([0.04, 0.01, 0, 0]))
    assert r2.std == pytest.approx([0.137, 0.094], abs=1e-3)
    assert r2.correlation()[0, 1] == pytest.approx(-0.857, abs=1e-3)
    assert not propagate_covariance(lr, np.zeros((4, 4))).C_star.any()


def test_non_psd_rejected(duo):
    _, _, lr = duo
    C = np.eye(4)
    C[0, 1] = C[1, 0] = 2.0
    with pytest.raises(NotPSDError) as exc:
        propagate_covariance(lr, C)
    assert exc.value.eigenvalues is not None and exc.value.eigenvalues.min() < 0
    with pytest.raises(NotPSDError):
        CovarianceModel(np.array([[1.0, 0.5], [0.0, 1.0]])).validate()


def test_sensitivity_and_bump(duo):
    _, _, lr = duo
    S = sensitivity(lr)
    assert S == pytest.approx(np.sqrt([5, 5, 2, 369]) / 3)
    eps = 1e-3
    C = diagonal_cv([2, 1, 15, -1], 0.1).C
    base = trace_uncertainty(propagate_covariance(lr, C).C_star)
    C[3, 3] += eps
    d = trace_uncertainty(propagate_covariance(lr, C).C_star) - base
    assert d == pytest.approx(41 * eps, rel=1e-9)
    top = tornado(S, ("g1", "g2", "a", "b"))[0]
    assert top[0] == "b"
    assert relative_sensitivity(lr, [2, 1, 15, -1]) == pytest.approx(S * [2, 1, 15, 1] * 0.01)


def test_zero_column_sensitivity():
    p = linear(np.eye(2), np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([-1.0, -1.0]), [True, True])
    sol = classify_activity(p, np.ones(2))
    assert sensitivity(build_linear_response(p, sol))[1] == 0.0


def test_condition_numbers(duo):
    _, _, lr = duo
    assert condition_diagnostic(lr) == pytest.approx(9.0)
    Phi = np.diag([2.0, 1.0, 0.0])
    _, rank, used, s, cutoff = solve_response(Phi, np.eye(3))
    assert rank == 2 and used
    nz = s[s > cutoff]
    assert (nz[0] / nz[-1]) ** 2 == pytest.approx(4.0)
    d = diagnostics(duo[2])
    assert d["rank"] == 2 and not d["ill_conditioned"]


@settings(max_examples=100)
@given(st.integers(0, 2 ** 31 - 1))
def test_psd_symmetry_preserved(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 21, size=2)
    T = rng.standard_normal((n, m))
    B = rng.standard_normal((m, m))
    C = B @ B.T
    Cs = T @ C @ T.T
    assert np.abs(Cs - Cs.T).max() <= 1e-12 * max(1.0, np.abs(Cs).max())
    assert np.linalg.eigvalsh(0.5 * (Cs + Cs.T)).min() >= -1e-10 * np.trace(Cs)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1))
def test_trace_identity_and_scenario_independence(seed):
    p = make_oligopoly(duopoly())
    sol = classify_activity(p, np.array([4.0, 5.0]))
    lr = build_linear_response(p, sol)
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((4, 4))
    C = B @ B.T
    dC = np.diag(rng.random(4))
    r0 = propagate_covariance(lr, C)
    r1 = propagate_covariance(lr, C + dC)
    S = sensitivity(lr)
    assert np.trace(r1.C_star) - np.trace(r0.C_star) == pytest.approx(np.sum(S ** 2 * np.diag(dC)), abs=1e-10 * max(1, np.trace(r1.C_star)))
    fresh = propagate_covariance(build_linear_response(p, sol), C)
    assert np.array_equal(fresh.C_star, r0.C_star)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert trace_uncertainty(Q @ C @ Q.T) == pytest.approx(np.trace(C), abs=1e-10 * np.trace(C))


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4))
def test_pseudoinverse_min_norm(seed, r):
    rng = np.random.default_rng(seed)
    Phi = rng.standard_normal((5, r)) @ rng.standard_normal((r, 5))
    N = rng.standard_normal((5, 3))
    T, rank, used, *_ = solve_response(Phi, N)
    assert used and rank == r
    U, s, Vt = np.linalg.svd(Phi)
    oracle = Vt[:r].T @ np.diag(1 / s[:r]) @ U[:, :r].T @ N
    assert np.allclose(T, oracle, atol=1e-8)
    # any other least-squares solution has larger norm
    null = Vt[r:].T @ rng.standard_normal((5 - r, 3))
    assert np.linalg.norm(T) <= np.linalg.norm(T + null)


def test_wiener_blocks():
    assert not wiener_covariance([1, 2], 0.0, [1, 2]).C.any()
    C = wiener_covariance([10, 10, 10], 0.01, [1, 2, 3]).C
    assert np.allclose(C, 0.01 * np.array([[1, 1, 1], [1, 2, 2], [1, 2, 3]]), rtol=1e-12)
    assert np.allclose(wiener_covariance([10, 10, 10], 0.01, [1, 2, 3], variance_scale=5).C, 5 * C)
    for bad in ([0, 1, 2], [1, 1, 2]):
        with pytest.raises(ValueError):
            wiener_covariance([1, 1, 1], 0.01, bad)


def test_gas_wiener_variance_scale():
    gs = build_gas_market(toy_model())
    C = gs.wiener_covariance(0.01).C
    tx = gs.theta_index
    m = gs.model
    k0 = [tx[("lin", 0, y)] for y in range(2)]
    k1 = [tx[("lin", 1, y)] for y in range(2)]
    t = np.minimum.outer(m.times, m.times)
    assert np.allclose(C[np.ix_(k0, k0)], 5 * (0.01 * m.lin[0].mean()) ** 2 * t)
    assert np.allclose(C[np.ix_(k1, k1)], (0.01 * m.lin[1].mean()) ** 2 * t)
    assert not C[np.ix_(k0, k1)].any()


def test_block_and_correlation_builders():
    cov = block_covariance([np.eye(2), CovarianceModel(4 * np.eye(1))], cross={(0, 1): [[0.5], [0.0]]})
    assert cov.C[0, 2] == 0.5 and cov.C[2, 0] == 0.5
    c2 = with_correlation(diagonal_cv([2.0, 1.0], 0.1), 0, 1, 0.6)
    assert c2.C[0, 1] == pytest.approx(0.6 * 0.2 * 0.1)


def test_finite_difference_oracle(duo):
    p, sol, lr = duo
    fd5 = finite_difference_T(p, sol, delta=1e-5)
    fd4 = finite_difference_T(p, sol, delta=1e-4)
    assert np.max(columnwise_relative_error(lr.T, fd5.T)) <= 1e-3
    # forward-difference error is first order in delta
    e5 = np.abs(fd5.T - lr.T).max()
    e4 = np.abs(fd4.T - lr.T).max()
    assert e5 < e4 and e4 / e5 == pytest.approx(10, rel=0.05)


def test_finite_difference_exact_for_linear():
    p = linear(np.array([[2.0, 0.5], [0.5, 1.0]]), np.eye(2), np.array([-1.0, -1.0]), [False, False])
    sol = classify_activity(p, solve(p).x_star)
    lr = build_linear_response(p, sol)
    for d in (1e-2, 1e-5):
        assert np.abs(finite_difference_T(p, sol, delta=d).T - lr.T).max() <= 1e-9


def test_gas_fd_and_min_fb():
    gs = build_gas_market(toy_model())
    p = gs.problem
    sol = classify_activity(p, solve(p).x_star)
    lr = build_linear_response(p, sol, MIN)
    assert np.abs(build_linear_response(p, sol, FB).T - lr.T).max() <= 1e-10
    assert np.max(columnwise_relative_error(lr.T, finite_difference_T(p, sol, 1e-5).T)) <= 1e-4
