import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scpuq.models.oligopoly import duopoly, make_oligopoly
from scpuq.ncp import classify_activity
from scpuq.optim import (AssumptionError, EqConstrainedProgram, kkt_linear_response, quadratic_program,
                         solve_program, verify_qp_exactness)
from scpuq.solver import solve
from scpuq.uq import build_linear_response, propagate_covariance


def random_pd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


def test_unconstrained_exact():
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    prog = quadratic_program(G)
    lr = kkt_linear_response(prog, np.zeros(2), np.zeros(0), np.zeros(2))
    assert np.allclose(lr.T, -np.linalg.inv(G), atol=1e-14)
    assert lr.sign == 1.0


def test_equality_qp_against_resolve():
    # min 1/2|x|^2 + th1*x1  s.t.  x1 + x2 = th2
    prog = quadratic_program(np.eye(2), A=[[1.0, 1.0]], jac_c=[[1.0, 0.0], [0.0, 0.0]],
                             jac_b=[[0.0, 1.0]], theta_mean=[0.3, 2.0])
    th = prog.theta_mean
    x, y = solve_program(prog, th)
    assert prog.kkt_residual(x, y, th) <= 1e-12
    lr = kkt_linear_response(prog, x, y, th)
    d = 1e-3
    for j in range(2):
        e = np.zeros(2)
        e[j] = d
        x2, y2 = solve_program(prog, th + e)
        assert np.allclose((np.concatenate([x2, y2]) - np.concatenate([x, y])) / d, lr.T[:, j], atol=1e-9)
    # constraint consistency: A dx = db
    assert np.allclose(prog.A @ lr.T[:2], prog.jac_b(th), atol=1e-10)
    assert np.array_equal(lr.Phi_prime, lr.Phi_prime.T)
    assert not propagate_covariance(lr, np.zeros((2, 2))).C_star.any()


def test_licq_and_convexity_errors():
    bad_a = quadratic_program(np.eye(2), A=[[1.0, 1.0], [2.0, 2.0]], jac_c=np.eye(2), jac_b=np.zeros((2, 2)))
    with pytest.raises(AssumptionError, match="LICQ"):
        kkt_linear_response(bad_a, np.zeros(2), np.zeros(2), np.zeros(2))
    bad_g = quadratic_program(np.diag([1.0, -1.0]))
    with pytest.raises(AssumptionError, match="convex"):
        kkt_linear_response(bad_g, np.zeros(2), np.zeros(0), np.zeros(2))
    with pytest.raises(ValueError):
        kkt_linear_response(quadratic_program(np.eye(2)), np.ones(2), np.zeros(0), np.zeros(2))


def test_nonquadratic_program():
    # g(x) = sum exp(x), c = theta, no constraints: x* = log(-theta)
    prog = EqConstrainedProgram(
        eval_grad_g=np.exp, eval_hess_g=lambda x: np.diag(np.exp(x)),
        c_of_theta=lambda th: th, jac_c=lambda th: np.eye(2),
        A=np.zeros((0, 2)), b_of_theta=lambda th: np.zeros(0), jac_b=lambda th: np.zeros((0, 2)),
        theta_mean=np.array([-1.0, -2.0]))
    x, y = solve_program(prog)
    assert np.allclose(x, np.log([1.0, 2.0]))
    lr = kkt_linear_response(prog, x, y)
    assert np.allclose(lr.T, -np.diag(1 / np.array([1.0, 2.0])))


def test_diagonal_decoupled():
    G = np.diag([2.0, 4.0, 0.5])
    C = np.diag([1.0, 3.0, 2.0])
    rep = verify_qp_exactness(G, C, n_samples=2000)
    assert np.allclose(np.diag(rep.analytic), np.diag(C) / np.diag(G) ** 2, rtol=1e-14)


@settings(max_examples=15)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_exactness_and_mc(n, seed):
    rng = np.random.default_rng(seed)
    G = random_pd(rng, n)
    B = rng.standard_normal((n, n))
    rep = verify_qp_exactness(G, B @ B.T, n_samples=10_000, seed=seed)
    assert rep.exactness_gap <= 1e-12 * max(1.0, np.abs(rep.closed_form).max())
    assert rep.max_z <= 5.0


def test_mc_deviation_shrinks():
    rng = np.random.default_rng(4)
    G = random_pd(rng, 4)
    C = np.eye(4)
    small = np.mean([verify_qp_exactness(G, C, 1000, seed=s).max_abs_deviation for s in range(5)])
    large = np.mean([verify_qp_exactness(G, C, 100_000, seed=s).max_abs_deviation for s in range(5)])
    assert large < small / 4


def test_duopoly_as_linear_map_matches_ncp():
    # interior duopoly: F = G x + L theta linear in x; KKT response of 1/2 x'Gx + c(theta)'x
    p = make_oligopoly(duopoly())
    sol = classify_activity(p, solve(p).x_star)
    lr = build_linear_response(p, sol)
    G = p.G(sol.x_star)
    L = p.L(sol.x_star)
    prog = quadratic_program(G, jac_c=L, theta_mean=p.theta_mean)
    kkt = kkt_linear_response(prog, sol.x_star, np.zeros(0), p.theta_mean, tol=np.inf)
    assert np.allclose(kkt.T, -lr.T, atol=1e-12)
