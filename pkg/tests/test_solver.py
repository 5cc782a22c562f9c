import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scpuq.models.gas import build_gas_market, toy_model
from scpuq.models.oligopoly import OligopolyConfig, cost_ladder, cournot_closed_form, duopoly, make_oligopoly
from scpuq.ncp import ConeSpec, ParametrizedNCP, check_solution
from scpuq.solver import (EvaluationError, SolverConfig, default_start, solve, solve_many, solve_perturbed,
                          thread_count)


def scalar_problem():
    return ParametrizedNCP(n=1, m=1, cone=ConeSpec.nonnegative_orthant(1), theta_mean=[-1.0],
                           eval_F=lambda x, th: x + th, eval_G=lambda x, th: np.eye(1),
                           eval_L=lambda x, th: np.eye(1))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(residual_tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(c1=1.5)


def test_duopoly():
    r = solve(make_oligopoly(duopoly()))
    assert r.converged
    assert np.abs(r.x_star - [4, 5]).max() <= 1e-8


def test_three_player_closed_form():
    r = solve(make_oligopoly(cost_ladder(3)))
    assert np.abs(r.x_star - [203, 197, 191]).max() <= 1e-8


def test_scalar_complementarity():
    assert solve(scalar_problem()).x_star == pytest.approx([1.0])


def test_nan_raises():
    p = ParametrizedNCP(n=1, m=1, cone=ConeSpec.nonnegative_orthant(1), theta_mean=[0.0],
                        eval_F=lambda x, th: np.array([np.nan]), eval_G=lambda x, th: np.eye(1),
                        eval_L=lambda x, th: np.eye(1))
    with pytest.raises(EvaluationError):
        solve(p)


def test_nonconvergence_reported():
    # x >= 0, F = -1 - x^2 < 0 everywhere: no solution
    p = ParametrizedNCP(n=1, m=1, cone=ConeSpec.nonnegative_orthant(1), theta_mean=[1.0],
                        eval_F=lambda x, th: -th - x ** 2, eval_G=lambda x, th: np.diag(-2 * x),
                        eval_L=lambda x, th: -np.eye(1))
    r = solve(p, cfg=SolverConfig(max_iter=30))
    assert not r.converged


def test_monotone_merit_and_idempotence():
    p = make_oligopoly(cost_ladder(12))
    r = solve(p)
    h = np.array(r.merit_history)
    assert np.all(np.diff(h) <= 0)
    again = solve_perturbed(p, p.theta_mean, r.x_star)
    assert again.iterations <= 1
    assert np.allclose(again.x_star, r.x_star, atol=1e-10)


def test_perturbed_shift_matches_linear_response():
    p = make_oligopoly(duopoly())
    delta = 1e-4
    th = p.theta_mean + np.array([delta, 0, 0, 0])
    r = solve_perturbed(p, th, np.array([4.0, 5.0]))
    assert r.x_star - [4, 5] == pytest.approx(-delta * np.array([2 / 3, -1 / 3]), abs=1e-12)


def test_gas_perturbed_demand_keeps_market_consistent():
    gs = build_gas_market(toy_model())
    base = solve(gs.problem)
    th = gs.problem.theta_mean.copy()
    th[gs.theta_index[("dem_int", 2, 0)]] *= 1.02
    r = solve_perturbed(gs.problem, th, base.x_star)
    assert r.converged
    assert check_solution(gs.problem, r.x_star, th, tol=1e-8).ok
    assert max(gs.residuals(r.x_star, th).values()) <= 1e-8


def test_default_start_in_cone():
    p = make_oligopoly(cost_ladder(5))
    x0 = default_start(p, p.theta_mean)
    assert np.all(x0 >= 0)


@settings(max_examples=40)
@given(st.floats(50, 500), st.floats(-2, -0.05), st.lists(st.floats(1, 200), min_size=1, max_size=8))
def test_random_oligopolies_match_closed_form(a, b, gamma):
    cfg = OligopolyConfig(a=a, b=b, gamma=tuple(gamma))
    r = solve(make_oligopoly(cfg))
    assert r.converged
    ref = cournot_closed_form(cfg)
    assert np.abs(r.x_star - ref).max() <= 1e-7 * max(1.0, np.abs(ref).max())
    assert check_solution(make_oligopoly(cfg), r.x_star, tol=1e-6).ok


def test_batch_matches_scalar(monkeypatch):
    p = make_oligopoly(cost_ladder(8))
    x = solve(p).x_star
    rng = np.random.default_rng(0)
    Th = p.theta_mean + np.concatenate([rng.standard_normal((50, 8)) * 3, np.zeros((50, 2))], axis=1)
    batch = solve_many(p, Th, x)
    assert batch.converged.all()
    for i in range(0, 50, 7):
        assert np.allclose(batch.X[i], solve_perturbed(p, Th[i], x).x_star, atol=1e-9)
    monkeypatch.setenv("SCPUQ_THREADS", "2")
    assert thread_count() == 2
