import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scpuq.models.oligopoly import cost_ladder, cost_ladder_covariance, duopoly, make_oligopoly
from scpuq.montecarlo import (SamplingError, SamplingPlan, covariance_factor, mc_covariance, mc_sample_count, race,
                              sample_parameters, standard_draws, stratum_counts)
from scpuq.ncp import ConeSpec, ParametrizedNCP
from scpuq.uq import diagonal_cv

TRACE_C1 = 0.9377777777777778  # 0.4289 + 0.5089 before rounding


def identity_map(m):
    return ParametrizedNCP(n=m, m=m, cone=ConeSpec(m, ()), theta_mean=np.zeros(m),
                           eval_F=lambda x, th: x - th, eval_G=lambda x, th: np.eye(m),
                           eval_L=lambda x, th: -np.eye(m))


def test_sample_count_rule():
    assert mc_sample_count(5) == 100
    assert mc_sample_count(10) == 103
    assert mc_sample_count(20) == 104858


def test_plan_validation():
    with pytest.raises(ValueError):
        SamplingPlan(1)
    with pytest.raises(ValueError):
        SamplingPlan(10, scheme="sobol")
    with pytest.raises(ValueError):
        SamplingPlan(10, strata_per_dim=3)


@given(st.integers(2, 400), st.integers(1, 6), st.integers(0, 1000))
def test_strata_balanced(N, m, seed):
    Z = standard_draws(m, SamplingPlan(N, seed=seed))
    counts = stratum_counts(Z)
    assert np.all(np.abs(counts[:, 0] - counts[:, 1]) <= 1)
    assert np.all(counts.sum(axis=1) == N)


def test_even_counts_exact():
    Z = standard_draws(4, SamplingPlan(1000, seed=1))
    assert np.array_equal(stratum_counts(Z), np.full((4, 2), 500))


def test_zero_covariance_gives_mean():
    th = np.array([2.0, 1.0, 15.0, -1.0])
    S = sample_parameters(np.zeros((4, 4)), th, SamplingPlan(50))
    assert np.array_equal(S, np.tile(th, (50, 1)))


def test_sample_covariance_close():
    C1 = diagonal_cv([2, 1, 15, -1], 0.1).C
    S = sample_parameters(C1, np.array([2.0, 1.0, 15.0, -1.0]), SamplingPlan(1000, seed=3))
    emp = np.cov(S, rowvar=False)
    assert np.linalg.norm(emp - C1) <= 0.1 * np.linalg.norm(C1)


def test_factor_singular_and_failure():
    C = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = covariance_factor(C)
    assert np.allclose(L @ L.T, C, atol=1e-6)
    with pytest.raises(SamplingError):
        covariance_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_reproducible():
    p = make_oligopoly(duopoly())
    C = diagonal_cv(p.theta_mean, 0.1)
    plan = SamplingPlan(300, seed=11)
    a = mc_covariance(p, p.theta_mean, C, plan, runs=2, keep_samples=True)
    b = mc_covariance(p, p.theta_mean, C, plan, runs=2, keep_samples=True)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.cov, b.cov) and a.traces == b.traces
    assert np.array_equal(a.cov, a.cov.T)


def test_duopoly_trace_within_three_se():
    p = make_oligopoly(duopoly())
    rep = mc_covariance(p, p.theta_mean, diagonal_cv(p.theta_mean, 0.1), SamplingPlan(2000, seed=0))
    assert rep.failures == 0 and not rep.unreliable
    assert abs(rep.trace - TRACE_C1) <= 3 * rep.trace_ses[0]


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_identity_map_recovers_input(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((3, 3))
    C = B @ B.T
    N = 4000
    rep = mc_covariance(identity_map(3), np.zeros(3), C, SamplingPlan(N, seed=seed, scheme="plain"))
    se = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C ** 2) / (N - 1))
    assert np.all(np.abs(rep.cov - C) <= 5 * se)


def test_unbiased_estimator():
    rep = mc_covariance(identity_map(2), np.zeros(2), np.eye(2), SamplingPlan(10, seed=2), keep_samples=True)
    X = rep.solutions
    d = X - X.mean(axis=0)
    assert np.allclose(rep.cov, d.T @ d / 9)


def test_race_small_and_extrapolated():
    def make(n):
        return make_oligopoly(cost_ladder(n)), cost_ladder_covariance(n)

    rows = race(make, [5], budget=60)
    assert not rows[0].extrapolated and rows[0].mc_trace is not None
    assert rows[0].mc_samples == 100
    rows = race(make, [25], budget=0.5, pilot=50)
    assert rows[0].extrapolated and rows[0].mc_trace is None
    assert rows[0].mc_samples == mc_sample_count(25)
    assert rows[0].approx_time < 1.0
