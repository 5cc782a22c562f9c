import numpy as np
import pytest
from hypothesis import given, strategies as st

from scpuq.models.oligopoly import (ConfigError, OligopolyConfig, cost_ladder, cost_ladder_covariance,
                                    cournot_closed_form, duopoly, make_oligopoly, market_price)
from scpuq.ncp import derivative_mismatch
from scpuq.solver import solve


def test_config_errors():
    for kw in (dict(a=10, b=0.5, gamma=(1,)), dict(a=-1, b=-1, gamma=(1,)), dict(a=10, b=-1, gamma=())):
        with pytest.raises(ConfigError):
            OligopolyConfig(**kw)


def test_duopoly_closed_form_and_price():
    cfg = duopoly()
    q = cournot_closed_form(cfg)
    assert np.allclose(q, [4, 5])
    assert market_price(cfg, q) == 6.0
    assert np.allclose(make_oligopoly(cfg).F(q), 0)


def test_monopoly():
    cfg = OligopolyConfig(a=20, b=-2, gamma=(4,))
    q = solve(make_oligopoly(cfg)).x_star
    assert q == pytest.approx([(20 - 4) / 4])


def test_three_players():
    assert np.allclose(cournot_closed_form(cost_ladder(3)), [203, 197, 191])


def test_priced_out_player():
    cfg = OligopolyConfig(a=10, b=-1, gamma=(1, 1, 9.5))
    q = cournot_closed_form(cfg)
    assert q[2] == 0 and np.allclose(q[:2], 3)
    assert np.allclose(solve(make_oligopoly(cfg)).x_star, q, atol=1e-9)


def test_labels_and_covariance():
    p = make_oligopoly(cost_ladder(4))
    assert p.param_labels == ("gamma1", "gamma2", "gamma3", "gamma4", "a", "b")
    C = cost_ladder_covariance(4)
    assert np.array_equal(np.diag(C), [1, 1, 1, 1, 0, 0])


@given(st.lists(st.floats(0, 10), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_derivatives_fd(x, dth):
    p = make_oligopoly(duopoly())
    gx, gt = derivative_mismatch(p, np.array(x), p.theta_mean + np.array(dth) * [1, 1, 1, 0.1])
    assert gx <= 1e-6 and gt <= 1e-6


def test_batch_evaluators_agree():
    p = make_oligopoly(cost_ladder(5))
    rng = np.random.default_rng(0)
    X = rng.random((7, 5)) * 100
    Th = p.theta_mean + rng.standard_normal((7, 7))
    FB = p.eval_F_batch(X, Th)
    GB = p.eval_G_batch(X, Th)
    for i in range(7):
        assert np.allclose(FB[i], p.F(X[i], Th[i]))
        assert np.allclose(GB[i], p.G(X[i], Th[i]))
