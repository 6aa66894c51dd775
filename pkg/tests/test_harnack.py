import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfplab import harnack as hk
from kfplab.geometry import Ball, Interval

coord = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(coord, min_size=4, max_size=4), st.floats(1e-3, 1.0))
def test_bridge_matches_endpoints_and_bounds(v, delta):
    x, y = np.array(v[:2]), np.array(v[2:])
    path = hk.hermite_bridge(x, y, delta)
    np.testing.assert_allclose(path.position(0.0), x[:1], atol=1e-12)
    np.testing.assert_allclose(path.velocity(0.0), x[1:], atol=1e-12)
    np.testing.assert_allclose(path.position(delta), y[:1], atol=1e-12)
    np.testing.assert_allclose(path.velocity(delta), y[1:], atol=1e-9 * (1 + abs(y[1])))
    assert path.bounds_report(n_grid=201)["holds"]


def test_bridge_derivatives_by_finite_differences():
    path = hk.hermite_bridge([0.1, -0.3, 0.5, 0.2], [0.4, 1.0, -0.2, 0.0], 0.7)
    t, h = 0.31, 1e-5
    fd1 = (path.position(t + h) - path.position(t - h)) / (2 * h)
    fd2 = (path.velocity(t + h) - path.velocity(t - h)) / (2 * h)
    np.testing.assert_allclose(path.velocity(t), fd1, rtol=1e-8)
    np.testing.assert_allclose(path.acceleration(t), fd2, rtol=1e-8)


def test_bridge_validation():
    with pytest.raises(ValueError):
        hk.hermite_bridge([0, 0], [1, 1], 0.0)
    with pytest.raises(ValueError):
        hk.hermite_bridge([0, 0, 0], [1, 1, 1], 1.0)


@pytest.mark.parametrize("kw", [dict(k=-1.0), dict(eps=0.0), dict(r_base=0.9, delta_base=0.5),
                                dict(c_base=1.0), dict(c_path=1.0)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        hk.HarnackChainSpec(Interval(-1, 1), **dict(dict(k=0.5, delta=0.8), **kw))


def test_membership_of_k():
    spec = hk.HarnackChainSpec(Interval(-1, 1), k=0.5, delta=0.8)
    assert spec.delta_k == 0.8
    assert spec.in_k([0.1, 0.5]) and not spec.in_k([0.3, 0.0]) and not spec.in_k([0.0, 0.6])


@pytest.fixture(scope="module")
def chain():
    spec = hk.HarnackChainSpec(Interval(-1, 1), k=0.5, delta=0.8)
    return hk.build_admissible_chain(spec, [-0.2, -0.5], [0.2, 0.5])


def test_chain_endpoints_and_path_class(chain):
    rep = hk.check_path_membership(chain)
    assert rep.ok, rep.violations
    assert rep.margins["endpoint_error"] < 1e-12
    assert chain.m_kt <= chain.m_worst


def test_chain_boxes_are_nested(chain):
    rep = hk.verify_chain_membership(chain)
    assert rep.ok, rep.violations
    assert rep.n_points == chain.n_eps
    assert chain.n_eps * chain.alpha_eps == pytest.approx(chain.spec.horizon, rel=1e-12)


def test_doubling_r_breaks_boxes(chain):
    rep = hk.verify_chain_membership(chain, r=2 * chain.r_eps)
    assert rep.violations["q_box"] + rep.violations["p_box"] > 0


def test_chain_in_ball():
    spec = hk.HarnackChainSpec(Ball((0.0, 0.0), 1.0), k=0.3, delta=0.5)
    ch = hk.build_admissible_chain(spec, [0.2, 0.0, 0.0, 0.3], [-0.3, 0.2, 0.1, -0.2])
    assert hk.check_path_membership(ch, n_grid=4000).ok


def test_points_outside_k_rejected():
    spec = hk.HarnackChainSpec(Interval(-1, 1), k=0.5, delta=0.8)
    with pytest.raises(ValueError):
        hk.build_admissible_chain(spec, [0.5, 0.0], [0.0, 0.0])


def test_constants():
    assert hk.harnack_constant(10.0, 3) == pytest.approx(1000.0)
    assert hk.harnack_constant(10.0, 10**6) == math.inf
    assert hk.log_harnack_constant(10.0, 10**6) == pytest.approx(10**6 * math.log(10))
    for bad in ((1.0, 3), (10.0, 0)):
        with pytest.raises(ValueError):
            hk.harnack_constant(*bad)


def test_constant_from_chain(chain):
    assert hk.log_harnack_constant(chain.spec.c_base, chain) == pytest.approx(chain.n_eps * math.log(10))
    assert chain.report()["log10_constant"] == pytest.approx(chain.n_eps)


def test_empirical_constant():
    u = lambda t, x: np.exp(-t) * (2 + x[:, 0])
    pts = np.array([[0.0, 0.0], [0.5, 0.1], [-0.5, 0.2]])
    c = hk.empirical_harnack_constant(u, pts, 0.2, 1.0)
    assert c == pytest.approx(2.5 * math.exp(1.0) / 1.5)
