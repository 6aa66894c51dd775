import math

import numpy as np
import pytest
from scipy import stats

from kfplab import fk
from kfplab.geometry import Interval
from kfplab.kernel import GaussianKernelSpec
from kfplab.sde import ZERO, ForceField, SimConfig

from oracles import cov_closed_mp

DOM = Interval(-1.0, 1.0)
WIDE = Interval(-100.0, 100.0)


def _problem(f, g, t=0.5, x=(0.0, 0.2), force=ZERO, spec=None, dom=DOM):
    spec = spec or GaussianKernelSpec(1, 1.0, 1.0)
    return fk.FKProblem(f, g, t, np.asarray(x, float), force, spec, dom)


def test_constant_data_gives_constant():
    c = lambda z: np.full(len(z), 0.7)
    est = fk.estimate_u(_problem(c, c, force=ForceField("linear")), 2000, SimConfig(dt=0.01))
    assert est.value == pytest.approx(0.7, rel=1e-14)
    assert est.std_error < 1e-14


def test_problem_validation():
    with pytest.raises(ValueError):
        _problem(None, None, t=0.0)


def test_linear_observable_mean_far_from_boundary():
    # E[q_t] for the free process is q + p (1 - e^{-gamma t}) / gamma
    spec = GaussianKernelSpec(1, 0.7, 1.0)
    pr = _problem(lambda z: z[:, 0], lambda z: z[:, 0], t=0.8, x=(0.3, 0.5), spec=spec, dom=WIDE)
    est = fk.estimate_u(pr, 40_000, SimConfig(dt=0.01, seed=2))
    exact = 0.3 + 0.5 * (1 - math.exp(-0.7 * 0.8)) / 0.7
    assert abs(est.value - exact) < 4 * est.std_error


def test_boundary_data_used_on_exit():
    spec = GaussianKernelSpec(1, 0.0, 1e-12)
    pr = _problem(lambda z: np.zeros(len(z)), lambda z: 2.0 + z[:, 1], t=2.0, x=(0.0, 0.8), spec=spec)
    est = fk.estimate_u(pr, 10, SimConfig(dt=0.01))
    assert est.value == pytest.approx(2.8, abs=1e-9)


def test_adjoint_mean_far_from_boundary():
    # diamond process from (q, -p) with friction -gamma, momentum flipped back
    g, t = 0.6, 0.5
    spec = GaussianKernelSpec(1, g, 1.0)
    res = fk.simulate_adjoint_batch(ZERO, spec, WIDE, np.array([0.1, 0.4]), 40_000, SimConfig(dt=0.01, horizon=t))
    q, p = res.final_state[:, 0], res.final_state[:, 1]
    mq = 0.1 - 0.4 * math.expm1(g * t) / g
    mp_ = 0.4 * math.exp(g * t)
    assert abs(q.mean() - mq) < 4 * q.std() / 200
    assert abs(p.mean() - mp_) < 4 * p.std() / 200


def test_adjoint_exits_are_incoming():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    res = fk.simulate_adjoint_batch(ForceField("linear"), spec, DOM, np.array([0.5, 0.0]), 3000,
                                    SimConfig(dt=2e-3, horizon=1.0))
    ex = res.exited
    assert ex.sum() > 50
    q, p = res.exit_state[ex, 0], res.exit_state[ex, 1]
    assert np.all(q * p <= 0)


def test_adjoint_single_record():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    rec = fk.simulate_adjoint_absorbed(ZERO, spec, WIDE, np.array([0.0, 0.5]), SimConfig(dt=0.01, horizon=0.1),
                                       rng=np.random.default_rng(1), record_every=1)
    assert rec.states[0, 1] == pytest.approx(0.5)


def test_default_bandwidth_rule():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    h1 = fk.default_bandwidth(spec, 0.5, 1000)
    h2 = fk.default_bandwidth(spec, 0.5, 64000)
    np.testing.assert_allclose(h1 / h2, 64 ** (1 / 6))
    cqq, _, cpp = (float(v) for v in cov_closed_mp(1.0, 1.0, 0.5))
    assert h1[1] / h1[0] == pytest.approx(math.sqrt(cpp / cqq))


def test_kde_of_free_samples_matches_smoothed_gaussian():
    # a Gaussian KDE of Gaussian samples estimates the density of N(m, C + H^2)
    g, s, t = 0.5, 1.0, 0.6
    spec = GaussianKernelSpec(1, g, s)
    x0 = np.array([0.0, 0.3])
    res = fk.simulate_absorbed_batch(ZERO, spec, WIDE, x0, 50_000, SimConfig(dt=0.01, horizon=t, seed=4))
    h = np.array([0.05, 0.1])
    pts = np.array([[0.1, 0.2], [0.3, -0.4], [-0.2, 0.5]])
    est = fk.estimate_density_kde(res.final_state, pts, h)
    cqq, cqp, cpp = (float(v) for v in cov_closed_mp(g, s, t))
    m = np.array([0.3 * (1 - math.exp(-g * t)) / g, 0.3 * math.exp(-g * t)])
    ref = stats.multivariate_normal(m, np.array([[cqq, cqp], [cqp, cpp]]) + np.diag(h**2)).pdf(pts)
    assert np.all(np.abs(est.values - ref) < 4 * est.std_errors)


def test_kde_normalized_by_total():
    smp = np.zeros((10, 2))
    a = fk.estimate_density_kde(smp, [[0.0, 0.0]], [1.0, 1.0])
    b = fk.estimate_density_kde(smp, [[0.0, 0.0]], [1.0, 1.0], n_total=40)
    assert b.values[0] == pytest.approx(a.values[0] / 4)
    assert a.values[0] == pytest.approx(1 / (2 * math.pi))


def test_kde_validation():
    with pytest.raises(ValueError):
        fk.estimate_density_kde(np.zeros((0, 2)), [[0, 0]], [1, 1])
    with pytest.raises(ValueError):
        fk.estimate_density_kde(np.zeros((3, 2)), [[0, 0]], [1, 0])


@pytest.mark.slow
def test_reversibility_ratio_near_one():
    spec = GaussianKernelSpec(1, 0.8, 1.0)
    r = fk.reversibility_ratio(ForceField("linear"), spec, DOM, 0.4, [0.0, 0.3], [-0.2, 0.5], 100_000,
                               cfg=SimConfig(dt=2e-3), seed=5, n_boot=200)
    assert r.ci[0] < r.ratio < r.ci[1]
    assert abs(r.ratio - 1) < 0.1


def test_reversibility_raises_when_density_vanishes():
    spec = GaussianKernelSpec(1, 0.8, 0.05)
    with pytest.raises(RuntimeError):
        fk.reversibility_ratio(ZERO, spec, DOM, 0.2, [0.0, 0.0], [0.9, -0.9], 2000, cfg=SimConfig(dt=0.01))


def test_survival_scan_decreases_to_boundary():
    spec = GaussianKernelSpec(1, 0.8, 1.0)
    pts = [(1 - 0.5**k, 0.5) for k in range(1, 6)]
    rows = fk.boundary_vanishing_scan(ForceField("linear"), spec, DOM, 0.4, pts, 5000, SimConfig(dt=2e-3))
    est = [r.estimate for r in rows]
    assert all(a >= b for a, b in zip(est, est[1:]))
    assert rows[-1].distance == pytest.approx(0.5**5)
    assert est[-1] < 0.2


def test_scan_argument_errors():
    spec = GaussianKernelSpec()
    with pytest.raises(ValueError):
        fk.boundary_vanishing_scan(ZERO, spec, DOM, 0.4, [(0, 0)], 10, slot="y")
    with pytest.raises(ValueError):
        fk.boundary_vanishing_scan(ZERO, spec, DOM, 0.4, [(0, 0)], 10, slot="z")


def test_nested_chapman_kolmogorov_agrees():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    two, one = fk.nested_chapman_kolmogorov(ForceField("linear"), spec, DOM, 0.5, 0.25, [0.0, 0.2],
                                            [[0.1, 0.0]], 300, 100, SimConfig(dt=5e-3, seed=9))
    se = math.hypot(two.std_errors[0], one.std_errors[0])
    assert abs(two.values[0] - one.values[0]) < 4 * se


def test_csv_roundtrip(tmp_path):
    p = tmp_path / "e.csv"
    v = 0.1 + 0.2
    fk.write_estimates_csv(p, [(1, v)], ["i", "v"], config_hash="abc")
    lines = p.read_text().splitlines()
    assert lines[0] == "i,v,config_hash"
    assert float(lines[1].split(",")[1]) == v
