import json
import math

import numpy as np
import pytest

from kfplab import kernel as kern
from kfplab import sde
from kfplab.geometry import Ball, BoundaryClass, Interval
from kfplab.kernel import GaussianKernelSpec
from kfplab.sde import ForceField, SimConfig

DOM = Interval(-1.0, 1.0)


def test_force_field_kinds():
    q = np.array([[0.5], [-1.0]])
    np.testing.assert_allclose(ForceField("linear", k=2.0)(q), -2 * q)
    np.testing.assert_allclose(ForceField("sine", amplitude=0.5)(q), 0.5 * np.sin(q))
    tab = ForceField("tabulated", grid=(0.0, 1.0), values=(0.0, 2.0))
    np.testing.assert_allclose(tab(np.array([0.25, 3.0])), [0.5, 2.0])
    assert ForceField().is_zero and ForceField("linear", k=0.0).is_zero


def test_force_sup_norms():
    assert ForceField("sine").sup_norm(DOM) == pytest.approx(math.sin(1.0))
    assert ForceField("sine").sup_norm(Interval(0, 3)) == 1.0
    assert ForceField("linear", k=2.0).sup_norm(DOM) == 2.0
    assert ForceField("linear").sup_norm() == math.inf
    assert ForceField("sine", amplitude=2.0).lip_const == 2.0


def test_force_dict_roundtrip():
    for f in (ForceField("linear", k=3.0), ForceField("sine", amplitude=0.2),
              ForceField("tabulated", grid=(0.0, 1.0, 2.0), values=(1.0, 0.0, 1.0))):
        assert ForceField.from_dict(f.to_dict()) == f


@pytest.mark.parametrize("kw", [dict(scheme="rk4"), dict(dt=0.0), dict(horizon=-1.0),
                                dict(scheme="perturbed"), dict(epsilon=0.1),
                                dict(exit_refine_tol=1.0, dt=0.1)])
def test_sim_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_workers_env_fallback(monkeypatch):
    monkeypatch.setenv("KFP_LAB_WORKERS", "3")
    assert sde.resolve_workers(None) == 3
    assert sde.resolve_workers(2) == 2


def test_zero_force_splitting_step_is_exact_kernel_draw():
    spec = GaussianKernelSpec(1, 0.7, 1.2)
    x = np.array([0.2, -0.4])
    a = sde.integrate_step(sde.ZERO, spec, "splitting", np.broadcast_to(x, (5, 2)), 0.3,
                           np.random.default_rng(5))
    b = kern.sample_free_step(spec, 0.3, np.broadcast_to(x, (5, 2)), np.random.default_rng(5))
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_splitting_with_linear_force_matches_moments():
    # Harmonic force: second moments of one small step against the exact
    # expansion of the generator (q'' = -q - gamma q' + noise)
    spec = GaussianKernelSpec(1, 0.5, 1.0)
    f = ForceField("linear", k=1.0)
    n, h = 400_000, 0.01
    x = np.broadcast_to(np.array([0.5, 0.2]), (n, 2))
    y = sde.integrate_step(f, spec, "splitting", x, h, np.random.default_rng(1))
    mq = 0.5 + 0.2 * h - 0.5 * h * h * (0.5 + 0.5 * 0.2)
    mp = 0.2 + h * (-0.5 - 0.5 * 0.2)
    assert y[:, 0].mean() == pytest.approx(mq, abs=5 * math.sqrt(h**3 / 3 / n) + 1e-6)
    assert y[:, 1].mean() == pytest.approx(mp, abs=5 * math.sqrt(h / n) + 1e-4)


def test_euler_step_formula():
    spec = GaussianKernelSpec(1, 1.0, 2.0)
    f = ForceField("linear", k=1.0)
    rng = np.random.default_rng(3)
    x = np.array([[0.5, 1.0]])
    y = sde.integrate_step(f, spec, "euler", x, 0.1, rng)
    z = np.random.default_rng(3).standard_normal((1, 2, 1))
    assert y[0, 0] == pytest.approx(0.5 + 0.1 * 1.0)
    assert y[0, 1] == pytest.approx(1.0 + 0.1 * (-0.5 - 1.0) + 2.0 * math.sqrt(0.1) * z[0, 1, 0])


def test_pure_transport_exit_time():
    spec = GaussianKernelSpec(1, 0.0, 1e-12)
    cfg = SimConfig(dt=0.01, horizon=2.0)
    rec = sde.simulate_absorbed(sde.ZERO, spec, DOM, np.array([0.0, 0.8]), cfg)
    assert rec.status == "absorbed"
    assert rec.tau == pytest.approx(1.25, abs=2 * cfg.exit_refine_tol)
    assert rec.exit_class == "GammaPlus"


def test_refine_exit_on_cubic():
    # straight flight from q = 0.9 with velocity 1: crossing of q = 1 at 0.1
    tau, st = sde.refine_exit(np.array([0.9, 1.0]), np.array([1.1, 1.0]), 0.2, DOM, 1e-12)
    assert tau == pytest.approx(0.1, abs=1e-11)
    assert st[0] >= 1.0 and st[0] - 1.0 < 1e-10
    with pytest.raises(ValueError):
        sde.refine_exit(np.array([0.0, 1.0]), np.array([0.1, 1.0]), 0.1, DOM, 1e-12)


def test_start_outside_domain_rejected():
    with pytest.raises(ValueError):
        sde.simulate_absorbed_batch(sde.ZERO, GaussianKernelSpec(), DOM, np.array([1.5, 0.0]), 4, SimConfig())


def test_outgoing_boundary_start_is_absorbed_at_once():
    res = sde.simulate_absorbed_batch(sde.ZERO, GaussianKernelSpec(), DOM, np.array([1.0, 0.3]), 10,
                                      SimConfig(horizon=0.1))
    assert np.all(res.tau == 0.0)
    assert np.all(res.exit_class == BoundaryClass.GAMMA_PLUS)


def test_determinism_and_worker_independence():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    f = ForceField("linear", k=1.0)
    cfg = SimConfig(dt=0.01, horizon=0.5, seed=7, block_size=256)
    a = sde.simulate_absorbed_batch(f, spec, DOM, np.array([0.5, 0.0]), 1000, cfg)
    b = sde.simulate_absorbed_batch(f, spec, DOM, np.array([0.5, 0.0]), 1000, cfg)
    from dataclasses import replace

    c = sde.simulate_absorbed_batch(f, spec, DOM, np.array([0.5, 0.0]), 1000, replace(cfg, workers=2))
    for r in (b, c):
        np.testing.assert_array_equal(a.tau, r.tau)
        np.testing.assert_array_equal(a.final_state, r.final_state)


def test_exit_states_on_boundary_and_outgoing():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    res = sde.simulate_absorbed_batch(ForceField("linear"), spec, DOM, np.array([0.5, 0.0]), 5000,
                                      SimConfig(dt=1e-3, horizon=1.0, seed=3))
    ex = res.exited
    assert ex.sum() > 100
    sd = DOM.signed_distance(res.exit_state[ex, :1])
    assert np.all(sd <= 0) and np.all(sd > -1e-6)
    assert np.all(res.exit_class[ex] == BoundaryClass.GAMMA_PLUS)
    assert np.all(res.tau[ex] <= 1.0)
    assert np.all(np.isnan(res.tau[~ex]))


def test_ball_domain_runs():
    spec = GaussianKernelSpec(2, 0.5, 1.0)
    res = sde.simulate_absorbed_batch(ForceField("sine"), spec, Ball((0.0, 0.0), 1.0),
                                      np.array([0.5, 0.0, 0.0, 0.5]), 2000, SimConfig(dt=2e-3, horizon=1.0))
    ex = res.exited
    r = np.linalg.norm(res.exit_state[ex, :2], axis=-1)
    assert np.all((r >= 1.0) & (r < 1.0 + 1e-6))


def test_per_path_starts():
    spec = GaussianKernelSpec(1, 0.0, 1.0)
    x0 = np.array([[0.0, 0.0], [0.5, 0.5], [-0.5, -0.5]])
    res = sde.simulate_absorbed_batch(sde.ZERO, spec, DOM, x0, 0, SimConfig(dt=0.01, horizon=0.01))
    assert res.n_paths == 3


def test_free_survival_matches_reflection_free_estimate():
    # survival from the center of a large interval over a short time is 1
    spec = GaussianKernelSpec(1, 0.0, 1.0)
    res = sde.simulate_absorbed_batch(sde.ZERO, spec, Interval(-50, 50), np.zeros(2), 2000,
                                      SimConfig(dt=0.01, horizon=1.0))
    assert not res.exited.any()


def test_record_and_json():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    rec = sde.simulate_absorbed(ForceField("linear"), spec, DOM, np.array([0.0, 0.0]),
                                SimConfig(dt=0.01, horizon=0.2), rng=np.random.default_rng(0), record_every=5)
    assert rec.times[0] == 0.0 and rec.times[-1] == pytest.approx(0.2)
    assert rec.states.shape == (rec.times.size, 2)
    js = rec.to_json()
    json.dumps(js)


def test_pair_coupling_same_noise():
    spec = GaussianKernelSpec(1, 0.5, 1.0)
    t, a, b = sde.simulate_pair_coupled(ForceField("zero"), spec, None, np.array([0.0, 0.0]),
                                        np.array([0.1, 0.0]), SimConfig(dt=0.01, horizon=0.5))
    # zero force: the difference evolves deterministically
    np.testing.assert_allclose(a[:, 0] - b[:, 0], -0.1, atol=1e-12)


def test_coupled_distance_bounded_by_gronwall():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    f = ForceField("sine", amplitude=2.0)
    rng = np.random.default_rng(0)
    xs = rng.uniform(-1, 1, (200, 2))
    ys = xs + rng.normal(scale=0.1, size=xs.shape)
    sup = sde.coupled_sup_distance(f, spec, xs, ys, SimConfig(dt=0.01, horizon=1.0))
    lim = np.linalg.norm(xs - ys, axis=-1) * math.exp(f.drift_lip(1.0))
    assert np.all(sup <= lim)
    assert np.all(sup >= np.linalg.norm(xs - ys, axis=-1) - 1e-12)


def test_girsanov_weight_zero_for_reference_dynamics():
    spec = GaussianKernelSpec(1, 0.0, 1.3)
    path = sde.simulate_free_path(spec, np.zeros(2), SimConfig(dt=0.01, horizon=0.5))
    assert sde.girsanov_weight(path, sde.ZERO, spec) == 0.0


def test_girsanov_weight_hand_computation():
    spec = GaussianKernelSpec(1, 0.4, 2.0)
    f = ForceField("linear", k=1.0)
    path = sde.simulate_free_path(spec, np.array([0.1, 0.2]), SimConfig(dt=0.05, horizon=0.2))
    q, p = path.states[:-1, 0], path.states[:-1, 1]
    db = np.diff(path.states[:, 1]) / 2.0
    z = (-q - 0.4 * p) / 2.0
    ref = np.sum(z * db) - 0.5 * np.sum(z * z) * 0.05
    assert sde.girsanov_weight(path, f, spec) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        sde.girsanov_weight(path._replace(increments=None), f, spec)


def test_girsanov_batch_mean_weight():
    spec = GaussianKernelSpec(1, 0.5, 1.0)
    res = sde.girsanov_batch(ForceField("linear"), spec, None, np.array([0.2, 0.1]), 40_000,
                             SimConfig(dt=0.01, horizon=0.5))
    w = np.exp(res.log_weight)
    assert abs(w.mean() - 1) < 5 * w.std() / math.sqrt(w.size)


def test_tangential_start_leaves_closure():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    frac, se = sde.leave_closure_fraction(ForceField("linear"), spec, DOM, np.array([1.0, 0.0]), 1e-3, 2000,
                                          SimConfig(dt=1e-5))
    assert frac >= 0.99


def test_incoming_start_does_not_leave():
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    frac, _ = sde.leave_closure_fraction(sde.ZERO, spec, DOM, np.array([1.0, -1.0]), 1e-3, 2000,
                                         SimConfig(dt=1e-5))
    assert frac == 0.0


def test_path_dump(tmp_path):
    spec = GaussianKernelSpec(1, 1.0, 1.0)
    res = sde.simulate_absorbed_batch(ForceField("linear"), spec, DOM, np.array([0.9, 0.5]), 20,
                                      SimConfig(dt=0.01, horizon=0.5))
    p = tmp_path / "paths.jsonl"
    sde.write_path_dump(p, res, 0.5)
    rows = [json.loads(l) for l in p.read_text().splitlines()]
    assert len(rows) == 20
    assert {r["status"] for r in rows} <= {"absorbed", "survived"}
