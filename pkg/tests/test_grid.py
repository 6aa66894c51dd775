import math

import numpy as np
import pytest

from kfplab import grid
from kfplab.grid import GridProblem, Mesh1D
from kfplab.sde import ZERO, ForceField

from oracles import cov_closed_mp

bump = lambda q, p: (1 - q * q) * np.exp(-p * p / 8)
zero = lambda q, p: np.zeros(np.broadcast(q, p).shape)


def test_mesh_validation():
    for kw in (dict(a=1.0), dict(p_max=0.0), dict(nq=3), dict(dt=0.0)):
        args = dict(a=-1.0, b=1.0, p_max=5.0, nq=10, np_=10, dt=0.01)
        args.update(kw)
        with pytest.raises(ValueError):
            Mesh1D(**args)
    with pytest.raises(ValueError):
        GridProblem(ZERO, 1.0, 0.0, bump, zero, 1.0)


def test_horizon_must_be_multiple_of_dt():
    pr = GridProblem(ZERO, 1.0, 1.0, bump, zero, 0.105)
    with pytest.raises(ValueError):
        grid.solve_kfp_1d(pr, Mesh1D(-1, 1, 5, 20, 20, 0.01))


def test_default_p_max():
    assert grid.default_p_max(1.0, 1.0, 1.0) == pytest.approx(6 / math.sqrt(2))
    assert grid.default_p_max(4.0, 1.0, 4.0) == pytest.approx(6 / math.sqrt(8) * 2)


@pytest.mark.parametrize("interp", ["linear", "cubic"])
def test_constant_data_preserved(interp):
    c = lambda q, p: np.full(np.broadcast(q, p).shape, 0.3)
    pr = GridProblem(ForceField("sine"), 1.0, 1.0, c, c, 0.2)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-1, 1, 5, 40, 60, 0.01), interp=interp, monitor_leak=False)
    np.testing.assert_allclose(sol.u[-1], 0.3, rtol=1e-12)


def test_free_gaussian_observable_far_from_boundary():
    # E exp(-Y^T A Y / 2) for Gaussian Y: det(I + C A)^(-1/2) exp(-m^T (C + A^-1)^-1 m / 2)
    g, s, t = 1.0, 1.0, 0.3
    f = lambda q, p: np.exp(-0.5 * (q * q / 0.25 + p * p / 0.5))
    pr = GridProblem(ZERO, g, s, f, zero, t)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-4, 4, 5, 161, 161, 0.005), interp="cubic", monitor_leak=False)
    cqq, cqp, cpp = (float(v) for v in cov_closed_mp(g, s, t))
    C = np.array([[cqq, cqp], [cqp, cpp]])
    Ainv = np.diag([0.25, 0.5])
    for q0, p0 in [(0.0, 0.0), (0.3, -0.5), (-0.4, 1.0)]:
        m = np.array([q0 + p0 * (1 - math.exp(-g * t)) / g, p0 * math.exp(-g * t)])
        ref = math.sqrt(np.linalg.det(Ainv) / np.linalg.det(C + Ainv)) * math.exp(
            -0.5 * m @ np.linalg.solve(C + Ainv, m))
        assert grid.interpolate(sol, q0, p0) == pytest.approx(ref, abs=2e-3)


def test_maximum_principle_linear():
    pr = GridProblem(ForceField("sine", amplitude=2.0), 1.0, 1.0, bump, lambda q, p: 0.3 * q, 0.5)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-1, 1, 6, 60, 60, 0.005), store_every=10, monitor_leak=False)
    rep = grid.check_maximum_principle(sol)
    assert rep.holds
    assert rep.data_range[0] <= rep.data_range[1]
    assert sol.times.size == 11


def test_leak_is_small_for_default_cutoff():
    pr = GridProblem(ForceField("linear"), 1.0, 1.0, bump, zero, 0.5)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-1, 1, grid.default_p_max(1, 1, 0.5), 40, 60, 0.01))
    assert 0 <= sol.leak < 1e-3


def test_dual_transform_rejects_boundary_data():
    pr = GridProblem(ZERO, 1.0, 1.0, bump, lambda q, p: 1.0 + 0 * q, 0.1)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-1, 1, 5, 20, 20, 0.01), monitor_leak=False)
    with pytest.raises(ValueError):
        grid.dual_transform(sol)


def test_dual_transform_flips_and_scales():
    pr = GridProblem(ZERO, 0.7, 1.0, bump, zero, 0.1)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-1, 1, 5, 20, 21, 0.01), store_every=1, monitor_leak=False)
    v = grid.dual_transform(sol)
    np.testing.assert_allclose(v.u[3], math.exp(-0.7 * sol.times[3]) * sol.u[3][:, ::-1])


def test_adjoint_residual_small_for_dual():
    f = ForceField("linear")
    smooth = lambda q, p: (1 - q * q) ** 2 * np.exp(-p * p / 2)
    pr = GridProblem(f, 0.8, 1.0, smooth, zero, 0.5)
    mesh = Mesh1D(-1, 1, 6, 200, 200, 2e-3)
    sol = grid.solve_kfp_1d(pr, mesh, interp="cubic", store_steps=[124, 125, 126], monitor_leak=False)
    v = grid.dual_transform(sol)
    k = 2
    assert grid.adjoint_residual(v, f, 0.8, 1.0, k, q_margin=0.1) < 1e-3
    with pytest.raises(ValueError):
        grid.adjoint_residual(v, f, 0.8, 1.0, k + 1)


def test_interpolate_exact_for_bilinear():
    pr = GridProblem(ZERO, 1.0, 1.0, lambda q, p: 1 + 2 * q + 3 * p + q * p, zero, 0.01)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-1, 1, 5, 11, 11, 0.01), monitor_leak=False)
    q, p = np.array([0.13, -0.77]), np.array([2.2, -4.1])
    np.testing.assert_allclose(grid.interpolate(sol, q, p, k=0), 1 + 2 * q + 3 * p + q * p)


def test_save_and_load(tmp_path):
    pr = GridProblem(ZERO, 1.0, 1.0, bump, zero, 0.05)
    sol = grid.solve_kfp_1d(pr, Mesh1D(-1, 1, 5, 12, 14, 0.01), monitor_leak=False)
    stem = str(tmp_path / "sol")
    grid.save_solution(sol, stem)
    head, u = grid.load_solution(stem)
    np.testing.assert_array_equal(u, sol.u[-1])
    assert head["nq"] == 12 and head["np"] == 14 and head["t"] == pytest.approx(0.05)
