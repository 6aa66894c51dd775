"""
Absorbed Langevin paths and the Feynman-Kac formula
===================================================

Paths start inside the interval (-1, 1) and are stopped when the position
leaves it. Averages over them solve the kinetic Fokker-Planck problem.
"""
import numpy as np

from kfplab import fk, grid, sde
from kfplab.geometry import BoundaryClass, Interval
from kfplab.kernel import GaussianKernelSpec
from kfplab.sde import ForceField, SimConfig

dom = Interval(-1.0, 1.0)
spec = GaussianKernelSpec(1, gamma=1.0, sigma=1.0)
force = ForceField("linear", k=1.0)

# a batch of absorbed paths started near the right end, moving outward
res = sde.simulate_absorbed_batch(force, spec, dom, np.array([0.6, 0.8]), 20_000,
                                  SimConfig(dt=1e-3, horizon=0.5, seed=1))
ex = res.exited
print("absorbed before t = 0.5:", ex.mean())
print("mean exit time:", res.tau[ex].mean())
# exits happen with outgoing momentum
print("exit classes:", {BoundaryClass(c).name: int(n) for c, n in
                        zip(*np.unique(res.exit_class[ex], return_counts=True))})

# Feynman-Kac estimate of u(t, x) for initial data f and boundary data g
f = lambda q, p: (1 - q * q) * np.exp(-p * p / 8) + 0.3 * q
g = lambda q, p: 0.3 * q + 0 * p
prob = fk.FKProblem(lambda z: f(z[:, 0], z[:, 1]), lambda z: g(z[:, 0], z[:, 1]), 0.5,
                    np.array([0.0, 0.3]), force, spec, dom)
est = fk.estimate_u(prob, 100_000, SimConfig(dt=1e-3, seed=2))
print(f"Monte Carlo u = {est.value:.4f} +/- {est.std_error:.4f}")

# the same value from the grid solver (first order in the mesh size)
sol = grid.solve_kfp_1d(grid.GridProblem(force, 1.0, 1.0, f, g, 0.5), grid.Mesh1D(-1, 1, 6.0, 200, 200, 0.005))
print(f"grid u = {float(grid.interpolate(sol, 0.0, 0.3)):.4f}, leak {sol.leak:.1e}")
print("maximum principle:", grid.check_maximum_principle(sol).holds)
