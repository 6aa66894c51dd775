"""Numerical laboratory for the Langevin diffusion absorbed at the boundary of a position cylinder.

Modules
-------
kernel    exact Gaussian kernel of the force-free dynamics
bound     parametrix upper bound for the transition density
geometry  interval and ball domains, boundary classification
sde       absorbed path simulation with exit refinement, Girsanov weights
fk        Monte Carlo Feynman-Kac solver, adjoint process, density estimates
harnack   connecting paths and Harnack chains
grid      one-dimensional phase-space grid solver
cli       ``kfp-lab`` experiment driver
"""

__version__ = "0.1.0"

from .geometry import Ball, BoundaryClass, Interval, classify, signed_distance  # noqa: E402
from .kernel import GaussianKernelSpec, PhaseVector, density, gradient_bound_constant  # noqa: E402
from .sde import ForceField, SimConfig, simulate_absorbed, simulate_absorbed_batch  # noqa: E402
