"""
Adjoint process and behaviour near the boundary
===============================================

The adjoint process runs the dynamics with reversed friction and flipped
momenta. Its absorbed density at (x, y) equals exp(-d gamma t) times the
forward density at (y, x). Near the boundary the absorbed density vanishes
at outgoing starts and incoming ends.
"""
import numpy as np

from kfplab import fk
from kfplab.geometry import Interval
from kfplab.kernel import GaussianKernelSpec
from kfplab.sde import ForceField, SimConfig

dom = Interval(-1.0, 1.0)
spec = GaussianKernelSpec(1, gamma=0.8, sigma=1.0)
force = ForceField("linear", k=1.0)

r = fk.reversibility_ratio(force, spec, dom, 0.4, [0.0, 0.3], [-0.2, 0.5], 200_000,
                           cfg=SimConfig(dt=1e-3), seed=11)
print(f"duality ratio {r.ratio:.3f}, 95% CI {r.ci}")

# starting points approaching the outgoing boundary: survival drops to 0
xs = [[1 - d, 0.5] for d in 0.5 ** np.arange(1, 6)]
for row in fk.boundary_vanishing_scan(force, spec, dom, 0.4, xs, 20_000, SimConfig(dt=1e-3), slot="x"):
    print(f"distance {row.distance:.4f}: survival {row.estimate:.3f}")

# end points approaching the incoming boundary: density drops to 0
ys = [[1 - d, -0.3] for d in 0.4 * 0.5 ** np.arange(0, 5)]
for row in fk.boundary_vanishing_scan(force, spec, dom, 0.4, ys, 50_000, SimConfig(dt=1e-3), slot="y",
                                      other=[0.6, 0.6]):
    print(f"distance {row.distance:.4f}: density {row.estimate:.4f} +/- {row.std_error:.4f}")
