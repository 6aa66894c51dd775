"""
Chaining a local Harnack inequality
===================================

Two points of a compact set K are joined by a smooth path made of cubic
pieces. Along it, a sequence of small space-time boxes is laid out so that
each one sits in the past of the next. The number of boxes gives the
chained constant.
"""
import numpy as np

from kfplab import harnack as hk
from kfplab.geometry import Interval

# one cubic piece and its bounds
path = hk.hermite_bridge([0.0, 1.0], [0.3, -0.5], 0.4)
print(path.bounds_report())

spec = hk.HarnackChainSpec(Interval(-1, 1), k=0.5, delta=0.8, horizon=1.0, eps=0.1)
chain = hk.build_admissible_chain(spec, np.array([-0.2, -0.5]), np.array([0.2, 0.5]))
for key, val in chain.report().items():
    print(f"{key}: {val}")

print("path checks:", hk.check_path_membership(chain).violations)
print("box checks:", hk.verify_chain_membership(chain).violations)
# with twice the box scale the nesting fails
print("box checks at 2 r:", hk.verify_chain_membership(chain, r=2 * chain.r_eps).violations)
print("log10 of the chained constant:", hk.log_harnack_constant(spec.c_base, chain) / np.log(10))
