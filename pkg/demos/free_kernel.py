"""
The free Langevin kernel and its Gaussian envelope
===================================================

Without a force the Langevin process is Gaussian. This script evaluates
its transition density, checks it against exact samples, and shows how the
alpha-scaled kernel dominates it.
"""
import numpy as np

from kfplab import kernel as kern
from kfplab.kernel import GaussianKernelSpec

spec = GaussianKernelSpec(dim=1, gamma=1.0, sigma=1.0, alpha=0.9)
t = 0.5
x = np.array([0.0, 0.5])

# mean map and covariance blocks at time t
m = kern.moments(spec, t)
print("mean of X_t:", m.mean_map @ x)
print("c_qq, c_qp, c_pp:", m.c_qq, m.c_qp, m.c_pp)

# exact draws reproduce those moments
rng = np.random.default_rng(0)
z = kern.sample_free_step(spec, t, np.broadcast_to(x, (200_000, 2)), rng)
print("sample mean:", z.mean(0))
print("sample covariance:\n", np.cov(z.T))

# density on a line of end points, next to the alpha-kernel envelope
ys = np.stack([np.linspace(-1, 1.5, 6), np.zeros(6)], axis=-1)
dens = kern.density(spec, t, x, ys)
env = spec.alpha ** (-spec.dim) * kern.density_alpha(spec, t, x, ys)
for y, a, b in zip(ys, dens, env):
    print(f"y = {y}, density {a:.4f}, envelope {b:.4f}")

# the momentum gradient is controlled by the envelope with constant c_alpha
c = kern.gradient_bound_constant(spec.alpha)
grad = np.abs(kern.grad_p_density(spec, t, x, ys))[:, 0]
bound = c / (spec.sigma * np.sqrt(t)) * kern.density_alpha(spec, t, x, ys)
print("c_alpha =", c)
print("gradient / bound:", grad / bound)
