"""Exact transition kernel of the free Langevin process.

The free process (no force) is a linear SDE

    dq = p dt,    dp = -gamma p dt + sigma dW,

so its transition law is Gaussian with mean ``M(t) x`` and covariance
``C(t)``. Everything is expressed through four dimensionless shape functions
of ``rho = gamma * t``.

Phase points are flat arrays of length ``2 d`` (positions first, then
momenta). Batches carry the phase axis last, shape ``(..., 2 d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import NamedTuple

import numpy as np
from scipy import optimize

__all__ = [
    "PhaseVector",
    "GaussianKernelSpec",
    "ShapeValues",
    "KernelMoments",
    "eval_shape_functions",
    "moments",
    "covariance_matrix",
    "cov_blocks",
    "density",
    "log_density",
    "density_alpha",
    "quadratic_form",
    "sample_free_step",
    "block_cholesky",
    "grad_p_density",
    "gradient_bound_constant",
    "gradient_ratio_profile",
]

# Below this |rho| the closed forms lose digits; the series is used instead.
_SERIES_CUTOFF = 1.0
_N_TERMS = 32


class PhaseVector(NamedTuple):
    """A phase-space point ``x = (q, p)``."""

    q: np.ndarray
    p: np.ndarray

    @classmethod
    def from_array(cls, x, dim: int | None = None) -> "PhaseVector":
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        if n % 2:
            raise ValueError("phase vector needs an even number of components")
        d = n // 2 if dim is None else dim
        if 2 * d != n:
            raise ValueError(f"expected {2 * d} components, got {n}")
        return cls(x[..., :d], x[..., d:])

    def as_array(self) -> np.ndarray:
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape:
            raise ValueError("q and p must have the same dimension")
        out = np.concatenate([q, p], axis=-1)
        if not np.all(np.isfinite(out)):
            raise ValueError("phase vector has non-finite components")
        return out

    def __array__(self, dtype=None, copy=None):
        out = self.as_array()
        return out if dtype is None else out.astype(dtype)

    @property
    def dim(self) -> int:
        return int(np.atleast_1d(self.q).shape[-1])


def as_phase(x, dim: int) -> np.ndarray:
    """Convert ``x`` to a float array whose last axis has length ``2 dim``."""
    if isinstance(x, PhaseVector):
        x = x.as_array()
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != 2 * dim:
        raise ValueError(f"phase points must have last axis of length {2 * dim}")
    return x


@dataclass(frozen=True)
class GaussianKernelSpec:
    """Parameters of the free kernel and of its alpha-scaled version.

    Parameters
    ----------
    dim : int
        Space dimension ``d``.
    gamma : float
        Friction, any real value.
    sigma : float
        Noise amplitude, strictly positive.
    alpha : float
        Scale in ``(0, 1]`` used by :func:`density_alpha`.
    """

    dim: int = 1
    gamma: float = 0.0
    sigma: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError("sigma must be > 0")
        if not (0 < self.alpha <= 1):
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def gamma_minus(self) -> float:
        return max(-self.gamma, 0.0)


class ShapeValues(NamedTuple):
    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    phi: np.ndarray


def _series_coeffs():
    k = np.arange(_N_TERMS)
    fact = np.array([float(factorial(int(j))) for j in range(_N_TERMS + 4)])
    c1 = 1.0 / fact[k + 1]
    c3 = 2.0 / fact[k + 2]
    c2 = 1.5 * (2.0 ** (k + 3) - 4.0) / fact[k + 3]
    # phi = 6 Phi1 * sum (m+1)(-rho)^m/(m+3)!
    cp = 6.0 * (k + 1) / fact[k + 3]
    return c1, c2, c3, cp


_C1, _C2, _C3, _CP = _series_coeffs()


def _horner(coeffs, x):
    # sum_k coeffs[k] * x**k
    out = np.zeros_like(x)
    for c in coeffs[::-1]:
        out = out * x + c
    return out


def eval_shape_functions(rho) -> ShapeValues:
    """Evaluate ``(Phi1, Phi2, Phi3, phi)`` at ``rho``.

    All four equal 1 at ``rho = 0``. For ``|rho| < 1`` a 32 term Taylor
    expansion in ``-rho`` is summed, elsewhere the closed forms are used.

    Parameters
    ----------
    rho : array_like
        Dimensionless argument ``gamma * t``.

    Returns
    -------
    ShapeValues
        Arrays broadcast to the shape of ``rho`` (0-d for scalar input).
    """
    rho = np.asarray(rho, dtype=float)
    r = np.atleast_1d(rho)
    phi1 = np.empty_like(r)
    phi2 = np.empty_like(r)
    phi3 = np.empty_like(r)
    phi = np.empty_like(r)

    small = np.abs(r) < _SERIES_CUTOFF
    if np.any(small):
        x = -r[small]
        s1 = _horner(_C1, x)
        phi1[small] = s1
        phi2[small] = _horner(_C2, x)
        phi3[small] = _horner(_C3, x)
        phi[small] = s1 * _horner(_CP, x)

    big = ~small
    if np.any(big):
        x = r[big]
        with np.errstate(over="ignore", invalid="ignore"):
            e1 = np.exp(-x)
            p1 = -np.expm1(-x) / x
            phi1[big] = p1
            phi3[big] = 2.0 * (1.0 - p1) / x
            phi2[big] = 1.5 / x**3 * (2.0 * x - 3.0 + 4.0 * e1 - e1 * e1)
            phi[big] = 6.0 * p1 / x**3 * (-2.0 + x + (2.0 + x) * e1)

    out = ShapeValues(phi1, phi2, phi3, phi)
    if rho.ndim == 0:
        out = ShapeValues(*(v[0] for v in out))
    return out


def cov_blocks(spec: GaussianKernelSpec, t, q_noise: float = 0.0):
    """Scalar covariance blocks ``(c_qq, c_qp, c_pp)`` at time ``t``.

    ``q_noise`` is an extra diffusion coefficient on the position (the
    perturbed dynamics ``dq = p dt + sqrt(2 eps) dW``), which adds
    ``2 eps t`` to ``c_qq`` only.
    """
    t = np.asarray(t, dtype=float)
    s = eval_shape_functions(spec.gamma * t)
    s2 = spec.sigma**2
    cqq = s2 * t**3 * s.phi2 / 3.0 + 2.0 * q_noise * t
    cqp = s2 * t**2 * s.phi1**2 / 2.0
    with np.errstate(over="ignore"):
        cpp = s2 * t * eval_shape_functions(2.0 * spec.gamma * t).phi1
    return cqq, cqp, cpp


class KernelMoments(NamedTuple):
    mean_map: np.ndarray
    c_qq: float
    c_qp: float
    c_pp: float
    det: float


def _check_t(t):
    t = float(t)
    if not (t > 0 and np.isfinite(t)):
        raise ValueError(f"time must be > 0, got {t}")
    return t


def mean_coeffs(spec: GaussianKernelSpec, t):
    """Return ``(t Phi1(gamma t), exp(-gamma t))``, the two nontrivial blocks of M(t)."""
    s = eval_shape_functions(spec.gamma * np.asarray(t, dtype=float))
    return t * s.phi1, np.exp(-spec.gamma * np.asarray(t, dtype=float))


def moments(spec: GaussianKernelSpec, t: float) -> KernelMoments:
    """Mean map, covariance blocks and covariance determinant at time ``t``."""
    t = _check_t(t)
    d = spec.dim
    a, e = mean_coeffs(spec, t)
    eye = np.eye(d)
    mean_map = np.block([[eye, a * eye], [np.zeros((d, d)), e * eye]])
    cqq, cqp, cpp = cov_blocks(spec, t)
    phi = eval_shape_functions(spec.gamma * t).phi
    det = (spec.sigma**4 * t**4 * phi / 12.0) ** d
    return KernelMoments(mean_map, float(cqq), float(cqp), float(cpp), float(det))


def covariance_matrix(spec: GaussianKernelSpec, t: float) -> np.ndarray:
    """Assemble the full ``2d x 2d`` covariance matrix ``C(t)``."""
    m = moments(spec, t)
    eye = np.eye(spec.dim)
    return np.block([[m.c_qq * eye, m.c_qp * eye], [m.c_qp * eye, m.c_pp * eye]])


def quadratic_form(spec: GaussianKernelSpec, t: float, dx) -> np.ndarray:
    """Evaluate ``dx . C(t)^{-1} dx`` as a sum of two squares.

    The form is ``|Pi1 dx|^2 / (sigma^2 t) + 12 |Pi2 dx|^2 / (sigma^2 t^3 phi)``
    with ``Pi1 = [gamma I, I]`` and ``Pi2 = [Phi1 I, -(t/2) Phi3 I]``, all
    shape functions at ``gamma t``. Vectorized over leading axes of ``dx``.
    """
    t = _check_t(t)
    d = spec.dim
    dx = as_phase(dx, d)
    dq, dp = dx[..., :d], dx[..., d:]
    s = eval_shape_functions(spec.gamma * t)
    s2 = spec.sigma**2
    a = spec.gamma * dq + dp
    b = s.phi1 * dq - 0.5 * t * s.phi3 * dp
    return np.sum(a * a, axis=-1) / (s2 * t) + 12.0 * np.sum(b * b, axis=-1) / (s2 * t**3 * s.phi)


def _mean(spec, t, x):
    d = spec.dim
    a, e = mean_coeffs(spec, t)
    q, p = x[..., :d], x[..., d:]
    return np.concatenate([q + a * p, e * p], axis=-1)


def log_density(spec: GaussianKernelSpec, t: float, x, y) -> np.ndarray:
    """Natural log of the free transition density ``p_t(x, y)``."""
    t = _check_t(t)
    d = spec.dim
    x = as_phase(x, d)
    y = as_phase(y, d)
    qf = quadratic_form(spec, t, y - _mean(spec, t, x))
    phi = eval_shape_functions(spec.gamma * t).phi
    log_det1 = np.log(spec.sigma**4 * t**4 * phi / 12.0)
    return -d * np.log(2.0 * np.pi) - 0.5 * d * log_det1 - 0.5 * qf


def density(spec: GaussianKernelSpec, t: float, x, y) -> np.ndarray:
    """Free transition density ``p_t(x, y)``; underflow returns 0."""
    with np.errstate(under="ignore"):
        return np.exp(log_density(spec, t, x, y))


def density_alpha(spec: GaussianKernelSpec, t: float, x, y) -> np.ndarray:
    """Scaled kernel ``alpha^d p_t(sqrt(alpha) x, sqrt(alpha) y)`` with ``alpha = spec.alpha``."""
    t = _check_t(t)
    d = spec.dim
    x = as_phase(x, d)
    y = as_phase(y, d)
    sa = np.sqrt(spec.alpha)
    with np.errstate(under="ignore"):
        return np.exp(d * np.log(spec.alpha) + log_density(spec, t, sa * x, sa * y))


def grad_p_density(spec: GaussianKernelSpec, t: float, x, y) -> np.ndarray:
    """Gradient of ``p_t(x, y)`` with respect to the initial momentum ``x_p``."""
    t = _check_t(t)
    d = spec.dim
    x = as_phase(x, d)
    y = as_phase(y, d)
    dx = y - _mean(spec, t, x)
    m = moments(spec, t)
    det1 = m.c_qq * m.c_pp - m.c_qp**2
    dq, dp = dx[..., :d], dx[..., d:]
    # C^{-1} dx per coordinate
    wq = (m.c_pp * dq - m.c_qp * dp) / det1
    wp = (-m.c_qp * dq + m.c_qq * dp) / det1
    a, e = mean_coeffs(spec, t)
    # d/dx_p of -Q/2 = (dmean/dx_p)^T C^{-1} dx
    g = a * wq + e * wp
    return g * density(spec, t, x, y)[..., None]


def block_cholesky(spec: GaussianKernelSpec, t: float, q_noise: float = 0.0):
    """Lower Cholesky factor ``(l11, l21, l22)`` of one 2x2 coordinate block."""
    t = _check_t(t)
    cqq, cqp, cpp = (float(v) for v in cov_blocks(spec, t, q_noise))
    l11 = np.sqrt(cqq)
    l21 = cqp / l11
    if q_noise == 0.0:
        phi = eval_shape_functions(spec.gamma * t).phi
        det1 = spec.sigma**4 * t**4 * phi / 12.0
    else:
        det1 = cqq * cpp - cqp * cqp
    l22 = np.sqrt(det1 / cqq)
    return l11, l21, l22


def sample_free_step(spec: GaussianKernelSpec, t: float, x, rng: np.random.Generator,
                     q_noise: float = 0.0) -> np.ndarray:
    """Draw ``X_t`` exactly from ``N(M(t) x, C(t))``.

    Parameters
    ----------
    spec : GaussianKernelSpec
    t : float
        Step length.
    x : array_like, shape (..., 2 d)
        Starting points; one draw is made per point.
    rng : numpy.random.Generator
        Normals are drawn with shape ``x.shape[:-1] + (2, d)``.
    q_noise : float, optional
        Extra position diffusion, see :func:`cov_blocks`.
    """
    d = spec.dim
    x = as_phase(x, d)
    z = rng.standard_normal(x.shape[:-1] + (2, d))
    return free_step_from_normals(spec, t, x, z, q_noise)


def free_step_from_normals(spec, t, x, z, q_noise=0.0):
    """Deterministic part of :func:`sample_free_step` given standard normals ``z``."""
    d = spec.dim
    l11, l21, l22 = block_cholesky(spec, t, q_noise)
    m = _mean(spec, t, x)
    q = m[..., :d] + l11 * z[..., 0, :]
    p = m[..., d:] + l21 * z[..., 0, :] + l22 * z[..., 1, :]
    return np.concatenate([q, p], axis=-1)


# --- gradient bound constant -------------------------------------------------

def _g_ratio(rho):
    """``g(rho) / (1 + sqrt(rho_-))`` with ``g = |Phi3 e^{-rho}/2 - Phi1^2| / sqrt(phi)``."""
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    out = np.empty_like(rho)
    neg = rho < -1.0
    if np.any(neg):
        r = -rho[neg]
        w = np.exp(-r)
        # numerator and phi divided by e^{r} and e^{2r}
        num = (1.0 - w - r) / r**2
        ph = 6.0 * (w - 1.0) / r**4 * (-(2.0 + r) * w + (2.0 - r))
        out[neg] = np.abs(num) / np.sqrt(ph) / (1.0 + np.sqrt(r))
    pos = ~neg
    if np.any(pos):
        x = rho[pos]
        s = eval_shape_functions(x)
        num = -s.phi1**2 + 0.5 * s.phi3 * np.exp(-x)
        out[pos] = np.abs(num) / np.sqrt(s.phi) / (1.0 + np.sqrt(np.maximum(-x, 0.0)))
    return out


def gradient_ratio_profile(rho):
    """Public view of the ratio maximized by :func:`gradient_bound_constant`."""
    return _g_ratio(rho)


_C_SUP_CACHE: list[float] = []


def _c_sup() -> float:
    if _C_SUP_CACHE:
        return _C_SUP_CACHE[0]
    mags = np.logspace(-8, 6, 40001)
    grid = np.concatenate([-mags[::-1], [0.0], mags])
    vals = _g_ratio(grid)
    k = int(np.argmax(vals))
    best = float(vals[k])
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(lambda r: -_g_ratio(r)[0], bounds=(lo, hi),
                                       method="bounded", options={"xatol": 1e-12})
        best = max(best, -float(res.fun))
    # beyond |rho| = 1e6 the ratio behaves like 1/(sqrt(6) rho) on the right
    # and tends to 1/sqrt(6) on the left
    best = max(best, 1.0 / np.sqrt(6.0))
    _C_SUP_CACHE.append(best)
    return best


def gradient_bound_constant(alpha: float, dim: int = 1) -> float:
    """Constant ``c_alpha`` in the momentum-gradient bound of the free kernel.

    The returned value satisfies

        |grad_p p_t(x, y)| <= c_alpha (1 + sqrt(gamma_- t)) / (sigma sqrt(t)) * p^(alpha)_t(x, y)

    for all ``t, gamma, sigma, x, y`` in dimension ``dim``. It is assembled as
    ``1.05 * alpha^{-d} * s_alpha * (1 + sqrt(12) * c)`` with
    ``s_alpha = 1 / sqrt(e (1 - alpha))`` and ``c`` a numerical supremum over
    ``rho`` of :func:`gradient_ratio_profile`.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    s_alpha = 1.0 / np.sqrt(np.e * (1.0 - alpha))
    return 1.05 * alpha ** (-dim) * s_alpha * (1.0 + np.sqrt(12.0) * _c_sup())
