"""Parametrix Gaussian upper bound for the transition density with a force.

The bound has the form

    p_t(x, y) <= alpha^{-d} * S(t) * p^(alpha)_t(x, y),

where ``S(t)`` is a power series in ``K sqrt(pi t)`` with
``K = f_sup * c_alpha * (1 + sqrt(gamma_- T)) / sigma``. Two coefficient
conventions are available:

``"proof"`` (default)
    ``term_j = (K sqrt(pi t))^j / Gamma(j/2 + 1)``. This is what iterating the
    Beta-function integrals of the parametrix expansion produces; its j = 0
    term is 1, so with zero force it reduces to the free density itself.
``"statement"``
    ``term_j = (K sqrt(pi t))^j / Gamma((j+1)/2)``. Its j = 0 coefficient is
    ``1/sqrt(pi) < 1``, which cannot dominate the free kernel at its mean, so
    it is kept for comparison only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from .kernel import GaussianKernelSpec, density_alpha, gradient_bound_constant

__all__ = ["ParametrixBoundSpec", "BoundValue", "series_term", "series_sum", "evaluate_bound"]

_CONVENTIONS = ("proof", "statement")


@dataclass(frozen=True)
class ParametrixBoundSpec:
    """Inputs of the parametrix bound.

    ``c_alpha`` defaults to :func:`kfplab.kernel.gradient_bound_constant` for
    the kernel's ``alpha`` and dimension. ``f_sup`` should be the sup norm of
    the force over the whole space, or over the domain when bounding the
    absorbed density.
    """

    kernel: GaussianKernelSpec
    f_sup: float
    horizon: float
    c_alpha: float | None = None
    convention: str = "proof"
    max_terms: int = 100_000
    _c: float = field(init=False, repr=False, default=0.0)

    def __post_init__(self):
        if self.f_sup < 0:
            raise ValueError("f_sup must be >= 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.convention not in _CONVENTIONS:
            raise ValueError(f"convention must be one of {_CONVENTIONS}")
        if self.kernel.alpha >= 1.0:
            raise ValueError("the bound needs alpha < 1")
        c = self.c_alpha
        if c is None:
            c = gradient_bound_constant(self.kernel.alpha, self.kernel.dim)
        if not c > 0:
            raise ValueError("c_alpha must be > 0")
        object.__setattr__(self, "_c", float(c))

    @property
    def gamma_minus(self) -> float:
        return self.kernel.gamma_minus

    @property
    def cst(self) -> float:
        return self._c

    def base_factor(self) -> float:
        """``K = f_sup c_alpha (1 + sqrt(gamma_- T)) / sigma``."""
        return self.f_sup * self._c * (1.0 + np.sqrt(self.gamma_minus * self.horizon)) / self.kernel.sigma


class BoundValue(NamedTuple):
    value: np.ndarray
    truncation_tail: float
    terms_used: int


def _check_t(spec, t):
    t = float(t)
    if not (0.0 < t <= spec.horizon):
        raise ValueError(f"t must lie in (0, {spec.horizon}], got {t}")
    return t


def _log_den(spec, j):
    j = np.asarray(j, dtype=float)
    return gammaln(0.5 * j + 1.0) if spec.convention == "proof" else gammaln(0.5 * (j + 1.0))


def log_series_term(spec: ParametrixBoundSpec, j, t: float):
    """Natural log of :func:`series_term` (``-inf`` for zero terms)."""
    t = _check_t(spec, t)
    j = np.asarray(j)
    if np.any(j < 0):
        raise ValueError("j must be nonnegative")
    k = spec.base_factor()
    if k == 0.0:
        return np.where(j == 0, -_log_den(spec, 0), -np.inf)
    return j * np.log(k * np.sqrt(np.pi * t)) - _log_den(spec, j)


def series_term(spec: ParametrixBoundSpec, j, t: float):
    """Coefficient ``term_j(t)`` of the parametrix series, evaluated in log space."""
    return np.exp(log_series_term(spec, j, t))


def series_sum(spec: ParametrixBoundSpec, t: float, rel_tail_tol: float = 1e-12):
    """Partial sum of the coefficients plus a certified bound on the rest.

    Once the two-step ratio ``term_{j+2} / term_j`` (decreasing in ``j``)
    drops below 1, each parity class is dominated by a geometric series.

    Returns
    -------
    partial, tail, n_terms
    """
    t = _check_t(spec, t)
    k = spec.base_factor()
    if k == 0.0:
        return float(np.exp(-_log_den(spec, 0))), 0.0, 1
    a = k * k * np.pi * t
    shift = 2.0 if spec.convention == "proof" else 1.0
    # ratio(j) = a / ((j + shift) / 2); first j where ratio <= 1/2
    j_ratio = max(0, int(np.ceil(4.0 * a - shift)))
    chunk = max(64, j_ratio + 64)
    partial = 0.0
    j0 = 0
    while j0 < spec.max_terms:
        js = np.arange(j0, j0 + chunk)
        terms = np.exp(log_series_term(spec, js, t))
        for i, term in enumerate(terms):
            j = j0 + i
            partial += term
            if j + 1 < j_ratio:
                continue
            r = a / ((j + 1 + shift) / 2.0)
            if r >= 1.0:
                continue
            t1, t2 = np.exp(log_series_term(spec, np.array([j + 1, j + 2]), t))
            tail = (t1 + t2) / (1.0 - r)
            if tail <= rel_tail_tol * partial:
                return float(partial), float(tail), j + 1
        j0 += chunk
    raise RuntimeError("relative tail tolerance not reached within the term cap")


def evaluate_bound(spec: ParametrixBoundSpec, t: float, x, y, rel_tail_tol: float = 1e-10) -> BoundValue:
    """Upper bound on the transition density ``p_t(x, y)``.

    Parameters
    ----------
    spec : ParametrixBoundSpec
    t : float
        Time in ``(0, horizon]``.
    x, y : array_like, shape (..., 2 d)
        Start and end points; broadcast against each other.
    rel_tail_tol : float
        Target ratio of the certified tail to the partial sum.

    Returns
    -------
    BoundValue
        ``value`` already includes the tail, so it is a true upper bound.
    """
    partial, tail, n = series_sum(spec, t, rel_tail_tol)
    kern = spec.kernel
    g = density_alpha(kern, t, x, y)
    value = kern.alpha ** (-kern.dim) * (partial + tail) * g
    return BoundValue(value, tail, n)
