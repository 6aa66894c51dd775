"""Independent reference computations used by the tests.

Everything here is written from first principles (mpmath arithmetic,
quadrature of the stochastic integrals, brute-force sums) and does not call
into ``kfplab``.
"""
from __future__ import annotations

import mpmath as mp


def shape_mp(rho, dps=50):
    """Shape functions ``(Phi1, Phi2, Phi3, phi)`` at ``rho`` in extended precision."""
    if rho == 0:
        return 1.0, 1.0, 1.0, 1.0
    # cancellation in the closed forms costs about 3 |log10 rho| digits
    dps = dps + max(0, int(-3 * mp.log10(abs(rho)))) + 10
    with mp.workdps(dps):
        r = mp.mpf(rho)
        e = mp.e ** (-r)
        p1 = (1 - e) / r
        p2 = 3 / (2 * r**3) * (2 * r - 3 + 4 * e - mp.e ** (-2 * r))
        p3 = 2 * (1 - p1) / r
        ph = 6 * p1 / r**3 * (-2 + r + (2 + r) * e)
        return float(p1), float(p2), float(p3), float(ph)


def cov_closed_mp(gamma, sigma, t, dps=50):
    """Covariance blocks of ``(int p, p)`` for ``dp = -gamma p dt + sigma dW`` from ``p = 0``."""
    if gamma != 0:
        dps = dps + max(0, int(-3 * mp.log10(abs(gamma * t)))) + 10
    with mp.workdps(dps):
        g, s2, t = mp.mpf(gamma), mp.mpf(sigma) ** 2, mp.mpf(t)
        if g == 0:
            return s2 * t**3 / 3, s2 * t**2 / 2, s2 * t
        e1 = -mp.expm1(-g * t) / g
        e2 = -mp.expm1(-2 * g * t) / (2 * g)
        return s2 / g**2 * (t - 2 * e1 + e2), s2 / g * (e1 - e2), s2 * e2


def cov_quad_mp(gamma, sigma, t, dps=30):
    """Same blocks by quadrature of the Ito isometry integrals."""
    with mp.workdps(dps):
        g, s2, t = mp.mpf(gamma), mp.mpf(sigma) ** 2, mp.mpf(t)
        if g == 0:
            a = lambda u: t - u
        else:
            a = lambda u: -mp.expm1(-g * (t - u)) / g
        b = lambda u: mp.e ** (-g * (t - u))
        return (s2 * mp.quad(lambda u: a(u) ** 2, [0, t]),
                s2 * mp.quad(lambda u: a(u) * b(u), [0, t]),
                s2 * mp.quad(lambda u: b(u) ** 2, [0, t]))


def quadratic_form_mp(gamma, sigma, t, dx, dps=50):
    """``dx^T C^{-1} dx`` with the exact 2x2 inverse of each coordinate block."""
    with mp.workdps(dps):
        cqq, cqp, cpp = cov_closed_mp(gamma, sigma, t, dps)
        det = cqq * cpp - cqp**2
        d = len(dx) // 2
        tot = mp.mpf(0)
        for i in range(d):
            u, v = mp.mpf(float(dx[i])), mp.mpf(float(dx[d + i]))
            tot += (cpp * u * u - 2 * cqp * u * v + cqq * v * v) / det
        return float(tot)


def density_mp(gamma, sigma, t, x, y, dps=40):
    """Free transition density in dimension 1 from the closed-form moments."""
    with mp.workdps(dps):
        g, t = mp.mpf(gamma), mp.mpf(t)
        a = t if g == 0 else -mp.expm1(-g * t) / g
        mq = mp.mpf(x[0]) + a * mp.mpf(x[1])
        mpp = mp.e ** (-g * t) * mp.mpf(x[1])
        cqq, cqp, cpp = cov_closed_mp(gamma, sigma, t, dps)
        det = cqq * cpp - cqp**2
        u, v = mp.mpf(y[0]) - mq, mp.mpf(y[1]) - mpp
        qf = (cpp * u * u - 2 * cqp * u * v + cqq * v * v) / det
        return float(mp.e ** (-qf / 2) / (2 * mp.pi * mp.sqrt(det)))


def gradient_profile_mp(rho, dps=60):
    """``|Phi3 e^{-rho} / 2 - Phi1^2| / sqrt(phi) / (1 + sqrt(rho_-))`` in extended precision."""
    if rho == 0:
        return 0.5
    dps = dps + max(0, int(-3 * mp.log10(abs(rho)))) + int(abs(rho)) + 10
    with mp.workdps(dps):
        r = mp.mpf(rho)
        e = mp.e ** (-r)
        p1 = (1 - e) / r
        p3 = 2 * (1 - p1) / r
        ph = 6 * p1 / r**3 * (-2 + r + (2 + r) * e)
        g = abs(-p1**2 + p3 * e / 2) / mp.sqrt(ph)
        return float(g / (1 + mp.sqrt(max(-r, 0))))
