"""Deterministic d = 1 solver for the kinetic Fokker-Planck boundary value problem.

Solves

    d_t u = p d_q u + (F(q) - gamma p) d_p u + (sigma^2 / 2) d_pp u

on ``(a, b) x (-P, P)`` with ``u(0) = f`` and ``u = g`` on the outgoing
boundary only (``q = b, p > 0`` and ``q = a, p < 0``). One step is a Strang
splitting

    A(h/2) B(h/2) D(h) B(h/2) A(h/2)

with ``A`` the semi-Lagrangian position transport (feet leaving the interval
take the boundary datum where they leave), ``B`` the semi-Lagrangian momentum
drift along its exact characteristic, and ``D`` the exact exponential of the
discrete Neumann Laplacian in ``p``. With linear interpolation every substep
is a convex combination of nodal and boundary values, so the scheme is
monotone and satisfies a discrete maximum principle for any ``dt``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.linalg import expm

from .kernel import eval_shape_functions
from .sde import ForceField

__all__ = [
    "Mesh1D",
    "GridProblem",
    "GridSolution",
    "default_p_max",
    "solve_kfp_1d",
    "check_maximum_principle",
    "dual_transform",
    "adjoint_residual",
    "interpolate",
    "save_solution",
    "load_solution",
]


def default_p_max(gamma: float, sigma: float, horizon: float) -> float:
    """Momentum cutoff ``6 sigma / sqrt(2 max(gamma, 1))`` widened for long horizons."""
    base = 6.0 * sigma / np.sqrt(2.0 * max(gamma, 1.0))
    return base * max(1.0, np.sqrt(horizon))


@dataclass(frozen=True)
class Mesh1D:
    """Uniform lattice including the end nodes ``q = a, b`` and ``p = -P, P``."""

    a: float
    b: float
    p_max: float
    nq: int
    np_: int
    dt: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("mesh needs a < b")
        if not self.p_max > 0:
            raise ValueError("p_max must be > 0")
        if self.nq < 4 or self.np_ < 4:
            raise ValueError("need at least 4 nodes per axis")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError("dt must be > 0")

    @property
    def q(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.nq)

    @property
    def p(self) -> np.ndarray:
        return np.linspace(-self.p_max, self.p_max, self.np_)

    @property
    def dq(self) -> float:
        return (self.b - self.a) / (self.nq - 1)

    @property
    def dp(self) -> float:
        return 2.0 * self.p_max / (self.np_ - 1)

    def header(self) -> dict:
        return {"a": self.a, "b": self.b, "P": self.p_max, "nq": self.nq, "np": self.np_, "dt": self.dt}


@dataclass(frozen=True)
class GridProblem:
    """``f(q, p)`` and ``g(q, p)`` are vectorized callables."""

    force: ForceField
    gamma: float
    sigma: float
    f: Callable
    g: Callable
    horizon: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")


class GridSolution(NamedTuple):
    mesh: Mesh1D
    times: np.ndarray
    u: np.ndarray            # (n_times, nq, np)
    leak: Optional[float]
    interp: str
    meta: dict


# --- interpolation kernels --------------------------------------------------------

def _lin_weights(pos, n):
    """Index and weight for linear interpolation at fractional node positions."""
    pos = np.clip(pos, 0.0, n - 1.0)
    i = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    w = pos - i
    return i, w


def _cubic_weights(w):
    # Lagrange cubic on nodes -1, 0, 1, 2
    return (-w * (w - 1) * (w - 2) / 6.0, (w + 1) * (w - 1) * (w - 2) / 2.0,
            -(w + 1) * w * (w - 2) / 2.0, (w + 1) * w * (w - 1) / 6.0)


def _interp_axis(u, pos, axis, kind):
    """Interpolate ``u`` along ``axis`` at fractional positions ``pos`` (same shape as ``u``)."""
    n = u.shape[axis]
    i, w = _lin_weights(pos, n)
    if kind == "linear":
        u0 = np.take_along_axis(u, i, axis=axis)
        u1 = np.take_along_axis(u, i + 1, axis=axis)
        return u0 + w * (u1 - u0)
    # cubic with linear fallback in the edge cells
    im = np.clip(i - 1, 0, n - 1)
    ip2 = np.clip(i + 2, 0, n - 1)
    c = _cubic_weights(w)
    vals = (c[0] * np.take_along_axis(u, im, axis=axis) + c[1] * np.take_along_axis(u, i, axis=axis)
            + c[2] * np.take_along_axis(u, i + 1, axis=axis) + c[3] * np.take_along_axis(u, ip2, axis=axis))
    edge = (i == 0) | (i == n - 2)
    if np.any(edge):
        u0 = np.take_along_axis(u, i, axis=axis)
        u1 = np.take_along_axis(u, i + 1, axis=axis)
        vals = np.where(edge, u0 + w * (u1 - u0), vals)
    return vals


# --- solver ------------------------------------------------------------------------

class _Stepper:
    def __init__(self, problem: GridProblem, mesh: Mesh1D, interp: str):
        if interp not in ("linear", "cubic"):
            raise ValueError("interp must be 'linear' or 'cubic'")
        self.interp = interp
        self.mesh = mesh
        q, p = mesh.q, mesh.p
        self.Q, self.P = np.meshgrid(q, p, indexing="ij")
        h = mesh.dt
        # position transport over h/2: foot q + p h/2
        foot = self.Q + self.P * (0.5 * h)
        self.pos_q = (foot - mesh.a) / mesh.dq
        self.out_hi = foot > mesh.b
        self.out_lo = foot < mesh.a
        gb = problem.g(np.full_like(p, mesh.b), p)
        ga = problem.g(np.full_like(p, mesh.a), p)
        self.g_hi = np.broadcast_to(gb, self.Q.shape)
        self.g_lo = np.broadcast_to(ga, self.Q.shape)
        self.gplus = np.zeros(self.Q.shape, bool)
        self.gplus[-1, p > 0] = True
        self.gplus[0, p < 0] = True
        self.gvals = np.where(self.Q >= 0.5 * (mesh.a + mesh.b), self.g_hi, self.g_lo)
        # momentum drift over h/2 along dp = (F - gamma p) dt
        tau = 0.5 * h
        s = eval_shape_functions(problem.gamma * tau)
        fq = problem.force(self.Q)
        pnew = self.P * np.exp(-problem.gamma * tau) + fq * tau * s.phi1
        self.pos_p = (pnew + mesh.p_max) / mesh.dp
        # exact heat step in p with reflecting ends
        n = mesh.np_
        lap = np.zeros((n, n))
        idx = np.arange(n)
        lap[idx[1:], idx[:-1]] = 1.0
        lap[idx[:-1], idx[1:]] = 1.0
        lap[idx, idx] = -2.0
        lap[0, 1] = 2.0
        lap[-1, -2] = 2.0
        heat = expm(0.5 * problem.sigma**2 * h / mesh.dp**2 * lap)
        if interp == "linear":
            heat = np.clip(heat, 0.0, None)
            heat /= heat.sum(axis=1, keepdims=True)
        self.heat_t = np.ascontiguousarray(heat.T)

    def transport(self, u):
        v = _interp_axis(u, self.pos_q, 0, self.interp)
        v = np.where(self.out_hi, self.g_hi, v)
        v = np.where(self.out_lo, self.g_lo, v)
        return v

    def drift(self, u):
        return _interp_axis(u, self.pos_p, 1, self.interp)

    def impose(self, u):
        return np.where(self.gplus, self.gvals, u)

    def step(self, u):
        u = self.impose(self.transport(u))
        u = self.drift(u)
        u = u @ self.heat_t
        u = self.drift(u)
        return self.impose(self.transport(u))


def solve_kfp_1d(problem: GridProblem, mesh: Mesh1D, interp: str = "linear",
                 store_every: Optional[int] = None, store_steps=None,
                 monitor_leak: bool = True) -> GridSolution:
    """March the grid solution to ``problem.horizon``.

    Parameters
    ----------
    problem : GridProblem
    mesh : Mesh1D
        ``horizon`` must be a multiple of ``mesh.dt`` up to rounding.
    interp : {"linear", "cubic"}
        Linear interpolation is monotone (maximum principle guaranteed);
        cubic is more accurate but not monotone.
    store_every : int, optional
        Keep every ``store_every``-th step. By default only the initial and
        final states are kept.
    store_steps : iterable of int, optional
        Additional step indices to keep.
    monitor_leak : bool
        Also solve for the probability of touching the momentum cutoff,
        reported as its maximum over ``|p| <= P/2`` at the final time.
    """
    n_steps = int(round(problem.horizon / mesh.dt))
    if n_steps < 1 or abs(n_steps * mesh.dt - problem.horizon) > 1e-9 * problem.horizon:
        raise ValueError("horizon must be a positive multiple of dt")
    st = _Stepper(problem, mesh, interp)
    u = problem.f(st.Q, st.P).astype(float)
    u = np.broadcast_to(u, st.Q.shape).copy()
    u = st.impose(u)
    keep = set(store_steps or ())
    times, snaps = [0.0], [u.copy()]
    for k in range(1, n_steps + 1):
        u = st.step(u)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("non-finite grid values")
        if k == n_steps or k in keep or (store_every and k % store_every == 0):
            times.append(k * mesh.dt)
            snaps.append(u.copy())

    leak = None
    if monitor_leak:
        leak = _leak(problem, mesh, interp, n_steps)
    gp = st.gvals[st.gplus]
    meta = {
        "g_zero": bool(np.all(gp == 0.0)),
        "gamma": problem.gamma,
        "data_min": float(min(np.min(snaps[0]), np.min(gp) if gp.size else np.inf)),
        "data_max": float(max(np.max(snaps[0]), np.max(gp) if gp.size else -np.inf)),
        "n_steps": n_steps,
    }
    return GridSolution(mesh, np.array(times), np.stack(snaps), leak, interp, meta)


def _leak(problem, mesh, interp, n_steps):
    zero = lambda q, p: np.zeros(np.broadcast(q, p).shape)
    aux = GridProblem(problem.force, problem.gamma, problem.sigma, zero, zero, problem.horizon)
    st = _Stepper(aux, mesh, interp)
    w = np.zeros(st.Q.shape)
    edge = np.zeros(st.Q.shape, bool)
    edge[:, 0] = edge[:, -1] = True
    w[edge] = 1.0
    for _ in range(n_steps):
        w = st.step(w)
        w[edge] = 1.0
    core = np.abs(mesh.p) <= 0.5 * mesh.p_max
    return float(np.max(w[:, core]))


def interpolate(solution: GridSolution, q, p, k: int = -1):
    """Bilinear interpolation of snapshot ``k`` at points ``(q, p)``."""
    m = solution.mesh
    u = solution.u[k]
    fq = (np.asarray(q, dtype=float) - m.a) / m.dq
    fp = (np.asarray(p, dtype=float) + m.p_max) / m.dp
    iq, wq = _lin_weights(fq, m.nq)
    ip, wp = _lin_weights(fp, m.np_)
    return ((1 - wq) * (1 - wp) * u[iq, ip] + wq * (1 - wp) * u[iq + 1, ip]
            + (1 - wq) * wp * u[iq, ip + 1] + wq * wp * u[iq + 1, ip + 1])


# --- checks ------------------------------------------------------------------------

class MaxPrincipleReport(NamedTuple):
    holds: bool
    upper_margin: float
    lower_margin: float
    argmax: tuple
    argmin: tuple
    data_range: tuple


def check_maximum_principle(solution: GridSolution, problem: Optional[GridProblem] = None,
                            tol: float = 1e-10) -> MaxPrincipleReport:
    """Compare the solution range with the range of the data.

    The data are ``f`` at ``t = 0`` and ``g`` on the outgoing boundary
    nodes. Margins are ``data_max - max u`` and ``min u - data_min`` (both
    nonnegative when the principle holds); ``argmax`` is
    ``(t, q, p)`` of the largest value.
    """
    m = solution.mesh
    lo, hi = solution.meta["data_min"], solution.meta["data_max"]
    u = solution.u
    kmax = np.unravel_index(np.argmax(u), u.shape)
    kmin = np.unravel_index(np.argmin(u), u.shape)
    up = hi - float(u[kmax])
    dn = float(u[kmin]) - lo
    loc = lambda k: (float(solution.times[k[0]]), float(m.q[k[1]]), float(m.p[k[2]]))
    return MaxPrincipleReport(bool(up >= -tol and dn >= -tol), up, dn, loc(kmax), loc(kmin), (lo, hi))


def dual_transform(solution: GridSolution, gamma: Optional[float] = None) -> GridSolution:
    """``v(t, q, p) = exp(-gamma t) u(t, q, -p)`` for homogeneous boundary data."""
    if not solution.meta.get("g_zero", False):
        raise ValueError("dual transform needs zero boundary data")
    gamma = solution.meta["gamma"] if gamma is None else gamma
    fac = np.exp(-gamma * solution.times)[:, None, None]
    v = fac * solution.u[:, :, ::-1]
    meta = dict(solution.meta, dual=True, gamma=gamma)
    return GridSolution(solution.mesh, solution.times, v, None, solution.interp, meta)


def adjoint_residual(v: GridSolution, force: ForceField, gamma: float, sigma: float, k: int,
                     q_margin: float = 0.0, p_frac: float = 0.5) -> float:
    """Max residual of the adjoint equation on interior nodes at snapshot ``k``.

    ``v`` should solve ``d_t v = -p d_q v - (F + gamma p) d_p v - gamma v
    + (sigma^2 / 2) d_pp v``, the formal adjoint of the generator with
    friction ``-gamma``. Snapshots ``k - 1, k, k + 1`` must be equally spaced.
    All derivatives are second-order central differences.
    """
    m = v.mesh
    dt1 = v.times[k] - v.times[k - 1]
    dt2 = v.times[k + 1] - v.times[k]
    if abs(dt1 - dt2) > 1e-12 * max(dt1, dt2):
        raise ValueError("snapshots around k must be equally spaced")
    vt = (v.u[k + 1] - v.u[k - 1]) / (2 * dt1)
    w = v.u[k]
    Q, P = np.meshgrid(m.q, m.p, indexing="ij")
    vq = np.zeros_like(w)
    vp = np.zeros_like(w)
    vpp = np.zeros_like(w)
    vq[1:-1] = (w[2:] - w[:-2]) / (2 * m.dq)
    vp[:, 1:-1] = (w[:, 2:] - w[:, :-2]) / (2 * m.dp)
    vpp[:, 1:-1] = (w[:, 2:] - 2 * w[:, 1:-1] + w[:, :-2]) / m.dp**2
    res = vt - (-P * vq - (force(Q) + gamma * P) * vp - gamma * w + 0.5 * sigma**2 * vpp)
    mask = np.zeros_like(w, bool)
    qm = (Q > m.a + q_margin) & (Q < m.b - q_margin)
    mask[1:-1, 1:-1] = True
    mask &= qm & (np.abs(P) <= p_frac * m.p_max)
    return float(np.max(np.abs(res[mask])))


# --- persistence ---------------------------------------------------------------------

def save_solution(solution: GridSolution, stem: str, k: int = -1) -> None:
    """Write snapshot ``k`` as ``stem.bin`` (float64, C order) plus ``stem.json``."""
    u = np.ascontiguousarray(solution.u[k], dtype="<f8")
    u.tofile(stem + ".bin")
    head = dict(solution.mesh.header(), t=float(solution.times[k]), interp=solution.interp,
                leak=solution.leak, dtype="<f8", shape=list(u.shape))
    with open(stem + ".json", "w") as fh:
        json.dump(head, fh, indent=2, sort_keys=True)


def load_solution(stem: str):
    with open(stem + ".json") as fh:
        head = json.load(fh)
    u = np.fromfile(stem + ".bin", dtype=head["dtype"]).reshape(head["shape"])
    return head, u
