"""Harnack chains: connecting paths, admissible chains over a compact set, box membership.

A compact set ``K = {|p| <= k, d(q) >= delta}`` of ``D`` is crossed by a C^1,
piecewise cubic path built from Hermite bridges between nodes of a lattice
cover of ``K'``. Sampling the path at equally spaced times ``s_j`` gives the
chain of scaled boxes along which a local Harnack inequality is iterated;
the chained constant is ``C_KT ** n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .geometry import DomainSpec, Interval

__all__ = [
    "HarnackPath",
    "hermite_bridge",
    "HarnackChainSpec",
    "AdmissibleChain",
    "build_admissible_chain",
    "MembershipReport",
    "verify_chain_membership",
    "check_path_membership",
    "harnack_constant",
    "log_harnack_constant",
    "empirical_harnack_constant",
]

C_PATH = 8.0


# --- connecting path ---------------------------------------------------------------

def _norm(v) -> float:
    # Euclidean norm without underflow of the squares
    m = float(np.max(np.abs(v))) if np.size(v) else 0.0
    return m * float(np.linalg.norm(np.asarray(v) / m)) if m > 0 else 0.0


def _basis(s):
    s2 = s * s
    s3 = s2 * s
    return (3 * s2 - 2 * s3, s3 - s2, s + 2 * s3 - 3 * s2)


def _basis_d1(s):
    return (6 * s - 6 * s * s, 3 * s * s - 2 * s, 1 + 6 * s * s - 6 * s)


def _basis_d2(s):
    return (6 - 12 * s, 6 * s - 2, 12 * s - 6)


@dataclass(frozen=True)
class HarnackPath:
    """Cubic path on ``[0, Delta]`` from ``x = (q, p)`` to ``y = (q', p')``.

    ``phi(t) = q + (q' - q) b1(s) + Delta (p' - p) b2(s) + Delta p b3(s)``
    with ``s = t / Delta``, ``b1 = 3 s^2 - 2 s^3``, ``b2 = s^3 - s^2`` and
    ``b3 = s + 2 s^3 - 3 s^2``.
    """

    q: np.ndarray
    p: np.ndarray
    q1: np.ndarray
    p1: np.ndarray
    delta: float

    def _coef(self):
        return self.q1 - self.q, self.delta * (self.p1 - self.p), self.delta * self.p

    def position(self, t):
        s = np.asarray(t, dtype=float)[..., None] / self.delta
        a, b, c = self._coef()
        b1, b2, b3 = _basis(s)
        return self.q + a * b1 + b * b2 + c * b3

    def velocity(self, t):
        s = np.asarray(t, dtype=float)[..., None] / self.delta
        a, b, c = self._coef()
        b1, b2, b3 = _basis_d1(s)
        return (a * b1 + b * b2 + c * b3) / self.delta

    def acceleration(self, t):
        s = np.asarray(t, dtype=float)[..., None] / self.delta
        a, b, c = self._coef()
        b1, b2, b3 = _basis_d2(s)
        return (a * b1 + b * b2 + c * b3) / self.delta**2

    def scale(self) -> float:
        """``|q' - q| + Delta |p' - p| + Delta |p|``."""
        return float(_norm(self.q1 - self.q) + self.delta * _norm(self.p1 - self.p)
                     + self.delta * _norm(self.p))

    def bounds_report(self, c: float = C_PATH, n_grid: int = 2001) -> dict:
        """Attained suprema of ``|phi - q|``, ``|phi'|``, ``|phi''|`` and their allowed values."""
        t = np.linspace(0.0, self.delta, n_grid)
        sc = self.scale()
        dev = float(np.max(np.linalg.norm(self.position(t) - self.q, axis=-1)))
        vel = float(np.max(np.linalg.norm(self.velocity(t), axis=-1)))
        acc = float(np.max(np.linalg.norm(self.acceleration(t), axis=-1)))
        lim = (c * sc, c * sc / self.delta, c * sc / self.delta**2)
        return {
            "sup_dev": dev, "sup_vel": vel, "sup_acc": acc,
            "bound_dev": lim[0], "bound_vel": lim[1], "bound_acc": lim[2],
            "holds": bool(dev <= lim[0] and vel <= lim[1] and acc <= lim[2]),
        }


def hermite_bridge(x, y, delta: float) -> HarnackPath:
    """Cubic path matching position and velocity ``x`` at 0 and ``y`` at ``delta``."""
    if not delta > 0:
        raise ValueError("Delta must be > 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.size % 2:
        raise ValueError("x and y must be phase points of equal dimension")
    d = x.size // 2
    return HarnackPath(x[:d], x[d:], y[:d], y[d:], float(delta))


# --- admissible chain --------------------------------------------------------------

@dataclass(frozen=True)
class HarnackChainSpec:
    """Compact set, horizon and constants of the chaining argument.

    Parameters
    ----------
    domain : DomainSpec
    k : float
        Momentum bound of ``K``.
    delta : float
        Position margin: ``K = {|p| <= k, d(q) >= delta}``.
    horizon : float
        ``T``.
    eps : float
        Time shift of the Harnack inequality (``t >= T + eps``).
    c_path : float
        Constant of the connecting-path bounds.
    r_base, delta_base, c_base : float
        Radius, time gap and constant of the local Harnack inequality; these
        are inputs, not computed.
    safety : float
        Factor in ``(0, 1)`` applied to the largest admissible ``r``.
    """

    domain: DomainSpec
    k: float
    delta: float
    horizon: float = 1.0
    eps: float = 0.1
    c_path: float = C_PATH
    r_base: float = 0.5
    delta_base: float = 0.25
    c_base: float = 10.0
    safety: float = 0.99

    def __post_init__(self):
        if self.k < 0 or not self.delta > 0 or not self.horizon > 0 or not self.eps > 0:
            raise ValueError("need k >= 0 and delta, horizon, eps > 0")
        if not (0 < self.r_base < 1 and 0 < self.delta_base < 1
                and self.delta_base + self.r_base**2 < 1):
            raise ValueError("need R, Delta in (0, 1) with Delta + R^2 < 1")
        if not self.c_base > 1:
            raise ValueError("c_base must be > 1")
        if not self.c_path > 1:
            raise ValueError("c_path must be > 1")

    @property
    def delta_k(self) -> float:
        return min(self.delta, self.domain.sphere_radius)

    def in_k(self, x) -> bool:
        d = self.domain.dim
        x = np.asarray(x, dtype=float)
        sd = float(self.domain.signed_distance(x[:d]))
        return bool(sd >= self.delta * (1 - 1e-12) and np.linalg.norm(x[d:]) <= self.k * (1 + 1e-12))


@dataclass
class AdmissibleChain:
    spec: HarnackChainSpec
    x: np.ndarray
    y: np.ndarray
    nodes: np.ndarray          # (n_seg + 1, 2 d) segment end states
    seg_delta: float           # Delta, length of each segment
    eps_cover: float
    r_cover: float
    spacing: np.ndarray
    n_walk: int
    n_loops: int
    lattice_nodes: int
    m_kt: float
    m_worst: float
    r_kt: float
    r_eps: float
    alpha_eps: float
    n_eps: int
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.x.size // 2

    @property
    def n_segments(self) -> int:
        return self.nodes.shape[0] - 1

    def _seg(self, s):
        s = np.asarray(s, dtype=float)
        j = np.clip(np.floor(s / self.seg_delta).astype(np.int64), 0, self.n_segments - 1)
        u = (s - j * self.seg_delta) / self.seg_delta
        d = self.dim
        a = self.nodes[j]
        b = self.nodes[j + 1]
        return a[..., :d], a[..., d:], b[..., :d], b[..., d:], u[..., None]

    def position(self, s):
        q, p, q1, p1, u = self._seg(s)
        b1, b2, b3 = _basis(u)
        D = self.seg_delta
        return q + (q1 - q) * b1 + D * (p1 - p) * b2 + D * p * b3

    def velocity(self, s):
        q, p, q1, p1, u = self._seg(s)
        b1, b2, b3 = _basis_d1(u)
        D = self.seg_delta
        return ((q1 - q) * b1 + D * (p1 - p) * b2 + D * p * b3) / D

    def acceleration(self, s):
        q, p, q1, p1, u = self._seg(s)
        b1, b2, b3 = _basis_d2(u)
        D = self.seg_delta
        return ((q1 - q) * b1 + D * (p1 - p) * b2 + D * p * b3) / D**2

    def report(self) -> dict:
        return {
            "x": self.x.tolist(), "y": self.y.tolist(),
            "delta_K": self.spec.delta_k, "eps_cover": self.eps_cover, "r_cover": self.r_cover,
            "Delta": self.seg_delta, "n_segments": self.n_segments, "n_walk": self.n_walk,
            "n_loops": self.n_loops, "lattice_nodes": self.lattice_nodes,
            "M_KT": self.m_kt, "M_worst": self.m_worst, "r_KT": self.r_kt,
            "r_eps": self.r_eps, "alpha_eps": self.alpha_eps, "n_eps": self.n_eps,
            "log10_constant": log_harnack_constant(self.spec.c_base, self.n_eps) / math.log(10.0),
            **self.info,
        }


def _segment_sup(nodes, D, n_grid=64):
    """Certified per-path sup of ``|phi'|`` plus sup of ``|phi''|``."""
    d = nodes.shape[1] // 2
    q, p, q1, p1 = nodes[:-1, :d], nodes[:-1, d:], nodes[1:, :d], nodes[1:, d:]
    a, b, c = q1 - q, D * (p1 - p), D * p
    # |phi''| is the norm of an affine function: maximal at an end
    acc = np.maximum(np.linalg.norm(a * 6 + b * -2 + c * -6, axis=-1),
                     np.linalg.norm(a * -6 + b * 4 + c * 6, axis=-1)) / D**2
    u = np.linspace(0.0, 1.0, n_grid)
    vmax = np.zeros(q.shape[0])
    for ui in u:
        b1, b2, b3 = _basis_d1(ui)
        vmax = np.maximum(vmax, np.linalg.norm(a * b1 + b * b2 + c * b3, axis=-1) / D)
    # grid gap correction
    vmax = vmax + 0.5 * D / (n_grid - 1) * acc
    return vmax, acc


def _lattice(spec: HarnackChainSpec, r_cover: float):
    dom = spec.domain
    d = dom.dim
    dk = spec.delta_k
    lo_q, hi_q = dom.bounding_box()
    lo = np.concatenate([lo_q + dk, np.full(d, -spec.k)])
    hi = np.concatenate([hi_q - dk, np.full(d, spec.k)])
    if np.any(hi < lo):
        raise ValueError("the set K' is empty")
    s_max = 2.0 * r_cover / math.sqrt(2 * d) * (1 - 1e-9)
    n = np.maximum(np.ceil((hi - lo) / s_max).astype(np.int64), 0) + 1
    spacing = np.where(n > 1, (hi - lo) / np.maximum(n - 1, 1), 0.0)
    return lo, spacing, n


def build_admissible_chain(spec: HarnackChainSpec, x, y) -> AdmissibleChain:
    """Build a path from ``x`` to ``y`` through ``K'`` and the matching box chain.

    The cover of ``K' = {|p| <= k, d(q) >= delta_K}`` is a regular lattice
    with half-diagonal ``eps_cover / (8 C)``; neighbours differing by at most
    one step per axis are adjacent (distance ``<= eps_cover / (4 C)``). As
    ``K'`` is convex for interval and ball domains, the walk between the
    nodes nearest to ``x`` and ``y`` moves every lagging index by one step at
    a time. The walk is padded with loops at its last node so that the
    segment length ``Delta = T / n_segments`` is below
    ``eps_cover / (2 M_K C) ^ 1``.

    Raises
    ------
    ValueError
        If ``x`` or ``y`` is not in ``K``, or a walk node falls outside the
        admissible region (disconnected cover at this resolution).
    """
    d = spec.domain.dim
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    for z in (x, y):
        if z.shape != (2 * d,) or not spec.in_k(z):
            raise ValueError("x and y must belong to K")
    C = spec.c_path
    dk = spec.delta_k
    eps_c = 0.5 * dk
    r_cover = eps_c / (8.0 * C)
    m_k = spec.k + 1.0
    lo, spacing, n_axis = _lattice(spec, r_cover)

    def nearest(z):
        with np.errstate(invalid="ignore", divide="ignore"):
            i = np.where(spacing > 0, np.rint((z - lo) / np.where(spacing > 0, spacing, 1)), 0)
        return np.clip(i, 0, n_axis - 1).astype(np.int64)

    i0, i1 = nearest(x), nearest(y)
    walk = [i0]
    cur = i0.copy()
    while np.any(cur != i1):
        cur = cur + np.sign(i1 - cur)
        walk.append(cur.copy())
    pts = lo + np.array(walk) * spacing
    # admissibility of the walk nodes (tolerance r_cover for curved boundaries)
    sd = spec.domain.signed_distance(pts[:, :d])
    tol = 0.0 if isinstance(spec.domain, Interval) else r_cover
    if np.any(sd < dk - tol - 1e-12) or np.any(np.linalg.norm(pts[:, d:], axis=-1) > spec.k + tol + 1e-12):
        raise ValueError("cover graph walk leaves K'; domain not connected at this resolution")
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=-1) if len(pts) > 1 else np.zeros(0)
    adj = eps_c / (4.0 * C)
    if np.any(gaps > adj * (1 + 1e-9)):
        raise ValueError("walk step exceeds the adjacency radius")

    n_walk = len(walk) - 1
    d_max = min(eps_c / (2.0 * m_k * C), 1.0)
    n_seg = max(n_walk + 2, int(math.floor(spec.horizon / d_max)) + 1)
    D = spec.horizon / n_seg
    n_loops = n_seg - 2 - n_walk
    nodes = np.concatenate([x[None], pts, np.repeat(pts[-1:], n_loops, axis=0), y[None]])

    vmax, amax = _segment_sup(nodes, D)
    m_kt = 1.01 * float(np.max(vmax + amax))
    m_worst = dk / D**2

    # box parameters
    R, Db = spec.r_base, spec.delta_base
    c = Db + 0.5 * R * R
    r_kt = min(math.sqrt(dk / (1.0 + m_kt)), 0.5)
    bounds = [r_kt, 2.0 * R**3 / (m_kt * c * c), R / (m_kt * c), math.sqrt(spec.eps / (1.0 - c))]
    r = spec.safety * min(bounds)
    alpha = r * r * c
    n_eps = int(math.ceil(spec.horizon / alpha - 1e-9))
    alpha = spec.horizon / n_eps
    r = math.sqrt(alpha / c)
    info = {"r_bounds": bounds, "adjacency": adj, "cover_spacing": spacing.tolist(),
            "walk_nodes": len(walk)}
    return AdmissibleChain(spec, x, y, nodes, D, eps_c, r_cover, spacing, n_walk, n_loops,
                           int(np.prod(n_axis)), m_kt, m_worst, r_kt, r, alpha, n_eps, info)


class MembershipReport(NamedTuple):
    n_points: int
    violations: dict
    margins: dict

    @property
    def ok(self) -> bool:
        return all(v == 0 for v in self.violations.values())


def check_path_membership(chain: AdmissibleChain, n_grid: int = 10_000) -> MembershipReport:
    """Check the path class conditions on a uniform grid of ``[0, T]``.

    Endpoint identities, ``|phi'| + |phi''| <= M_KT`` and
    ``d(phi) > delta_K / 2``.
    """
    T = chain.spec.horizon
    d = chain.dim
    s = np.linspace(0.0, T, n_grid)
    # include both one-sided values at the knots
    knots = np.arange(chain.n_segments + 1) * chain.seg_delta
    pos = chain.position(s)
    speed = np.linalg.norm(chain.velocity(s), axis=-1) + np.linalg.norm(chain.acceleration(s), axis=-1)
    k_in = knots[1:-1]
    if k_in.size:
        left = k_in - 1e-12 * T
        speed_l = (np.linalg.norm(chain.velocity(left), axis=-1)
                   + np.linalg.norm(chain.acceleration(left), axis=-1))
        speed = np.concatenate([speed, speed_l])
    sd = chain.spec.domain.signed_distance(pos)
    start = np.concatenate([chain.position(0.0), chain.velocity(0.0)])
    end = np.concatenate([_end_pos(chain), _end_vel(chain)])
    end_err = float(np.max(np.abs(end - chain.y)))
    start_err = float(np.max(np.abs(start - chain.x)))
    half = 0.5 * chain.spec.delta_k
    viol = {
        "endpoints": int(start_err > 1e-12 or end_err > 1e-12),
        "speed": int(np.sum(speed > chain.m_kt)),
        "distance": int(np.sum(sd <= half)),
    }
    margins = {"endpoint_error": max(start_err, end_err), "speed": float(chain.m_kt - np.max(speed)),
               "distance": float(np.min(sd) - half)}
    return MembershipReport(int(s.size), viol, margins)


def _end_pos(chain):
    q, p, q1, p1, u = chain._seg(np.array(chain.spec.horizon))
    D = chain.seg_delta
    b1, b2, b3 = _basis(np.ones_like(u))
    return q + (q1 - q) * b1 + D * (p1 - p) * b2 + D * p * b3


def _end_vel(chain):
    q, p, q1, p1, u = chain._seg(np.array(chain.spec.horizon))
    D = chain.seg_delta
    b1, b2, b3 = _basis_d1(np.ones_like(u))
    return ((q1 - q) * b1 + D * (p1 - p) * b2 + D * p * b3) / D


def verify_chain_membership(chain: AdmissibleChain, r: Optional[float] = None,
                            solution_sampler: Optional[Callable] = None,
                            chunk: int = 1_000_000) -> MembershipReport:
    """Check that consecutive chain points lie in each other's past boxes.

    With ``alpha = r^2 (Delta_b + R^2 / 2)`` and ``s_j = j alpha``, for every
    ``j < n`` the rescaled increments

        t_j = -alpha / r^2,
        q_j = (phi(s_{j+1}) - phi(s_j) - alpha phi'(s_j)) / r^3,
        p_j = (phi'(s_j) - phi'(s_{j+1})) / r,

    must satisfy ``-Delta_b - R^2 < t_j <= -Delta_b``, ``|q_j| < R^3`` and
    ``|p_j| < R``. The base points must also satisfy ``t - s_j > r^2``,
    ``d(phi(s_j)) > delta_K / 2`` and ``|phi'(s_j)| <= M_KT`` with
    ``t = T + eps``.

    Parameters
    ----------
    r : float, optional
        Box scale; defaults to the chain's ``r_eps``. For other values the
        number of boxes is ``floor(T / alpha)``.
    solution_sampler : callable, optional
        ``u(t, q, p)``; if given, the largest ratio ``u(next) / u(current)``
        along the chain is reported.
    """
    spec = chain.spec
    R, Db = spec.r_base, spec.delta_base
    c = Db + 0.5 * R * R
    r = chain.r_eps if r is None else float(r)
    alpha = chain.alpha_eps if r == chain.r_eps else r * r * c
    n = chain.n_eps if r == chain.r_eps else int(math.floor(spec.horizon / alpha * (1 + 1e-12)))
    t_top = spec.horizon + spec.eps
    that = -alpha / (r * r)
    viol = {"t_window": int(not (-Db - R * R < that <= -Db + 1e-15)), "q_box": 0, "p_box": 0,
            "time_floor": 0, "distance": 0, "speed": 0}
    qmax = pmax = 0.0
    dmin = np.inf
    vmax = 0.0
    tmin = np.inf
    ratio_max = 0.0
    half = 0.5 * spec.delta_k
    for j0 in range(0, n, chunk):
        j = np.arange(j0, min(j0 + chunk, n) + 1)
        s = np.minimum(j * alpha, spec.horizon)
        ph = chain.position(s)
        dph = chain.velocity(s)
        qh = np.linalg.norm(ph[1:] - ph[:-1] - alpha * dph[:-1], axis=-1) / r**3
        ph_ = np.linalg.norm(dph[:-1] - dph[1:], axis=-1) / r
        viol["q_box"] += int(np.sum(qh >= R**3))
        viol["p_box"] += int(np.sum(ph_ >= R))
        sd = spec.domain.signed_distance(ph[:-1])
        sp = np.linalg.norm(dph[:-1], axis=-1)
        tt = t_top - s[:-1]
        viol["distance"] += int(np.sum(sd <= half))
        viol["speed"] += int(np.sum(sp > chain.m_kt))
        viol["time_floor"] += int(np.sum(tt <= r * r))
        qmax = max(qmax, float(qh.max()))
        pmax = max(pmax, float(ph_.max()))
        dmin = min(dmin, float(sd.min()))
        vmax = max(vmax, float(sp.max()))
        tmin = min(tmin, float(tt.min()))
        if solution_sampler is not None:
            u = solution_sampler(t_top - s, ph, dph)
            ratio_max = max(ratio_max, float(np.max(u[1:] / u[:-1])))
    margins = {"q_box": R**3 - qmax, "p_box": R - pmax, "distance": dmin - half,
               "speed": chain.m_kt - vmax, "time_floor": tmin - r * r, "r": r, "alpha": alpha,
               "n_boxes": n}
    if solution_sampler is not None:
        margins["max_step_ratio"] = ratio_max
    return MembershipReport(n, viol, margins)


# --- constants ---------------------------------------------------------------------

def _n_of(chain_or_n) -> int:
    n = chain_or_n.n_eps if isinstance(chain_or_n, AdmissibleChain) else int(chain_or_n)
    if n < 1:
        raise ValueError("the chain needs at least one box")
    return n


def harnack_constant(c_base: float, chain_or_n) -> float:
    """Chained constant ``c_base ** n`` (``inf`` on overflow)."""
    if not c_base > 1:
        raise ValueError("base constant must be > 1")
    n = _n_of(chain_or_n)
    try:
        return float(c_base) ** n
    except OverflowError:
        return math.inf


def log_harnack_constant(c_base: float, chain_or_n) -> float:
    """Natural log of :func:`harnack_constant`."""
    if not c_base > 1:
        raise ValueError("base constant must be > 1")
    return _n_of(chain_or_n) * math.log(c_base)


def empirical_harnack_constant(u: Callable, k_points: np.ndarray, t: float, horizon: float) -> float:
    """Smallest ``C`` with ``sup_K u(t, .) <= C inf_K u(t + T, .)`` over sample points of ``K``.

    ``u(t, x)`` takes an array of phase points.
    """
    top = float(np.max(u(t, k_points)))
    bot = float(np.min(u(t + horizon, k_points)))
    return top / bot
