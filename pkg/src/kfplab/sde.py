"""Simulation of the Langevin SDE absorbed at the boundary of ``O x R^d``.

The workhorse is a vectorized block engine. Paths are grouped in fixed-size
blocks; block ``b`` draws all its randomness from
``SeedSequence(seed, spawn_key=(b,))`` and its three children (main noise,
position-perturbation noise, bridge-refinement noise). Normals for the main
noise are drawn for every path of the block at every step, so runs that only
differ in a perturbation parameter share their driving noise path by path,
and results never depend on how blocks are spread over workers.
"""
from __future__ import annotations

import json
from functools import lru_cache
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import multiprocessing as mp
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import kernel as kern
from .geometry import BoundaryClass, DomainSpec, classify_many, geom_tol
from .kernel import GaussianKernelSpec, as_phase

__all__ = [
    "ForceField",
    "SimConfig",
    "AbsorbedPathRecord",
    "BatchResult",
    "integrate_step",
    "refine_exit",
    "simulate_absorbed",
    "simulate_absorbed_batch",
    "simulate_pair_coupled",
    "simulate_free_path",
    "FreePath",
    "girsanov_weight",
    "leave_closure_fraction",
    "bridge_coefficients",
    "write_path_dump",
    "resolve_workers",
]

SCHEMES = ("euler", "splitting", "perturbed")
_N_SCAN = 16
_N_SUB = 10


# --- force fields ------------------------------------------------------------

@dataclass(frozen=True)
class ForceField:
    """Force ``F(q)`` with sup-norm and Lipschitz metadata.

    Parameters
    ----------
    kind : {"zero", "linear", "sine", "tabulated"}
        ``linear`` is ``-k q``; ``sine`` is ``A sin(q)`` componentwise;
        ``tabulated`` interpolates ``values`` on the increasing nodes ``grid``
        (d = 1, constant beyond the table).
    """

    kind: str = "zero"
    k: float = 1.0
    amplitude: float = 1.0
    grid: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("zero", "linear", "sine", "tabulated"):
            raise ValueError(f"unknown force kind {self.kind!r}")
        if self.kind == "tabulated":
            g = np.asarray(self.grid, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if g.ndim != 1 or g.size < 2 or g.shape != v.shape or np.any(np.diff(g) <= 0):
                raise ValueError("tabulated force needs increasing grid and matching values")
            if not np.all(np.isfinite(v)):
                raise ValueError("tabulated force has non-finite values")
            object.__setattr__(self, "grid", tuple(g))
            object.__setattr__(self, "values", tuple(v))

    def __call__(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(q)
        if self.kind == "linear":
            return -self.k * q
        if self.kind == "sine":
            return self.amplitude * np.sin(q)
        return np.interp(q, self.grid, self.values)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "linear" and self.k == 0) or (
            self.kind == "sine" and self.amplitude == 0)

    @property
    def lip_const(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "linear":
            return abs(self.k)
        if self.kind == "sine":
            return abs(self.amplitude)
        g, v = np.asarray(self.grid), np.asarray(self.values)
        return float(np.max(np.abs(np.diff(v) / np.diff(g))))

    def sup_norm(self, dom: Optional[DomainSpec] = None) -> float:
        """Sup of ``|F|`` over the whole space, or over the closure of ``dom``."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "tabulated":
            v = np.asarray(self.values)
            if dom is None:
                return float(np.max(np.abs(v)))
            lo, hi = dom.bounding_box()
            pts = np.concatenate([[lo[0], hi[0]], [g for g in self.grid if lo[0] <= g <= hi[0]]])
            return float(np.max(np.abs(self(pts))))
        if dom is None:
            return np.inf if self.kind == "linear" else abs(self.amplitude)
        lo, hi = dom.bounding_box()
        if self.kind == "linear":
            if hasattr(dom, "radius"):
                return abs(self.k) * (np.linalg.norm(dom.center) + dom.radius)
            return abs(self.k) * max(abs(lo[0]), abs(hi[0]))
        # sine: per-component sup of |sin| over [lo_i, hi_i]
        comp = []
        for a, b in zip(lo, hi):
            # any point pi/2 + k pi inside [a, b]?
            kk = np.ceil((a - np.pi / 2) / np.pi)
            if np.pi / 2 + kk * np.pi <= b:
                comp.append(1.0)
            else:
                comp.append(max(abs(np.sin(a)), abs(np.sin(b))))
        return abs(self.amplitude) * float(np.sqrt(np.sum(np.square(comp))))

    def drift_lip(self, gamma: float) -> float:
        """Lipschitz constant of ``(q, p) -> (p, F(q) - gamma p)``."""
        a = np.array([[0.0, 1.0], [self.lip_const, abs(gamma)]])
        return float(np.linalg.norm(a, 2))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "linear":
            out["k"] = self.k
        elif self.kind == "sine":
            out["amplitude"] = self.amplitude
        elif self.kind == "tabulated":
            out["grid"] = list(self.grid)
            out["values"] = list(self.values)
        return out

    @classmethod
    def from_dict(cls, cfg: dict) -> "ForceField":
        cfg = dict(cfg)
        kind = cfg.pop("kind")
        return cls(kind=kind, **cfg)


ZERO = ForceField("zero")


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Numerical settings of a path simulation.

    ``exit_refine_tol`` defaults to ``1e-6 * dt``. ``epsilon`` is the position
    noise intensity of the ``perturbed`` scheme.
    """

    scheme: str = "splitting"
    dt: float = 1e-3
    horizon: float = 1.0
    exit_refine_tol: Optional[float] = None
    seed: int = 0
    workers: int = 1
    epsilon: float = 0.0
    block_size: int = 65536
    refine: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.exit_refine_tol is None:
            object.__setattr__(self, "exit_refine_tol", 1e-6 * self.dt)
        if not 0 < self.exit_refine_tol <= self.dt:
            raise ValueError("exit_refine_tol must lie in (0, dt]")
        if self.scheme == "perturbed" and not self.epsilon > 0:
            raise ValueError("perturbed scheme needs epsilon > 0")
        if self.scheme != "perturbed" and self.epsilon != 0:
            raise ValueError("epsilon is only used by the perturbed scheme")
        if self.block_size < 1 or self.workers < 1:
            raise ValueError("block_size and workers must be >= 1")

    @property
    def q_noise(self) -> float:
        return self.epsilon if self.scheme == "perturbed" else 0.0


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is not None:
        return int(workers)
    env = os.environ.get("KFP_LAB_WORKERS")
    return int(env) if env else 1


# --- single steps ------------------------------------------------------------

def integrate_step(force: ForceField, spec: GaussianKernelSpec, scheme: str, x, dt: float,
                   rng: np.random.Generator, epsilon: float = 0.0) -> np.ndarray:
    """Advance phase points ``x`` (shape ``(..., 2 d)``) by one step.

    ``euler`` is Euler-Maruyama. ``splitting`` is a half kick by the force,
    an exact free-kernel draw over ``dt`` (friction and noise included), then
    a second half kick. ``perturbed`` is ``splitting`` with an extra
    ``sqrt(2 epsilon) dW`` added to the position.
    """
    d = spec.dim
    x = as_phase(x, d)
    z = rng.standard_normal(x.shape[:-1] + (2, d))
    zq = rng.standard_normal(x.shape[:-1] + (d,)) if scheme == "perturbed" else None
    sh = x.shape
    x2 = x.reshape(-1, 2 * d)
    q1, p1, _ = _step(force, spec, scheme, x2[:, :d], x2[:, d:], dt, z.reshape(-1, 2, d),
                      None if zq is None else zq.reshape(-1, d), epsilon)
    return np.concatenate([q1, p1], axis=-1).reshape(sh)


@lru_cache(maxsize=1024)
def _step_coeffs(spec: GaussianKernelSpec, h: float):
    a, e = kern.mean_coeffs(spec, h)
    l11, l21, l22 = kern.block_cholesky(spec, h)
    return float(a), float(e), float(l11), float(l21), float(l22)


@lru_cache(maxsize=1024)
def _spread(spec: GaussianKernelSpec, h: float, q_noise: float) -> float:
    # four standard deviations of the free-flight position on one step
    return 4.0 * float(np.sqrt(kern.cov_blocks(spec, h, q_noise)[0]))


def _step(force, spec, scheme, q, p, h, z, zq, eps):
    """One step on position and momentum arrays of shape ``(n, d)``.

    Returns the new state and the free-flight endpoints: the states right
    after the first half kick and right before the second one. Between them
    the position moves with velocity equal to the momentum, which is what
    exit detection uses.
    """
    if scheme == "euler":
        q1 = q + p * h
        p1 = p + (force(q) - spec.gamma * p) * h + spec.sigma * np.sqrt(h) * z[:, 1, :]
        return q1, p1, (q, p, q1, p1)
    a, e, l11, l21, l22 = _step_coeffs(spec, h)
    pk = p if force.is_zero else p + (0.5 * h) * force(q)
    z0 = z[:, 0, :]
    qb = q + a * pk + l11 * z0
    pb = e * pk + l21 * z0 + l22 * z[:, 1, :]
    if scheme == "perturbed":
        qb += np.sqrt(2.0 * eps * h) * zq
    if force.is_zero:
        return qb, pb, (q, pk, qb, pb)
    p1 = pb + (0.5 * h) * force(qb)
    return qb, p1, (q, pk, qb, pb)


# --- Hermite interpolation and exit refinement ---------------------------------

def _hermite(q0, v0, q1, v1, h, s):
    """Cubic Hermite position at fractions ``s`` of a segment of length ``h``.

    ``s`` broadcasts as ``(n, m)`` against ``q``'s ``(n, d)`` via a new axis.
    """
    s = np.asarray(s)[..., None]
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return (h00 * q0[:, None, :] + h10 * h * v0[:, None, :]
            + h01 * q1[:, None, :] + h11 * h * v1[:, None, :])


def _hermite_first_negative(dom, q0, v0, q1, v1, h):
    """Fraction of the first scan point where the interpolant leaves ``O`` (NaN if none)."""
    s = np.arange(1, _N_SCAN) / _N_SCAN
    pts = _hermite(q0, v0, q1, v1, h, np.broadcast_to(s, (q0.shape[0], s.size)))
    sd = dom.signed_distance(pts)
    neg = sd < 0
    first = np.argmax(neg, axis=1)
    return np.where(neg.any(axis=1), s[first], np.nan)


def _bisect(dom, q0, v0, q1, v1, h, s_lo, s_hi, tol):
    """Vectorized bisection of ``sd(H(s)) = 0`` on ``[s_lo, s_hi]``.

    ``s_lo``, ``s_hi`` and ``tol`` are fractions of the segment length ``h``.
    """
    s_lo = np.array(s_lo, dtype=float)
    s_hi = np.array(s_hi, dtype=float)
    width = np.max(s_hi - s_lo) if s_lo.size else 0.0
    n_it = int(np.ceil(np.log2(max(width / tol, 1.0)))) + 2
    for _ in range(n_it):
        mid = 0.5 * (s_lo + s_hi)
        sd = dom.signed_distance(_hermite(q0, v0, q1, v1, h, mid[:, None])[:, 0, :])
        out = sd <= 0
        s_hi = np.where(out, mid, s_hi)
        s_lo = np.where(out, s_lo, mid)
    return s_hi


def _exit_band(q0, v0, q1, v1, h, tol):
    # sup |H'| <= 1.5 |q1 - q0| / h + |v0| + |v1|
    dq = np.linalg.norm(q1 - q0, axis=-1)
    return tol * (1.5 * dq / h + np.linalg.norm(v0, axis=-1) + np.linalg.norm(v1, axis=-1))


def refine_exit(x_start, x_end, dt: float, dom: DomainSpec, tol: float, t_start: float = 0.0):
    """Localize the boundary crossing inside one step.

    The position on the step is the cubic Hermite interpolant using ``q`` and
    ``p`` (as velocity) at both ends. Bisection stops once the bracket is
    shorter than ``tol``; the returned time is the right end of the bracket,
    so its position is on or just outside the boundary.

    Parameters
    ----------
    x_start, x_end : array_like, shape (2 d,) or (n, 2 d)
        States at the two ends of the step.
    dt : float
        Step length.
    dom : DomainSpec
    tol : float
        Time tolerance.
    t_start : float
        Time of ``x_start``.

    Returns
    -------
    tau : float or ndarray
    state : ndarray
        Interpolated state; the momentum is interpolated linearly.
    """
    d = dom.dim
    xs = np.atleast_2d(as_phase(x_start, d))
    xe = np.atleast_2d(as_phase(x_end, d))
    q0, v0, q1, v1 = xs[:, :d], xs[:, d:], xe[:, :d], xe[:, d:]
    if np.any(dom.signed_distance(q0) <= 0) or np.any(dom.signed_distance(q1) >= 0):
        raise ValueError("invalid bracket: need the start inside and the end outside")
    n = xs.shape[0]
    s = _bisect(dom, q0, v0, q1, v1, dt, np.zeros(n), np.ones(n), tol / dt)
    qt = _hermite(q0, v0, q1, v1, dt, s[:, None])[:, 0, :]
    pt = (1 - s)[:, None] * v0 + s[:, None] * v1
    tau = t_start + s * dt
    state = np.concatenate([qt, pt], axis=-1)
    if np.ndim(x_start) == 1:
        return float(tau[0]), state[0]
    return tau, state


# --- Gaussian bridge of the free flight ---------------------------------------

def _m2(spec, s):
    a, e = kern.mean_coeffs(spec, s)
    return np.array([[1.0, float(a)], [0.0, float(e)]])


def _c2(spec, s, q_noise):
    cqq, cqp, cpp = kern.cov_blocks(spec, s, q_noise)
    return np.array([[float(cqq), float(cqp)], [float(cqp), float(cpp)]])


@lru_cache(maxsize=4096)
def bridge_coefficients(spec: GaussianKernelSpec, h: float, r: float, q_noise: float = 0.0):
    """Coefficients of the free-flight bridge.

    For the free process with ``X_0 = a`` and ``X_{h+r} = b``, the
    conditional law of ``X_h`` is ``N(A a + B b, L L^T)`` coordinatewise.
    Computed in time-rescaled variables so that very short spans stay
    well conditioned.

    Returns
    -------
    A, B, L : ndarray, shape (2, 2)
    """
    T = h + r
    D = np.diag([T**1.5, T**0.5])
    Di = np.diag([T**-1.5, T**-0.5])
    Mh, Mr, MT = (Di @ _m2(spec, s) @ D for s in (h, r, T))
    Ch, CT = (Di @ _c2(spec, s, q_noise) @ Di for s in (h, T))
    K = Ch @ Mr.T @ np.linalg.inv(CT)
    A = Mh - K @ MT
    S = Ch - K @ Mr @ Ch
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    L = V @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
    return D @ A @ Di, D @ K @ Di, D @ L


def _apply_bridge(coef, xa, xb, z, d):
    A, B, L = coef
    qa, pa, qb, pb = xa[:, :d], xa[:, d:], xb[:, :d], xb[:, d:]
    z0, z1 = z[:, 0, :], z[:, 1, :]
    q = A[0, 0] * qa + A[0, 1] * pa + B[0, 0] * qb + B[0, 1] * pb + L[0, 0] * z0 + L[0, 1] * z1
    p = A[1, 0] * qa + A[1, 1] * pa + B[1, 0] * qb + B[1, 1] * pb + L[1, 0] * z0 + L[1, 1] * z1
    return np.concatenate([q, p], axis=-1)


# --- block engine --------------------------------------------------------------

@dataclass(frozen=True)
class _Task:
    force: ForceField
    spec: GaussianKernelSpec
    dom: Optional[DomainSpec]
    cfg: SimConfig
    x0: np.ndarray
    block: int
    start_index: int
    n: int
    weight_force: Optional[ForceField] = None
    weight_gamma: float = 0.0
    record_every: int = 0
    boundary_start: bool = False
    dyadic_levels: int = 0
    stop_time: Optional[float] = None


def _streams(seed: int, block: int):
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    return [np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(3)]


def _scan_segments(dom, q0, v0, q1, v1, h):
    """First sign change on one segment: returns (hit, s_lo, s_hi) as fractions."""
    n = q0.shape[0]
    sd1 = dom.signed_distance(q1)
    end_out = sd1 < 0
    s_neg = _hermite_first_negative(dom, q0, v0, q1, v1, h)
    mid_out = np.isfinite(s_neg)
    hit = end_out | mid_out
    s_hi = np.where(mid_out, s_neg, 1.0)
    s_lo = np.where(mid_out, s_hi - 1.0 / _N_SCAN, 0.0)
    return hit, np.maximum(s_lo, 0.0), s_hi, np.zeros(n)


def _run_block(task: _Task):
    force, spec, dom, cfg = task.force, task.spec, task.dom, task.cfg
    d = spec.dim
    n = task.n
    rng_main, rng_pert, rng_bridge = _streams(cfg.seed, task.block)
    x0 = task.x0
    x = np.array(np.broadcast_to(x0, (n, 2 * d)), dtype=float)
    horizon = cfg.horizon if task.stop_time is None else task.stop_time
    tol = cfg.exit_refine_tol
    eps = cfg.q_noise
    scheme = cfg.scheme

    tau = np.full(n, np.nan)
    exit_state = np.full((n, 2 * d), np.nan)
    band = np.zeros(n)
    logw = np.zeros(n) if task.weight_force is not None else None
    n_refined = 0

    act = np.arange(n)
    if dom is not None:
        sd0 = dom.signed_distance(x[:, :d])
        gt = geom_tol(dom)
        if np.any(sd0 < -gt):
            raise ValueError("start point lies outside the domain")
        on = np.abs(sd0) <= gt
        if np.any(on) and not task.boundary_start:
            pn = np.sum(x[:, d:] * dom.normal_at(x[:, :d]), axis=-1)
            imm = on & (pn >= 0)
            tau[imm] = 0.0
            exit_state[imm] = x[imm]
            act = np.flatnonzero(~imm)
    qa_, pa_ = x[act, :d].copy(), x[act, d:].copy()
    full = act.size == n

    n_steps = max(1, int(np.ceil(horizon / cfg.dt - 1e-9)))
    rec_t, rec_x = [], []
    if task.record_every:
        rec_t.append(0.0)
        rec_x.append(x.copy())
    t = 0.0
    for k in range(n_steps):
        h = cfg.dt if k < n_steps - 1 else horizon - cfg.dt * (n_steps - 1)
        z = rng_main.standard_normal((n, 2, d))
        zq = rng_pert.standard_normal((n, d)) if scheme == "perturbed" else None
        if act.size == 0:
            t += h
            continue
        if not full:
            z = z[act]
            zq = zq[act] if zq is not None else None
        q1, p1, seg = _step(force, spec, scheme, qa_, pa_, h, z, zq, eps)
        if not np.isfinite(np.sum(q1) + np.sum(p1)):
            raise FloatingPointError("non-finite state during integration")
        if logw is not None:
            zk = (task.weight_force(qa_) - task.weight_gamma * pa_) / spec.sigma
            db = (p1 - pa_) / spec.sigma
            logw[act] += np.sum(zk * db, axis=-1) - 0.5 * np.sum(zk * zk, axis=-1) * h

        if dom is not None:
            exited, s_exit, st = _detect_exits(task, dom, seg, h, rng_bridge, first_step=(k == 0))
            n_refined += int(st)
            if exited.size:
                idx = act[exited]
                tau[idx] = t + s_exit[0]
                exit_state[idx] = s_exit[1]
                band[idx] = s_exit[2]
                keep = np.ones(act.size, bool)
                keep[exited] = False
                act = act[keep]
                q1 = q1[keep]
                p1 = p1[keep]
                full = False
        qa_, pa_ = q1, p1
        t += h
        if task.record_every and ((k + 1) % task.record_every == 0 or k == n_steps - 1):
            snap = np.full((n, 2 * d), np.nan)
            snap[act, :d] = qa_
            snap[act, d:] = pa_
            rec_t.append(t)
            rec_x.append(snap)

    final = exit_state.copy()
    final[act, :d] = qa_
    final[act, d:] = pa_
    out = {
        "index": task.start_index + np.arange(n),
        "tau": tau,
        "exit_state": exit_state,
        "final_state": final,
        "band": band,
        "log_weight": logw,
        "n_refined": n_refined,
    }
    if task.record_every:
        out["rec_t"] = np.array(rec_t)
        out["rec_x"] = np.stack(rec_x, axis=1)
    return out


def _detect_exits(task, dom, seg, h, rng_bridge, first_step=False):
    """Exit detection on the free-flight segments ``fa -> fb`` of active paths.

    Returns the positions (in the active arrays) of exiting paths, a tuple
    ``(time offset in step, exit state, band)`` and the number of refined
    steps.
    """
    spec, cfg = task.spec, task.cfg
    d = spec.dim
    tol = cfg.exit_refine_tol
    q0, v0, q1, v1 = seg
    sd0 = dom.signed_distance(q0)
    sd1 = dom.signed_distance(q1)
    # convex domain: the Hermite curve stays within (4/27) h (|v0| + |v1|)
    # of the chord, and the distance is concave along the chord
    reach = (4.0 / 27.0) * h * (np.abs(v0).sum(axis=-1) + np.abs(v1).sum(axis=-1))
    spread = 0.0
    if cfg.scheme != "euler":
        spread = _spread(spec, h, cfg.q_noise)
    cand = np.flatnonzero((np.minimum(sd0, sd1) < reach + spread) | (sd1 < 0))
    empty = (np.zeros(0, int), (np.zeros(0), np.zeros((0, 2 * d)), np.zeros(0)), 0)
    if cand.size == 0:
        return empty

    c0, cv0, c1, cv1 = q0[cand], v0[cand], q1[cand], v1[cand]
    use_bridge = cfg.scheme != "euler" and cfg.refine
    if not use_bridge:
        hit, s_lo, s_hi, _ = _scan_segments(dom, c0, cv0, c1, cv1, h)
        sel = np.flatnonzero(hit)
        if sel.size == 0:
            return empty
        s = _bisect(dom, c0[sel], cv0[sel], c1[sel], cv1[sel], h, s_lo[sel], s_hi[sel], tol / h)
        qt = _hermite(c0[sel], cv0[sel], c1[sel], cv1[sel], h, s[:, None])[:, 0, :]
        pt = (1 - s)[:, None] * cv0[sel] + s[:, None] * cv1[sel]
        b = _exit_band(c0[sel], cv0[sel], c1[sel], cv1[sel], h, tol)
        return cand[sel], (s * h, np.concatenate([qt, pt], axis=-1), b), 0

    # exact bridge sampling of the free flight on a finer grid
    m = cand.size
    hs = h / _N_SUB
    xa = np.concatenate([c0, cv0], axis=-1)
    xb = np.concatenate([c1, cv1], axis=-1)
    z = rng_bridge.standard_normal((_N_SUB - 1, m, 2, d))
    pts = [xa]
    cur = xa
    for i in range(1, _N_SUB):
        coef = bridge_coefficients(spec, hs, h - i * hs, cfg.q_noise)
        cur = _apply_bridge(coef, cur, xb, z[i - 1], d)
        pts.append(cur)
    pts.append(xb)

    found = np.zeros(m, bool)
    seg_lo = [None] * m
    res_s = np.full(m, np.nan)
    res_x = np.full((m, 2 * d), np.nan)
    res_b = np.zeros(m)

    if first_step and task.dyadic_levels:
        # dyadic refinement toward the start of the first substep; the
        # bridge starts from the state before the half kick (with the force
        # frozen over the span, bridges do not depend on it)
        xa0 = pts[0]
        if not task.force.is_zero:
            xa0 = np.concatenate([c0, cv0 - (0.5 * h) * task.force(c0)], axis=-1)
        hit0 = _dyadic_start(task, dom, xa0, pts[1], hs, rng_bridge)
        for j in np.flatnonzero(hit0):
            found[j] = True
            res_s[j] = 0.0
            res_x[j] = pts[0][j]

    for i in range(_N_SUB):
        todo = np.flatnonzero(~found)
        if todo.size == 0:
            break
        a_, b_ = pts[i][todo], pts[i + 1][todo]
        hit, s_lo, s_hi, _ = _scan_segments(dom, a_[:, :d], a_[:, d:], b_[:, :d], b_[:, d:], hs)
        sel = np.flatnonzero(hit)
        if sel.size == 0:
            continue
        aa, bb = a_[sel], b_[sel]
        s = _bisect(dom, aa[:, :d], aa[:, d:], bb[:, :d], bb[:, d:], hs, s_lo[sel], s_hi[sel], tol / hs)
        qt = _hermite(aa[:, :d], aa[:, d:], bb[:, :d], bb[:, d:], hs, s[:, None])[:, 0, :]
        pt = (1 - s)[:, None] * aa[:, d:] + s[:, None] * bb[:, d:]
        j = todo[sel]
        found[j] = True
        res_s[j] = (i + s) * hs
        res_x[j] = np.concatenate([qt, pt], axis=-1)
        res_b[j] = _exit_band(aa[:, :d], aa[:, d:], bb[:, :d], bb[:, d:], hs, tol)
    sel = np.flatnonzero(found)
    return cand[sel], (res_s[sel], res_x[sel], res_b[sel]), m


class _LocalDomain:
    """Signed distance of ``q0 + dq`` computed from the displacement ``dq``.

    Adding a displacement far below the rounding unit of ``q0`` would lose
    it; here the distance of ``q0`` (snapped to 0 within the geometric
    tolerance) is corrected by the exact first and second order change.
    """

    def __init__(self, dom, q0):
        self.dom = dom
        self.q0 = q0
        tol = geom_tol(dom)
        if hasattr(dom, "radius"):
            self.v0 = q0 - np.asarray(dom.center)
            self.r0 = np.linalg.norm(self.v0, axis=-1)
            base = dom.radius - self.r0
            self.base = np.where(np.abs(base) <= tol, 0.0, base)
        else:
            lo = q0[:, 0] - dom.a
            hi = dom.b - q0[:, 0]
            self.lo = np.where(np.abs(lo) <= tol, 0.0, lo)
            self.hi = np.where(np.abs(hi) <= tol, 0.0, hi)

    def signed_distance(self, dq):
        dq = np.asarray(dq, dtype=float)
        ext = (slice(None),) + (None,) * (dq.ndim - 2)
        if hasattr(self.dom, "radius"):
            v0 = self.v0[ext]
            v = v0 + dq
            inc = (2.0 * np.sum(v0 * dq, axis=-1) + np.sum(dq * dq, axis=-1)) / (
                np.linalg.norm(v, axis=-1) + self.r0[ext])
            return self.base[ext] - inc
        x = dq[..., 0]
        return np.minimum(self.lo[ext] + x, self.hi[ext] - x)


def _dyadic_start(task, dom, xa, xb, hs, rng_bridge):
    """Look for excursions outside the closure on ``(0, hs]`` at dyadic times.

    Runs in coordinates relative to the start position, so that the tiny
    displacements at deep levels are resolved.
    """
    spec, d = task.spec, task.spec.dim
    m = xa.shape[0]
    loc = _LocalDomain(dom, xa[:, :d])
    shift = np.concatenate([xa[:, :d], np.zeros((m, d))], axis=-1)
    xa = xa - shift
    right = xb - shift
    hit = np.zeros(m, bool)
    span = hs
    for _ in range(task.dyadic_levels):
        half = 0.5 * span
        coef = bridge_coefficients(spec, half, half, task.cfg.q_noise)
        z = rng_bridge.standard_normal((m, 2, d))
        mid = _apply_bridge(coef, xa, right, z, d)
        h2, _, _, _ = _scan_segments(loc, mid[:, :d], mid[:, d:], right[:, :d], right[:, d:], half)
        hit |= h2 | (loc.signed_distance(mid[:, :d]) < 0)
        right = mid
        span = half
    return hit


def _run_tasks(tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [_run_block(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
        return list(ex.map(_run_block, tasks))


# --- public simulation API -----------------------------------------------------

class BatchResult(NamedTuple):
    """Outcome of a batch of absorbed paths (one row per path)."""

    tau: np.ndarray
    exit_state: np.ndarray
    final_state: np.ndarray
    exit_class: np.ndarray
    exit_normal_dot: np.ndarray
    band: np.ndarray
    log_weight: Optional[np.ndarray]
    n_refined: int

    @property
    def exited(self) -> np.ndarray:
        return np.isfinite(self.tau)

    @property
    def n_paths(self) -> int:
        return self.tau.size


def _batch(force, spec, dom, x0, n_paths, cfg, **kw) -> BatchResult:
    d = spec.dim
    x0 = as_phase(x0, d)
    per_path = x0.ndim == 2
    if per_path:
        n_paths = x0.shape[0]
    bs = cfg.block_size
    tasks = []
    for b, start in enumerate(range(0, n_paths, bs)):
        n = min(bs, n_paths - start)
        xb = x0[start:start + n] if per_path else x0
        tasks.append(_Task(force, spec, dom, cfg, xb, b, start, n, **kw))
    outs = _run_tasks(tasks, resolve_workers(cfg.workers))
    tau = np.concatenate([o["tau"] for o in outs])
    es = np.concatenate([o["exit_state"] for o in outs])
    fs = np.concatenate([o["final_state"] for o in outs])
    band = np.concatenate([o["band"] for o in outs])
    lw = None if outs[0]["log_weight"] is None else np.concatenate([o["log_weight"] for o in outs])
    if dom is not None:
        codes, pn = classify_many(dom, es, tol=0.0, band=np.inf)
        codes = np.where(np.isfinite(tau), codes, int(BoundaryClass.INTERIOR))
    else:
        codes = np.zeros(tau.size, int)
        pn = np.full(tau.size, np.nan)
    res = BatchResult(tau, es, fs, codes, pn, band, lw, sum(o["n_refined"] for o in outs))
    if kw.get("record_every"):
        return res, outs
    return res


def simulate_absorbed_batch(force: ForceField, spec: GaussianKernelSpec, dom: Optional[DomainSpec],
                            x0, n_paths: int, cfg: SimConfig) -> BatchResult:
    """Simulate ``n_paths`` absorbed paths from ``x0`` up to ``cfg.horizon``.

    ``x0`` is one phase point or an array of per-path starts. Pass
    ``dom=None`` for whole-space runs. Exit classes are computed with
    tolerance 0 relative to the nearest boundary point.
    """
    return _batch(force, spec, dom, x0, n_paths, cfg)


class AbsorbedPathRecord(NamedTuple):
    """One simulated path.

    ``status`` is ``"absorbed"`` or ``"survived"``; ``state`` is the exit
    state or the final state at the horizon.
    """

    index: int
    times: np.ndarray
    states: np.ndarray
    status: str
    tau: float
    state: np.ndarray
    exit_class: str
    normal_dot: float
    band: float
    log_weight: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "index": int(self.index),
            "status": self.status,
            "tau": None if not np.isfinite(self.tau) else float(self.tau),
            "exitState": [float(v) for v in self.state] if self.status == "absorbed" else None,
            "class": self.exit_class if self.status == "absorbed" else None,
            "logWeight": None if self.log_weight is None else float(self.log_weight),
        }


def _record_from(res: BatchResult, outs, i, horizon):
    o = outs[0]
    times = o["rec_t"]
    states = o["rec_x"][i]
    keep = np.all(np.isfinite(states), axis=-1)
    absorbed = bool(np.isfinite(res.tau[i]))
    lw = None if res.log_weight is None else float(res.log_weight[i])
    if absorbed:
        return AbsorbedPathRecord(i, times[keep], states[keep], "absorbed", float(res.tau[i]),
                                  res.exit_state[i], BoundaryClass(int(res.exit_class[i])).label,
                                  float(res.exit_normal_dot[i]), float(res.band[i]), lw)
    return AbsorbedPathRecord(i, times[keep], states[keep], "survived", float(horizon),
                              res.final_state[i], "Interior", float("nan"), 0.0, lw)


def simulate_absorbed(force: ForceField, spec: GaussianKernelSpec, dom: DomainSpec, x, cfg: SimConfig,
                      rng: Optional[np.random.Generator] = None, record_every: int = 1) -> AbsorbedPathRecord:
    """Simulate one absorbed path and record its states.

    The path is path 0 of block 0 for ``cfg.seed`` unless ``rng`` is given,
    in which case ``cfg.seed`` is replaced by a seed drawn from ``rng``.
    """
    if rng is not None:
        cfg = replace(cfg, seed=int(rng.integers(2**63)))
    res, outs = _batch(force, spec, dom, x, 1, cfg, record_every=record_every)
    return _record_from(res, outs, 0, cfg.horizon)


def simulate_pair_coupled(force: ForceField, spec: GaussianKernelSpec, dom: Optional[DomainSpec], x, y,
                          cfg: SimConfig, rng: Optional[np.random.Generator] = None,
                          record_every: int = 1):
    """Two whole-space paths from ``x`` and ``y`` driven by the same noise.

    No absorption is applied. Returns ``(times, path_x, path_y)``; both paths
    have shape ``(n_times, 2 d)``. ``dom`` is accepted for interface symmetry
    and ignored.
    """
    if rng is not None:
        cfg = replace(cfg, seed=int(rng.integers(2**63)))
    d = spec.dim
    out = []
    for start in (x, y):
        res, outs = _batch(force, spec, None, np.asarray(as_phase(start, d)), 1, cfg,
                           record_every=record_every)
        out.append(outs[0])
    return out[0]["rec_t"], out[0]["rec_x"][0], out[1]["rec_x"][0]


def coupled_sup_distance(force, spec, xs, ys, cfg: SimConfig):
    """``sup_s |X^x_s - X^y_s|`` over the time grid for many coupled pairs.

    Pair ``i`` uses path index ``i`` for both starts, hence the same noise.
    """
    d = spec.dim
    xs = as_phase(xs, d)
    ys = as_phase(ys, d)
    ra, oa = _batch(force, spec, None, xs, 0, cfg, record_every=1)
    rb, ob = _batch(force, spec, None, ys, 0, cfg, record_every=1)
    px = np.concatenate([o["rec_x"] for o in oa])
    py = np.concatenate([o["rec_x"] for o in ob])
    return np.max(np.linalg.norm(px - py, axis=-1), axis=1)


# --- Girsanov ------------------------------------------------------------------

class FreePath(NamedTuple):
    """Path of the reference process (no force, no friction) with its noise increments."""

    times: np.ndarray
    states: np.ndarray
    increments: Optional[np.ndarray]
    sigma: float


def simulate_free_path(spec: GaussianKernelSpec, x, cfg: SimConfig,
                       rng: Optional[np.random.Generator] = None) -> FreePath:
    """Exact path of ``dq = p dt, dp = sigma dB`` on the ``cfg`` time grid."""
    if rng is not None:
        cfg = replace(cfg, seed=int(rng.integers(2**63)))
    ref = replace(spec, gamma=0.0)
    cfg = replace(cfg, scheme="splitting", epsilon=0.0)
    res, outs = _batch(ZERO, ref, None, x, 1, cfg, record_every=1)
    states = outs[0]["rec_x"][0]
    d = spec.dim
    inc = np.diff(states[:, d:], axis=0) / spec.sigma
    return FreePath(outs[0]["rec_t"], states, inc, spec.sigma)


def girsanov_weight(path: FreePath, force: ForceField, spec: GaussianKernelSpec) -> float:
    """Log of the Girsanov density of the ``(force, spec.gamma)`` dynamics.

    Uses the left-point sum ``sum Z_k . dB_k - 1/2 sum |Z_k|^2 dt_k`` with
    ``Z = (F(q) - gamma p) / sigma`` evaluated on the reference path.
    """
    if path.increments is None:
        raise ValueError("path carries no Brownian increments")
    d = spec.dim
    q = path.states[:-1, :d]
    p = path.states[:-1, d:]
    dt = np.diff(path.times)
    zk = (force(q) - spec.gamma * p) / spec.sigma
    return float(np.sum(zk * path.increments) - 0.5 * np.sum(np.sum(zk * zk, axis=-1) * dt))


def girsanov_batch(force: ForceField, spec: GaussianKernelSpec, dom: Optional[DomainSpec], x0,
                   n_paths: int, cfg: SimConfig) -> BatchResult:
    """Reference-process batch carrying log weights for the ``(force, spec.gamma)`` dynamics."""
    ref = replace(spec, gamma=0.0)
    cfg = replace(cfg, scheme="splitting", epsilon=0.0)
    return _batch(ZERO, ref, dom, x0, n_paths, cfg, weight_force=force, weight_gamma=spec.gamma)


# --- boundary departure ----------------------------------------------------------

def leave_closure_fraction(force: ForceField, spec: GaussianKernelSpec, dom: DomainSpec, x0,
                           window: float, n_paths: int, cfg: SimConfig, dyadic_levels: int = 48):
    """Fraction of paths that visit the complement of the closure of ``O`` within ``window``.

    Boundary starts are not absorbed. On the first step the free flight is
    additionally sampled at dyadic times toward 0 through exact bridges, so
    the excursions a tangential start makes immediately are seen.

    Returns
    -------
    fraction, standard_error
    """
    cfg = replace(cfg, horizon=window)
    res = _batch(force, spec, dom, x0, n_paths, cfg, boundary_start=True,
                 dyadic_levels=dyadic_levels if cfg.refine else 0)
    left = res.exited.astype(float)
    return float(left.mean()), float(left.std(ddof=1) / np.sqrt(left.size))


# --- output ----------------------------------------------------------------------

def batch_records(res: BatchResult, horizon: float):
    """Per-path JSON records ``{index, status, tau, exitState, class, logWeight}``."""
    for i in range(res.n_paths):
        absorbed = bool(np.isfinite(res.tau[i]))
        yield {
            "index": i,
            "status": "absorbed" if absorbed else "survived",
            "tau": float(res.tau[i]) if absorbed else float(horizon),
            "exitState": [float(v) for v in res.exit_state[i]] if absorbed else None,
            "class": BoundaryClass(int(res.exit_class[i])).label if absorbed else None,
            "logWeight": None if res.log_weight is None else float(res.log_weight[i]),
        }


def write_path_dump(path, res: BatchResult, horizon: float, extra: Optional[dict] = None):
    """Write one JSON line per path."""
    with open(path, "w") as fh:
        for rec in batch_records(res, horizon):
            if extra:
                rec.update(extra)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
