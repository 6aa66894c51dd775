"""Monte Carlo Feynman-Kac solver, adjoint process, density estimation and duality checks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import kernel as kern
from .geometry import BoundaryClass, DomainSpec, classify_many
from .kernel import GaussianKernelSpec, as_phase
from .sde import (AbsorbedPathRecord, BatchResult, ForceField, SimConfig, _batch, _record_from,
                  simulate_absorbed_batch)

__all__ = [
    "FKProblem",
    "FKEstimate",
    "DensityEstimate",
    "ReversibilityResult",
    "estimate_u",
    "fk_contributions",
    "simulate_adjoint_absorbed",
    "simulate_adjoint_batch",
    "default_bandwidth",
    "estimate_density_kde",
    "kde_contributions",
    "reversibility_ratio",
    "boundary_vanishing_scan",
    "nested_chapman_kolmogorov",
    "write_estimates_csv",
]


@dataclass(frozen=True)
class FKProblem:
    """Data of the initial-boundary value problem at one point ``(t, x)``.

    ``f`` and ``g`` take arrays of phase points of shape ``(n, 2 d)`` and
    return ``(n,)`` values. ``f_sup`` and ``g_sup`` are the declared sup norms.
    """

    f: Callable
    g: Callable
    t: float
    x: np.ndarray
    force: ForceField
    spec: GaussianKernelSpec
    dom: DomainSpec
    f_sup: float = np.inf
    g_sup: float = np.inf

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("t must be > 0")


class FKEstimate(NamedTuple):
    value: float
    std_error: float
    n_paths: int
    dt: float


def fk_contributions(problem: FKProblem, res: BatchResult) -> np.ndarray:
    """Per-path values ``1{tau > t} f(X_t) + 1{tau <= t} g(X_tau)``."""
    out = np.empty(res.n_paths)
    ex = res.exited
    if np.any(ex):
        out[ex] = problem.g(res.exit_state[ex])
    if np.any(~ex):
        out[~ex] = problem.f(res.final_state[~ex])
    return out


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(np.mean(v)), se


def estimate_u(problem: FKProblem, n_paths: int, cfg: SimConfig, seed: Optional[int] = None) -> FKEstimate:
    """Monte Carlo estimate of ``u(t, x)`` with its standard error.

    The horizon of ``cfg`` is replaced by ``problem.t``; ``seed`` overrides
    ``cfg.seed`` when given.
    """
    cfg = replace(cfg, horizon=problem.t, seed=cfg.seed if seed is None else seed)
    res = simulate_absorbed_batch(problem.force, problem.spec, problem.dom, problem.x, n_paths, cfg)
    v, se = _mean_se(fk_contributions(problem, res))
    return FKEstimate(v, se, int(n_paths), cfg.dt)


# --- adjoint process ---------------------------------------------------------------

def _flip(x, d):
    x = np.array(x, dtype=float, copy=True)
    x[..., d:] *= -1.0
    return x


def simulate_adjoint_batch(force: ForceField, spec: GaussianKernelSpec, dom: DomainSpec, x0,
                           n_paths: int, cfg: SimConfig) -> BatchResult:
    """Batch of adjoint paths started at ``x0``.

    The adjoint process is obtained from the diamond process (same force,
    friction ``-gamma``, same noise) started at ``(q, -p)`` by flipping the
    momentum of every output state. Its exits lie on the incoming boundary.
    """
    d = spec.dim
    dia = replace(spec, gamma=-spec.gamma)
    res = simulate_absorbed_batch(force, dia, dom, _flip(as_phase(x0, d), d), n_paths, cfg)
    es = _flip(res.exit_state, d)
    fs = _flip(res.final_state, d)
    codes, pn = classify_many(dom, es, tol=0.0, band=np.inf)
    codes = np.where(res.exited, codes, int(BoundaryClass.INTERIOR))
    lw = res.log_weight
    return BatchResult(res.tau, es, fs, codes, pn, res.band, lw, res.n_refined)


def simulate_adjoint_absorbed(force: ForceField, spec: GaussianKernelSpec, dom: DomainSpec, x,
                              cfg: SimConfig, rng: Optional[np.random.Generator] = None,
                              record_every: int = 1) -> AbsorbedPathRecord:
    """One adjoint path with recorded (momentum-flipped) states."""
    d = spec.dim
    if rng is not None:
        cfg = replace(cfg, seed=int(rng.integers(2**63)))
    dia = replace(spec, gamma=-spec.gamma)
    res, outs = _batch(force, dia, dom, _flip(as_phase(x, d), d), 1, cfg, record_every=record_every)
    outs[0]["rec_x"] = _flip(outs[0]["rec_x"], d)
    es = _flip(res.exit_state, d)
    codes, pn = classify_many(dom, es, tol=0.0, band=np.inf)
    codes = np.where(res.exited, codes, int(BoundaryClass.INTERIOR))
    res = BatchResult(res.tau, es, _flip(res.final_state, d), codes, pn, res.band, res.log_weight,
                      res.n_refined)
    return _record_from(res, outs, 0, cfg.horizon)


# --- kernel density estimation ---------------------------------------------------------

class DensityEstimate(NamedTuple):
    points: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    bandwidth: np.ndarray
    n_samples: int
    n_total: int


def default_bandwidth(spec: GaussianKernelSpec, t: float, n: int) -> np.ndarray:
    """Per-coordinate bandwidths ``(h_q, ..., h_p, ...)``.

    Normal-reference rule in ``2 d`` dimensions,
    ``(4 / (2d + 2))^{1/(2d+4)} n^{-1/(2d+4)}``, times the exact free-kernel
    standard deviations ``sqrt(c_qq(t))`` and ``sqrt(c_pp(t))``.
    """
    d = spec.dim
    m = kern.moments(spec, t)
    k = (4.0 / (2 * d + 2)) ** (1.0 / (2 * d + 4)) * float(n) ** (-1.0 / (2 * d + 4))
    return np.concatenate([np.full(d, k * np.sqrt(m.c_qq)), np.full(d, k * np.sqrt(m.c_pp))])


def kde_contributions(samples, point, bandwidth) -> np.ndarray:
    """Gaussian product-kernel values ``K_h(point - X_i)`` for every sample."""
    samples = np.asarray(samples, dtype=float)
    h = np.asarray(bandwidth, dtype=float)
    u = (samples - np.asarray(point, dtype=float)) / h
    norm = np.prod(h) * (2.0 * np.pi) ** (0.5 * h.size)
    with np.errstate(under="ignore"):
        return np.exp(-0.5 * np.sum(u * u, axis=-1)) / norm


def estimate_density_kde(samples, points, bandwidth, n_total: Optional[int] = None) -> DensityEstimate:
    """Kernel density estimate of the absorbed transition density.

    Parameters
    ----------
    samples : array_like, shape (m, 2 d)
        Endpoints of the surviving paths.
    points : array_like, shape (k, 2 d)
        Evaluation points.
    bandwidth : array_like, shape (2 d,)
    n_total : int, optional
        Total number of simulated paths (survivors and absorbed). The
        estimate is normalized by it, so its mass is the survival
        probability. Defaults to ``m``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("no samples")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (samples.shape[1],))
    if np.any(h <= 0):
        raise ValueError("bandwidth must be > 0")
    m = samples.shape[0]
    n = m if n_total is None else int(n_total)
    vals = np.empty(points.shape[0])
    ses = np.empty(points.shape[0])
    for i, y in enumerate(points):
        c = kde_contributions(samples, y, h)
        s1 = c.sum()
        s2 = np.dot(c, c)
        mean = s1 / n
        vals[i] = mean
        var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
        ses[i] = np.sqrt(var / n)
    return DensityEstimate(points, vals, ses, np.array(h), m, n)


# --- reversibility -----------------------------------------------------------------

class ReversibilityResult(NamedTuple):
    ratio: float
    ci: tuple
    adjoint: DensityEstimate
    forward: DensityEstimate


def _boot_means(nonzero, n_total, n_boot, rng):
    # resample n_total contributions of which only the nonzero ones matter
    m = nonzero.size
    counts = rng.binomial(n_total, m / n_total, size=n_boot)
    out = np.empty(n_boot)
    for b, c in enumerate(counts):
        out[b] = nonzero[rng.integers(0, m, size=c)].sum() / n_total
    return out


def _sub_seeds(seed: int, k: int):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k, dtype=np.uint64) % (2**63)]


def reversibility_ratio(force: ForceField, spec: GaussianKernelSpec, dom: DomainSpec, t: float, x, y,
                        n_paths: int, bandwidth=None, cfg: Optional[SimConfig] = None,
                        seed: Optional[int] = None, confidence: float = 0.95,
                        n_boot: int = 1000) -> ReversibilityResult:
    """Ratio ``p~_t(x, y) / (exp(-d gamma t) p_t(y, x))`` of absorbed densities.

    The numerator is a KDE at ``y`` of adjoint paths started at ``x``; the
    denominator a KDE at ``x`` of forward paths started at ``y``. The two
    estimators use independent seeds derived from ``seed``. The confidence
    interval is a percentile bootstrap over paths.

    Raises
    ------
    RuntimeError
        If either density estimate is within two standard errors of 0.
    """
    cfg = SimConfig(horizon=t) if cfg is None else replace(cfg, horizon=t)
    seed = cfg.seed if seed is None else seed
    s_adj, s_fwd, s_boot = _sub_seeds(seed, 3)
    d = spec.dim
    x = as_phase(x, d)
    y = as_phase(y, d)
    h = default_bandwidth(spec, t, n_paths) if bandwidth is None else np.broadcast_to(bandwidth, (2 * d,))

    adj = simulate_adjoint_batch(force, spec, dom, x, n_paths, replace(cfg, seed=s_adj))
    fwd = simulate_absorbed_batch(force, spec, dom, y, n_paths, replace(cfg, seed=s_fwd))
    sa = adj.final_state[~adj.exited]
    sf = fwd.final_state[~fwd.exited]
    ea = estimate_density_kde(sa, y[None], h, n_paths)
    ef = estimate_density_kde(sf, x[None], h, n_paths)
    for e in (ea, ef):
        if not e.values[0] > 2.0 * e.std_errors[0]:
            raise RuntimeError("density estimate is statistically indistinguishable from 0")
    fac = np.exp(-d * spec.gamma * t)
    ratio = ea.values[0] / (fac * ef.values[0])

    rng = np.random.default_rng(s_boot)
    ca = kde_contributions(sa, y, h)
    cf = kde_contributions(sf, x, h)
    ba = _boot_means(ca[ca > 0], n_paths, n_boot, rng)
    bf = _boot_means(cf[cf > 0], n_paths, n_boot, rng)
    br = ba / (fac * bf)
    lo, hi = np.quantile(br, [(1 - confidence) / 2, (1 + confidence) / 2])
    return ReversibilityResult(float(ratio), (float(lo), float(hi)), ea, ef)


# --- boundary behaviour ----------------------------------------------------------------

class ScanRow(NamedTuple):
    distance: float
    estimate: float
    std_error: float


def boundary_vanishing_scan(force: ForceField, spec: GaussianKernelSpec, dom: DomainSpec, t: float,
                            path_to_boundary: Sequence, n_paths: int, cfg: Optional[SimConfig] = None,
                            slot: str = "x", other=None, bandwidth=None):
    """Estimates along a sequence of points approaching the boundary.

    ``slot="x"``: the points are starting points; the survival probability
    ``P(tau > t)`` is estimated from each (same seed for every point).
    ``slot="y"``: the points are end points; one batch is run from
    ``other`` and the absorbed density is estimated at each point by KDE.

    Returns
    -------
    list of ScanRow
        Ordered as the input sequence; ``distance`` is the distance of the
        position to the boundary.
    """
    cfg = SimConfig(horizon=t) if cfg is None else replace(cfg, horizon=t)
    d = spec.dim
    pts = np.atleast_2d(as_phase(np.asarray(path_to_boundary, dtype=float), d))
    dist = dom.signed_distance(pts[:, :d])
    rows = []
    if slot == "x":
        for x, r in zip(pts, dist):
            res = simulate_absorbed_batch(force, spec, dom, x, n_paths, cfg)
            v, se = _mean_se((~res.exited).astype(float))
            rows.append(ScanRow(float(r), v, se))
    elif slot == "y":
        if other is None:
            raise ValueError("slot 'y' needs the start point in `other`")
        h = default_bandwidth(spec, t, n_paths) if bandwidth is None else bandwidth
        res = simulate_absorbed_batch(force, spec, dom, as_phase(other, d), n_paths, cfg)
        est = estimate_density_kde(res.final_state[~res.exited], pts, h, n_paths)
        rows = [ScanRow(float(r), float(v), float(s)) for r, v, s in zip(dist, est.values, est.std_errors)]
    else:
        raise ValueError("slot must be 'x' or 'y'")
    return rows


def nested_chapman_kolmogorov(force: ForceField, spec: GaussianKernelSpec, dom: DomainSpec, t: float,
                              s: float, x, y, n_outer: int, n_inner: int, cfg: SimConfig,
                              bandwidth=None):
    """Two-stage and one-stage estimates of the absorbed density at ``y``.

    The two-stage estimate runs ``n_outer`` paths to time ``s`` and restarts
    ``n_inner`` paths from each survivor for the remaining ``t - s``.

    Returns
    -------
    two_stage, one_stage : DensityEstimate
    """
    d = spec.dim
    x = as_phase(x, d)
    y = np.atleast_2d(as_phase(y, d))
    h = default_bandwidth(spec, t, n_outer * n_inner) if bandwidth is None else bandwidth
    first = simulate_absorbed_batch(force, spec, dom, x, n_outer, replace(cfg, horizon=s))
    mid = first.final_state[~first.exited]
    starts = np.repeat(mid, n_inner, axis=0)
    second = simulate_absorbed_batch(force, spec, dom, starts, 0, replace(cfg, horizon=t - s, seed=cfg.seed + 1))
    two = estimate_density_kde(second.final_state[~second.exited], y, h, n_outer * n_inner)
    one_res = simulate_absorbed_batch(force, spec, dom, x, n_outer * n_inner,
                                      replace(cfg, horizon=t, seed=cfg.seed + 2))
    one = estimate_density_kde(one_res.final_state[~one_res.exited], y, h, n_outer * n_inner)
    return two, one


# --- output ----------------------------------------------------------------------------

def write_estimates_csv(path, rows, header, config_hash: Optional[str] = None):
    """Write rows of numbers as CSV with full float precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header) + (["config_hash"] if config_hash else []))
        for r in rows:
            vals = [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r]
            w.writerow(vals + ([config_hash] if config_hash else []))
