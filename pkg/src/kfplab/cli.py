"""Command-line experiment driver ``kfp-lab``.

Usage::

    kfp-lab <subcommand> --config FILE [--seed N] [--workers N] [--out DIR]

The configuration is JSON validated against ``data/config.schema.json``.
Every run writes its tabular outputs (CSV, one config-hash column per row)
and a ``manifest.json`` with the config hash, seed, library versions and
wall time. Exit status: 0 on success, 2 on an invalid configuration, 3 when
a check of ``verify-all`` (or of ``kernel-checks`` / ``harnack``) fails.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, replace
from importlib import resources
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import bound as bnd
from . import fk
from . import grid as grd
from . import harnack as hk
from . import kernel as kern
from . import sde
from .geometry import BoundaryClass, domain_from_dict

__all__ = ["main", "load_config", "ConfigError", "config_hash", "run", "SUBCOMMANDS"]

SUBCOMMANDS = ("kernel-checks", "bound", "simulate", "fk", "reversibility", "harnack", "grid", "verify-all")

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 2, 3


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# --- configuration ---------------------------------------------------------------

def _schema() -> dict:
    with resources.files("kfplab").joinpath("data/config.schema.json").open() as fh:
        return json.load(fh)


def default_config_path() -> str:
    return str(resources.files("kfplab").joinpath("data/default_config.json"))


def _field(path) -> str:
    parts = [f"[{p}]" if isinstance(p, int) else p for p in path]
    out = ""
    for p in parts:
        out += p if p.startswith("[") or not out else "." + p
    return out or "<root>"


def validate_config(cfg: dict) -> dict:
    """Schema and consistency checks; raises :class:`ConfigError`."""
    import jsonschema

    v = jsonschema.Draft202012Validator(_schema())
    errors = sorted(v.iter_errors(cfg), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        e = errors[0]
        # a oneOf failure hides the precise cause; report the best sub-error
        best = jsonschema.exceptions.best_match(errors)
        e = best if best is not None else e
        raise ConfigError(f"{_field(e.absolute_path)}: {e.message}")
    d = cfg["model"]["d"]
    dom = cfg["domain"]
    if dom["kind"] == "ball" and len(dom["center"]) != d:
        raise ConfigError(f"domain.center: expected {d} coordinates, got {len(dom['center'])}")
    if dom["kind"] == "interval":
        if d != 1:
            raise ConfigError("domain.kind: interval domains need model.d = 1")
        if not dom["a"] < dom["b"]:
            raise ConfigError("domain.b: must be greater than domain.a")
    num = cfg.get("numerics", {})
    for key in ("x", "y"):
        if key in num and len(num[key]) != 2 * d:
            raise ConfigError(f"numerics.{key}: expected {2 * d} coordinates, got {len(num[key])}")
    for i, pt in enumerate(num.get("points", [])):
        if len(pt) != 2 * d:
            raise ConfigError(f"numerics.points[{i}]: expected {2 * d} coordinates, got {len(pt)}")
    if "bandwidth" in num and len(num["bandwidth"]) != 2 * d:
        raise ConfigError(f"numerics.bandwidth: expected {2 * d} entries")
    if num.get("scheme") == "perturbed" and not num.get("epsilon", 0) > 0:
        raise ConfigError("numerics.epsilon: the perturbed scheme needs epsilon > 0")
    if num.get("scheme", "splitting") != "perturbed" and num.get("epsilon", 0) != 0:
        raise ConfigError("numerics.epsilon: only used by the perturbed scheme")
    f = cfg["model"].get("force", {"kind": "zero"})
    if f["kind"] == "tabulated":
        if len(f["grid"]) != len(f["values"]):
            raise ConfigError("model.force.values: length must match model.force.grid")
        if np.any(np.diff(f["grid"]) <= 0):
            raise ConfigError("model.force.grid: must be strictly increasing")
        if d != 1:
            raise ConfigError("model.force.kind: tabulated forces need d = 1")
    return cfg


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    """Short SHA-256 of the canonical config; worker count and output path excluded."""
    core = {k: v for k, v in cfg.items() if k not in ("workers", "output")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- context ----------------------------------------------------------------------

_BENCH_F = lambda q, p: (1.0 - q * q) * np.exp(-p * p / 8.0) + 0.3 * q
_BENCH_G = lambda q, p: 0.3 * q + 0.0 * p


@dataclass
class Context:
    cfg: dict
    out: str
    seed: int
    workers: int
    hash: str

    @property
    def num(self) -> dict:
        return self.cfg.get("numerics", {})

    @property
    def d(self) -> int:
        return self.cfg["model"]["d"]

    def spec(self) -> kern.GaussianKernelSpec:
        m = self.cfg["model"]
        return kern.GaussianKernelSpec(m["d"], m["gamma"], m["sigma"], m.get("alpha", 0.9))

    def force(self) -> sde.ForceField:
        return sde.ForceField.from_dict(self.cfg["model"].get("force", {"kind": "zero"}))

    def domain(self):
        return domain_from_dict(self.cfg["domain"])

    def sim(self, **kw) -> sde.SimConfig:
        n = self.num
        base = dict(scheme=n.get("scheme", "splitting"), dt=n.get("dt", 1e-3), horizon=n.get("t", 1.0),
                    seed=self.seed, workers=self.workers, epsilon=n.get("epsilon", 0.0),
                    block_size=n.get("block_size", 65536))
        base.update(kw)
        return sde.SimConfig(**base)

    def data(self):
        """``(f, g)`` on phase arrays and on grid arrays ``(q, p)``."""
        spec = self.num.get("data", {"kind": "benchmark"})
        kind = spec["kind"]
        d = self.d
        if kind == "benchmark":
            if d != 1:
                raise ConfigError("numerics.data.kind: benchmark data needs d = 1")
            fq, gq = _BENCH_F, _BENCH_G
        elif kind == "survival":
            fq = lambda q, p: np.ones(np.broadcast(q, p).shape)
            gq = lambda q, p: np.zeros(np.broadcast(q, p).shape)
        else:
            c = float(spec.get("value", 1.0))
            fq = gq = lambda q, p: np.full(np.broadcast(q, p).shape, c)
        fx = lambda x: fq(x[..., 0], x[..., d]) if d == 1 else fq(x[..., :d].sum(-1), x[..., d:].sum(-1))
        gx = lambda x: gq(x[..., 0], x[..., d]) if d == 1 else gq(x[..., :d].sum(-1), x[..., d:].sum(-1))
        return fx, gx, fq, gq

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def write_csv(self, name: str, header, rows) -> str:
        path = self.path(name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(header) + ["config_hash"])
            for r in rows:
                w.writerow([_fmt(v) for v in r] + [self.hash])
        return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return v


# --- experiments ------------------------------------------------------------------

def _quadratic_form_mp(gamma, sigma, t, dx, dps=40) -> float:
    """``dx^T C(t)^{-1} dx`` from the closed-form covariance in ``dps``-digit arithmetic."""
    import mpmath as mp

    with mp.workdps(dps):
        g, s2, t = mp.mpf(gamma), mp.mpf(sigma) ** 2, mp.mpf(t)
        if g == 0:
            cqq, cqp, cpp = s2 * t**3 / 3, s2 * t**2 / 2, s2 * t
        else:
            e1 = -mp.expm1(-g * t) / g
            e2 = -mp.expm1(-2 * g * t) / (2 * g)
            cqq = s2 / g**2 * (t - 2 * e1 + e2)
            cqp = s2 / g * (e1 - e2)
            cpp = s2 * e2
        det = cqq * cpp - cqp**2
        d = len(dx) // 2
        tot = mp.mpf(0)
        for i in range(d):
            u, v = mp.mpf(float(dx[i])), mp.mpf(float(dx[d + i]))
            tot += (cpp * u * u - 2 * cqp * u * v + cqq * v * v) / det
        return float(tot)


def _kernel_checks(ctx: Context):
    """Rows ``(check, value, threshold, passed)`` for the Gaussian kernel."""
    tol = ctx.num.get("tolerances", {})
    rng = np.random.default_rng(ctx.seed)
    rows = []
    # quadratic form against the exact inverse in extended precision
    worst = 0.0
    for _ in range(1000):
        s = kern.GaussianKernelSpec(int(rng.integers(1, 4)), rng.uniform(-2, 2), rng.uniform(0.2, 3))
        t = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        dx = rng.normal(size=2 * s.dim)
        a = kern.quadratic_form(s, t, dx)
        b = _quadratic_form_mp(s.gamma, s.sigma, t, dx)
        worst = max(worst, abs(a - b) / abs(b))
    thr = tol.get("kernel_rel", 1e-9)
    rows.append(("quadratic_form_vs_inverse", worst, thr, worst <= thr))
    # shape identities
    rho = np.concatenate([np.linspace(-20, 20, 4001), np.geomspace(1e-8, 1, 200), -np.geomspace(1e-8, 1, 200)])
    sv = kern.eval_shape_functions(rho)
    s2 = kern.eval_shape_functions(2 * rho)
    e1 = np.abs(rho**2 * sv.phi / 12 + sv.phi1**2 - s2.phi1) / s2.phi1
    e2 = np.abs(rho * sv.phi / 6 - sv.phi1 * sv.phi3 + sv.phi1**2) / sv.phi1**2
    e3 = np.abs(sv.phi / 12 + sv.phi3**2 / 4 - sv.phi2 / 3) / (sv.phi2 / 3)
    w = float(max(e1.max(), e2.max(), e3.max()))
    thr = tol.get("shape_abs", 1e-12)
    rows.append(("shape_identities", w, thr, w <= thr))
    # mass of the scaled kernel over the start variable (d = 1)
    s = ctx.spec()
    s1 = replace(s, dim=1)
    t = 0.5
    y = np.array([0.2, -0.3])
    m = kern.moments(s1, t)
    a, e = kern.mean_coeffs(s1, t)
    sq = 12 * math.sqrt(m.c_qq) / math.sqrt(s1.alpha) + 10
    sp = 12 * math.sqrt(m.c_pp) / math.sqrt(s1.alpha) / e + 10
    from scipy.integrate import trapezoid
    qg = np.linspace(-sq, sq, 1201)
    pg = np.linspace(-sp, sp, 1201)
    Q, P = np.meshgrid(qg, pg, indexing="ij")
    val = kern.density_alpha(s1, t, np.stack([Q, P], -1), y)
    mass = trapezoid(trapezoid(val, pg, axis=1), qg)
    err = abs(mass / math.exp(s1.gamma * t) - 1)
    thr = tol.get("mass_rel", 1e-4)
    rows.append(("scaled_kernel_mass", err, thr, err <= thr))
    # gradient bound
    viol = 0
    for _ in range(1000):
        sg = kern.GaussianKernelSpec(1, rng.uniform(-2, 2), rng.uniform(0.2, 3), s.alpha)
        tt = float(rng.uniform(1e-3, 2.0))
        x = rng.normal(size=2)
        yy = rng.normal(size=2)
        lhs = np.abs(kern.grad_p_density(sg, tt, x, yy)).max()
        c = kern.gradient_bound_constant(sg.alpha, 1)
        rhs = c * (1 + math.sqrt(sg.gamma_minus * tt)) / math.sqrt(sg.sigma**2 * tt) * kern.density_alpha(sg, tt, x, yy)
        viol += int(lhs > rhs)
    rows.append(("gradient_bound_violations", viol, 0, viol == 0))
    # exact sampling moments
    n = 100_000
    z = kern.sample_free_step(s1, t, np.zeros((n, 2)), np.random.default_rng(ctx.seed + 1))
    m = kern.moments(s1, t)
    cov = np.cov(z.T)
    nse = tol.get("n_se", 5.0)
    zs = [abs(z[:, 0].mean()) / math.sqrt(m.c_qq / n), abs(z[:, 1].mean()) / math.sqrt(m.c_pp / n),
          abs(cov[0, 0] - m.c_qq) / (m.c_qq * math.sqrt(2 / n)),
          abs(cov[1, 1] - m.c_pp) / (m.c_pp * math.sqrt(2 / n)),
          abs(cov[0, 1] - m.c_qp) / math.sqrt((m.c_qq * m.c_pp + m.c_qp**2) / n)]
    rows.append(("sampling_moments_max_z", max(zs), nse, max(zs) <= nse))
    return rows


def run_kernel_checks(ctx: Context):
    rows = _kernel_checks(ctx)
    ctx.write_csv("kernel_checks.csv", ["check", "value", "threshold", "passed"], rows)
    return all(r[3] for r in rows)


def run_bound(ctx: Context):
    s = ctx.spec()
    num = ctx.num
    b = num.get("bound", {})
    f = ctx.force()
    dom = ctx.domain()
    times = num.get("times", [num.get("t", 0.5)])
    horizon = b.get("horizon", max(times))
    fsup = b.get("f_sup", f.sup_norm(dom))
    spec = bnd.ParametrixBoundSpec(s, fsup, horizon, convention=b.get("convention", "proof"))
    x = np.asarray(num.get("x", [0.0] * (2 * ctx.d)), dtype=float)
    pts = np.asarray(num.get("points", [x.tolist()]), dtype=float)
    rows = []
    for t in times:
        v = bnd.evaluate_bound(spec, t, x, pts)
        free = kern.density(s, t, x, pts)
        for y, val, fr in zip(pts, np.atleast_1d(v.value), np.atleast_1d(free)):
            rows.append([t, *x, *y, val, fr, v.truncation_tail, v.terms_used])
    d = ctx.d
    head = (["t"] + [f"x{i}" for i in range(2 * d)] + [f"y{i}" for i in range(2 * d)]
            + ["bound", "free_density", "tail", "terms"])
    ctx.write_csv("bound.csv", head, rows)
    return True


def run_simulate(ctx: Context):
    num = ctx.num
    s = ctx.spec()
    cfg = ctx.sim()
    dom = ctx.domain()
    x = np.asarray(num.get("x", [0.0] * (2 * ctx.d)), dtype=float)
    n = num.get("n_paths", 1000)
    res = sde.simulate_absorbed_batch(ctx.force(), s, dom, x, n, cfg)
    rows = []
    ex = res.exited
    for c in BoundaryClass:
        if c == BoundaryClass.INTERIOR:
            continue
        rows.append([c.label, int(np.sum(ex & (res.exit_class == int(c))))])
    rows.append(["Survived", int(np.sum(~ex))])
    ctx.write_csv("exit_classes.csv", ["class", "count"], rows)
    k = min(num.get("record_paths", 5), n)
    with open(ctx.path("paths.jsonl"), "w") as fh:
        for i, rec in enumerate(sde.batch_records(res, cfg.horizon)):
            if i >= k:
                break
            rec["config_hash"] = ctx.hash
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return True


def run_fk(ctx: Context):
    num = ctx.num
    s = ctx.spec()
    fx, gx, _, _ = ctx.data()
    pts = np.asarray(num.get("points", [num.get("x", [0.0] * (2 * ctx.d))]), dtype=float)
    n = num.get("n_paths", 10_000)
    rows = []
    for i, x in enumerate(pts):
        prob = fk.FKProblem(fx, gx, num.get("t", 0.5), x, ctx.force(), s, ctx.domain())
        est = fk.estimate_u(prob, n, ctx.sim(), seed=ctx.seed + i)
        rows.append([*x, est.value, est.std_error, est.n_paths, est.dt])
    head = [f"x{i}" for i in range(2 * ctx.d)] + ["estimate", "std_error", "n_paths", "dt"]
    ctx.write_csv("fk.csv", head, rows)
    return True


def run_reversibility(ctx: Context):
    num = ctx.num
    s = ctx.spec()
    t = num.get("t", 0.4)
    x = num.get("x", [0.0] * (2 * ctx.d))
    y = num.get("y", [0.0] * (2 * ctx.d))
    bw = num.get("bandwidth")
    r = fk.reversibility_ratio(ctx.force(), s, ctx.domain(), t, x, y, num.get("n_paths", 10_000),
                               bandwidth=bw, cfg=ctx.sim(), seed=ctx.seed)
    rows = [[t, r.ratio, r.ci[0], r.ci[1], r.adjoint.values[0], r.adjoint.std_errors[0],
             r.forward.values[0], r.forward.std_errors[0]]]
    ctx.write_csv("reversibility.csv", ["t", "ratio", "ci_low", "ci_high", "adjoint", "adjoint_se",
                                        "forward", "forward_se"], rows)
    return True


def _harnack_spec(ctx: Context) -> hk.HarnackChainSpec:
    h = ctx.num.get("harnack", {})
    keys = ("k", "delta", "horizon", "eps", "c_path", "r_base", "delta_base", "c_base")
    kw = {k: h[k] for k in keys if k in h}
    kw.setdefault("k", 0.5)
    kw.setdefault("delta", 0.8)
    return hk.HarnackChainSpec(ctx.domain(), **kw)


def _harnack_rows(ctx: Context):
    h = ctx.num.get("harnack", {})
    spec = _harnack_spec(ctx)
    d = ctx.d
    rng = np.random.default_rng(ctx.seed)
    n_draw = h.get("n_bridge_draws", 10_000)
    bad = 0
    for _ in range(n_draw):
        a = rng.normal(size=2 * d) * rng.choice([0.1, 1, 10])
        b = rng.normal(size=2 * d) * rng.choice([0.1, 1, 10])
        dl = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        bad += int(not hk.hermite_bridge(a, b, dl).bounds_report(spec.c_path, 257)["holds"])
    x = np.asarray(h.get("x", [0.0] * (2 * d)), dtype=float)
    y = np.asarray(h.get("y", [0.0] * (2 * d)), dtype=float)
    chain = hk.build_admissible_chain(spec, x, y)
    pm = hk.check_path_membership(chain)
    bm = hk.verify_chain_membership(chain)
    rows = [("bridge_bound_violations", bad, 0, bad == 0)]
    for k, v in pm.violations.items():
        rows.append((f"path_{k}_violations", v, 0, v == 0))
    for k, v in bm.violations.items():
        rows.append((f"box_{k}_violations", v, 0, v == 0))
    return rows, chain


def run_harnack(ctx: Context):
    rows, chain = _harnack_rows(ctx)
    ctx.write_csv("harnack_checks.csv", ["check", "value", "threshold", "passed"], rows)
    rep = chain.report()
    rep["config_hash"] = ctx.hash
    with open(ctx.path("harnack_chain.json"), "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
    return all(r[3] for r in rows)


def _grid_solve(ctx: Context, interp=None, store_steps=None):
    num = ctx.num
    if ctx.d != 1:
        raise ConfigError("model.d: the grid solver needs d = 1")
    g = num.get("grid", {})
    m = ctx.cfg["model"]
    dom = ctx.domain()
    t = num.get("t", 0.5)
    _, _, fq, gq = ctx.data()
    prob = grd.GridProblem(ctx.force(), m["gamma"], m["sigma"], fq, gq, t)
    pmax = g.get("p_max", grd.default_p_max(m["gamma"], m["sigma"], t))
    mesh = grd.Mesh1D(dom.a, dom.b, pmax, g.get("nq", 200), g.get("np", 200), g.get("dt", 5e-3))
    sol = grd.solve_kfp_1d(prob, mesh, interp=interp or g.get("interp", "linear"), store_steps=store_steps)
    return prob, sol


def run_grid(ctx: Context):
    prob, sol = _grid_solve(ctx)
    grd.save_solution(sol, ctx.path("grid_solution"))
    rep = grd.check_maximum_principle(sol, prob)
    pts = np.asarray(ctx.num.get("points", [[0.0, 0.0]]), dtype=float)
    vals = grd.interpolate(sol, pts[:, 0], pts[:, 1])
    rows = [[q, p, v] for (q, p), v in zip(pts, vals)]
    ctx.write_csv("grid_values.csv", ["q", "p", "u"], rows)
    ctx.write_csv("grid_checks.csv", ["check", "value"],
                  [["upper_margin", rep.upper_margin], ["lower_margin", rep.lower_margin],
                   ["leak", sol.leak]])
    return True


def run_verify_all(ctx: Context):
    """Reduced-size versions of the acceptance checks."""
    tol = ctx.num.get("tolerances", {})
    nse = tol.get("n_se", 5.0)
    rows = list(_kernel_checks(ctx))
    s = ctx.spec()
    f = ctx.force()
    dom = ctx.domain()
    n = ctx.num.get("n_paths", 20_000)
    t = ctx.num.get("t", 0.5)

    # Girsanov: mean weight and survival from a start near the boundary
    cfg = ctx.sim(horizon=1.0)
    x = np.zeros(2 * ctx.d)
    if hasattr(dom, "a"):
        x[0] = dom.a + 0.75 * (dom.b - dom.a)
    else:
        x[: ctx.d] = np.asarray(dom.center) + 0.5 * dom.radius / math.sqrt(ctx.d)
    x[ctx.d:] = 0.5
    gb = sde.girsanov_batch(f, s, dom, x, n, cfg)
    w = np.exp(gb.log_weight)
    zmean = abs(w.mean() - 1) / (w.std(ddof=1) / math.sqrt(n))
    rows.append(("girsanov_mean_weight_z", zmean, nse, zmean <= nse))
    direct = sde.simulate_absorbed_batch(f, s, dom, x, n, ctx.sim(horizon=1.0, seed=ctx.seed + 7))
    a = (~gb.exited) * w
    b = (~direct.exited).astype(float)
    z = abs(a.mean() - b.mean()) / math.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)
    rows.append(("girsanov_survival_z", z, nse, z <= nse))

    # Gronwall coupling
    rng = np.random.default_rng(ctx.seed + 3)
    m = 100
    xs = rng.uniform(-1, 1, size=(m, 2 * ctx.d))
    ys = xs + rng.normal(scale=0.1, size=xs.shape)
    cfgc = ctx.sim(horizon=1.0)
    sup = sde.coupled_sup_distance(f, s, xs, ys, cfgc)
    fac = tol.get("gronwall_factor", 1.05)
    lim = np.linalg.norm(xs - ys, axis=-1) * math.exp(f.drift_lip(s.gamma) * 1.0) * fac
    viol = int(np.sum(sup > lim))
    rows.append(("gronwall_violations", viol, 0, viol == 0))

    # Feynman-Kac against the grid solver and maximum principle
    if ctx.d == 1:
        prob, sol = _grid_solve(ctx)
        rep = grd.check_maximum_principle(sol, prob, tol=tol.get("max_principle", 1e-10))
        rows.append(("max_principle_margin", min(rep.upper_margin, rep.lower_margin),
                     -tol.get("max_principle", 1e-10), rep.holds))
        fx, gx, _, _ = ctx.data()
        pts = np.asarray(ctx.num.get("points", [[0.0, 0.0]]), dtype=float)
        gv = grd.interpolate(sol, pts[:, 0], pts[:, 1])
        worst = -np.inf
        for i, (pt, g) in enumerate(zip(pts, gv)):
            fp = fk.FKProblem(fx, gx, t, pt, f, s, dom)
            est = fk.estimate_u(fp, n, ctx.sim(), seed=ctx.seed + 100 + i)
            worst = max(worst, abs(est.value - g) - (3 * est.std_error + tol.get("cross_abs", 0.03)))
        rows.append(("fk_vs_grid_excess", worst, 0.0, worst <= 0))

    # Harnack construction
    if "harnack" in ctx.num:
        hrows, _ = _harnack_rows(ctx)
        rows.extend(hrows)

    ctx.write_csv("verify_all.csv", ["check", "value", "threshold", "passed"], rows)
    return all(bool(r[3]) for r in rows)


RUNNERS: dict[str, Callable[[Context], bool]] = {
    "kernel-checks": run_kernel_checks,
    "bound": run_bound,
    "simulate": run_simulate,
    "fk": run_fk,
    "reversibility": run_reversibility,
    "harnack": run_harnack,
    "grid": run_grid,
    "verify-all": run_verify_all,
}


# --- entry point ------------------------------------------------------------------

def _versions() -> dict:
    import scipy

    return {"kfplab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _resolve_workers(cli: Optional[int], cfg: dict) -> int:
    if cli is not None:
        return int(cli)
    env = os.environ.get("KFP_LAB_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"KFP_LAB_WORKERS: not an integer: {env!r}") from None
    return int(cfg.get("workers", 1))


def run(subcommand: str, config, seed: Optional[int] = None, workers: Optional[int] = None,
        out: Optional[str] = None) -> int:
    """Execute one experiment and return the exit status.

    ``config`` is a path to a JSON file or an already parsed dict.
    """
    t0 = time.perf_counter()
    try:
        if isinstance(config, dict):
            cfg = validate_config(json.loads(json.dumps(config)))
        else:
            cfg = load_config(config)
        if seed is not None:
            cfg["seed"] = int(seed)
        cfg.setdefault("seed", 0)
        if "experiment" in cfg and cfg["experiment"] != subcommand:
            raise ConfigError(f"experiment: config names {cfg['experiment']!r} but "
                              f"subcommand is {subcommand!r}")
        cfg["experiment"] = subcommand
        w = _resolve_workers(workers, cfg)
        if w < 1:
            raise ConfigError("workers: must be >= 1")
        outdir = out or cfg.get("output", "kfp-lab-out")
        os.makedirs(outdir, exist_ok=True)
        ctx = Context(cfg, outdir, cfg["seed"], w, config_hash(cfg))
        ok = RUNNERS[subcommand](ctx)
    except (ConfigError, ValueError) as exc:
        print(f"kfp-lab: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    manifest = {
        "config_hash": ctx.hash,
        "experiment": subcommand,
        "seed": ctx.seed,
        "workers": ctx.workers,
        "versions": _versions(),
        "wall_time": time.perf_counter() - t0,
        "passed": bool(ok),
    }
    with open(ctx.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if not ok:
        print(f"kfp-lab: {subcommand}: checks failed (see {ctx.out})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kfp-lab", description="Kinetic Fokker-Planck experiments.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", default=None, help="JSON config (default: the shipped config)")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=None, help="worker processes (env KFP_LAB_WORKERS)")
    ap.add_argument("--out", default=None, help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.config is None:
        # the shipped config is reused for every subcommand
        with open(default_config_path()) as fh:
            config = json.load(fh)
        config.pop("experiment", None)
    else:
        config = args.config
    return run(args.subcommand, config, args.seed, args.workers, args.out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
