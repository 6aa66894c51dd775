"""Position domains and the classification of phase-space boundary points."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

__all__ = [
    "Interval",
    "Ball",
    "DomainSpec",
    "BoundaryClass",
    "BoundaryClassification",
    "signed_distance",
    "outward_normal",
    "classify",
    "classify_many",
    "domain_from_dict",
]


class BoundaryClass(enum.IntEnum):
    INTERIOR = 0
    GAMMA_PLUS = 1
    GAMMA_ZERO = 2
    GAMMA_MINUS = 3
    EXTERIOR = 4

    @property
    def label(self) -> str:
        return {0: "Interior", 1: "GammaPlus", 2: "GammaZero", 3: "GammaMinus", 4: "Exterior"}[int(self)]


class BoundaryClassification(NamedTuple):
    cls: BoundaryClass
    normal_dot: float


@dataclass(frozen=True)
class Interval:
    """Open interval ``(a, b)`` in dimension one."""

    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("interval needs a < b")

    dim = 1

    @property
    def sphere_radius(self) -> float:
        # largest ball inside touching each boundary point
        return 0.5 * (self.b - self.a)

    @property
    def scale(self) -> float:
        return 0.5 * (self.b - self.a)

    def signed_distance(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)[..., 0]
        return np.minimum(q - self.a, self.b - q)

    def normal_at(self, q) -> np.ndarray:
        """Outward normal of the boundary point nearest to ``q``."""
        q = np.asarray(q, dtype=float)
        mid = 0.5 * (self.a + self.b)
        return np.where(q >= mid, 1.0, -1.0)

    def project(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        mid = 0.5 * (self.a + self.b)
        return np.where(q >= mid, self.b, self.a)

    def bounding_box(self):
        return np.array([self.a]), np.array([self.b])

    def to_dict(self) -> dict:
        return {"kind": "interval", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class Ball:
    """Open Euclidean ball with given center and radius."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if not self.radius > 0:
            raise ValueError("ball radius must be > 0")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def sphere_radius(self) -> float:
        return float(self.radius)

    @property
    def scale(self) -> float:
        return float(self.radius)

    def signed_distance(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return self.radius - np.linalg.norm(q - np.asarray(self.center), axis=-1)

    def normal_at(self, q) -> np.ndarray:
        v = np.asarray(q, dtype=float) - np.asarray(self.center)
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        e1 = np.zeros(self.dim)
        e1[0] = 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(nrm > 0, v / nrm, e1)

    def project(self, q) -> np.ndarray:
        c = np.asarray(self.center)
        return c + self.radius * self.normal_at(q)

    def bounding_box(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def to_dict(self) -> dict:
        return {"kind": "ball", "center": list(self.center), "radius": self.radius}


DomainSpec = Union[Interval, Ball]


def domain_from_dict(cfg: dict) -> DomainSpec:
    kind = cfg["kind"]
    if kind == "interval":
        return Interval(float(cfg["a"]), float(cfg["b"]))
    if kind == "ball":
        return Ball(tuple(cfg["center"]), float(cfg["radius"]))
    raise ValueError(f"unknown domain kind {kind!r}")


def geom_tol(dom: DomainSpec) -> float:
    return 1e-12 * dom.scale


def signed_distance(dom: DomainSpec, q) -> np.ndarray:
    """Signed distance to the boundary, positive inside.

    ``q`` has shape ``(..., d)``; the result drops the last axis.
    """
    return dom.signed_distance(q)


def outward_normal(dom: DomainSpec, q, tol: float | None = None) -> np.ndarray:
    """Unit outward normal at a boundary point ``q``.

    Raises
    ------
    ValueError
        If ``q`` is farther than ``tol`` (default ``1e-12`` times the domain
        scale) from the boundary.
    """
    tol = geom_tol(dom) if tol is None else tol
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if np.any(np.abs(dom.signed_distance(q)) > tol):
        raise ValueError("point is not on the boundary")
    return dom.normal_at(q)


def classify_many(dom: DomainSpec, x, tol: float = 0.0, band: float | None = None):
    """Vectorized classification of phase points ``x`` (shape ``(..., 2 d)``).

    Returns
    -------
    codes : ndarray of int
        Values of :class:`BoundaryClass`.
    normal_dot : ndarray
        ``p . n(q)`` for the nearest boundary point (NaN away from it).
    """
    d = dom.dim
    x = np.asarray(x, dtype=float)
    q, p = x[..., :d], x[..., d:]
    band = geom_tol(dom) if band is None else band
    sd = dom.signed_distance(q)
    pn = np.sum(p * dom.normal_at(q), axis=-1)
    codes = np.full(sd.shape, int(BoundaryClass.GAMMA_ZERO))
    codes = np.where(pn > tol, int(BoundaryClass.GAMMA_PLUS), codes)
    codes = np.where(pn < -tol, int(BoundaryClass.GAMMA_MINUS), codes)
    codes = np.where(sd > band, int(BoundaryClass.INTERIOR), codes)
    codes = np.where(sd < -band, int(BoundaryClass.EXTERIOR), codes)
    on = np.abs(sd) <= band
    return codes, np.where(on, pn, np.nan)


def classify(dom: DomainSpec, x, tol: float = 0.0, band: float | None = None) -> BoundaryClassification:
    """Classify one phase point into Interior, Exterior or one of the boundary sets."""
    codes, pn = classify_many(dom, np.asarray(x, dtype=float)[None, :], tol, band)
    return BoundaryClassification(BoundaryClass(int(codes[0])), float(pn[0]))
