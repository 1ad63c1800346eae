"""Signed distance functions with exact differential geometry.

All SDF methods are vectorised: points are ``(..., 3)`` arrays and scalar
fields come back with shape ``(...)``.  Normals are outward and the mean
curvature is ``K = div(n) / 2`` so that a sphere of radius ``R`` has
``K = 1/R`` on its surface.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGradient, NearPlanar

_AXES = np.eye(3)


@dataclass(frozen=True)
class GeometryConfig:
    scale: float = 1.0
    max_steps: int = 256
    step_scale: float = 1.0
    hit_eps_rel: float = 1e-5
    normal_fd_rel: float = 1e-5
    curvature_fd_rel: float = 1e-4
    k_min_rel: float = 1e-6
    # "inverse_mean_curvature" (R = 1/|K|) or "paper_two_over_k" (R = 2/|K|)
    osculating_radius_convention: str = "inverse_mean_curvature"

    @property
    def eps_hit(self) -> float:
        return self.hit_eps_rel * self.scale

    @property
    def k_min(self) -> float:
        return self.k_min_rel / self.scale


DEFAULT_GEOMETRY = GeometryConfig()


def _as_points(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / _norm(v)[..., None]


# ---------------------------------------------------------------------------
# SDF variants
# ---------------------------------------------------------------------------


class Sdf:
    """Base class. Subclasses implement ``__call__`` and ``bounds``.

    ``gradient`` and ``mean_curvature`` default to central finite differences;
    primitives override both with closed forms.
    """

    exact = False

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def gradient(self, x: np.ndarray, cfg: GeometryConfig = DEFAULT_GEOMETRY) -> np.ndarray:
        x = _as_points(x)
        h = cfg.normal_fd_rel * cfg.scale
        cols = [(self(x + h * e) - self(x - h * e)) / (2 * h) for e in _AXES]
        return np.stack(cols, axis=-1)

    def mean_curvature(self, x: np.ndarray, cfg: GeometryConfig = DEFAULT_GEOMETRY) -> np.ndarray:
        return fd_mean_curvature(self, x, cfg)


def fd_mean_curvature(sdf: Sdf, x: np.ndarray, cfg: GeometryConfig = DEFAULT_GEOMETRY) -> np.ndarray:
    """Half the 6-point central-difference divergence of the unit normal field."""
    x = _as_points(x)
    h = cfg.curvature_fd_rel * cfg.scale
    div = np.zeros(x.shape[:-1])
    for i, e in enumerate(_AXES):
        n_plus = normalize(sdf.gradient(x + h * e, cfg))
        n_minus = normalize(sdf.gradient(x - h * e, cfg))
        div = div + (n_plus[..., i] - n_minus[..., i]) / (2 * h)
    return 0.5 * div


@dataclass(frozen=True)
class Sphere(Sdf):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    exact = True

    def __call__(self, x):
        return _norm(_as_points(x) - np.asarray(self.center)) - self.radius

    def gradient(self, x, cfg=DEFAULT_GEOMETRY):
        r = _as_points(x) - np.asarray(self.center)
        rho = _norm(r)[..., None]
        return np.divide(r, rho, out=np.zeros_like(r), where=rho > 0)

    def mean_curvature(self, x, cfg=DEFAULT_GEOMETRY):
        return 1.0 / _norm(_as_points(x) - np.asarray(self.center))

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Plane(Sdf):
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    exact = True

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", tuple(n / np.linalg.norm(n)))

    def __call__(self, x):
        return (_as_points(x) - np.asarray(self.point)) @ np.asarray(self.normal)

    def gradient(self, x, cfg=DEFAULT_GEOMETRY):
        x = _as_points(x)
        return np.broadcast_to(np.asarray(self.normal), x.shape).copy()

    def mean_curvature(self, x, cfg=DEFAULT_GEOMETRY):
        return np.zeros(_as_points(x).shape[:-1])

    def bounds(self):
        return np.full(3, -np.inf), np.full(3, np.inf)


@dataclass(frozen=True)
class Capsule(Sdf):
    a: tuple = (0.0, 0.0, -0.5)
    b: tuple = (0.0, 0.0, 0.5)
    radius: float = 0.5
    exact = True

    def _closest(self, x):
        a = np.asarray(self.a, dtype=float)
        ba = np.asarray(self.b, dtype=float) - a
        h = np.clip(((x - a) @ ba) / (ba @ ba), 0.0, 1.0)
        return a + h[..., None] * ba, h

    def __call__(self, x):
        x = _as_points(x)
        q, _ = self._closest(x)
        return _norm(x - q) - self.radius

    def gradient(self, x, cfg=DEFAULT_GEOMETRY):
        x = _as_points(x)
        q, _ = self._closest(x)
        r = x - q
        rho = _norm(r)[..., None]
        return np.divide(r, rho, out=np.zeros_like(r), where=rho > 0)

    def mean_curvature(self, x, cfg=DEFAULT_GEOMETRY):
        x = _as_points(x)
        q, h = self._closest(x)
        rho = _norm(x - q)
        on_cap = (h <= 0.0) | (h >= 1.0)
        # barrel level sets are cylinders: principal curvatures (1/rho, 0)
        return np.where(on_cap, 1.0 / rho, 0.5 / rho)

    def bounds(self):
        a, b = np.asarray(self.a, float), np.asarray(self.b, float)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius


@dataclass(frozen=True)
class Ellipsoid(Sdf):
    """Exact Euclidean distance to an axis-aligned ellipsoid.

    The closest surface point solves ``sum((a_i y_i / (a_i^2 + lam))^2) = 1``
    for the Lagrange multiplier ``lam``; Newton from the left of the root
    converges monotonically because the secular function is convex and
    decreasing.
    """

    center: tuple = (0.0, 0.0, 0.0)
    semi_axes: tuple = (1.0, 1.0, 1.0)
    exact = True

    def closest_point(self, x):
        y = _as_points(x) - np.asarray(self.center)
        shape = y.shape
        y = y.reshape(-1, 3)
        a = np.asarray(self.semi_axes, dtype=float)
        a2 = a * a
        z = np.abs(y)
        m = int(np.argmin(a))
        scale = float(a.max())
        tiny = 1e-14 * scale

        # Degenerate interior case: closest point is off the Lagrange branch.
        others = [i for i in range(3) if i != m]
        f_pole = -np.ones(len(z))
        blocked = np.zeros(len(z), dtype=bool)
        for i in others:
            gap = a2[i] - a2[m]
            if gap <= 1e-12 * a2[m]:
                blocked |= z[:, i] > tiny
            else:
                f_pole += (a[i] * z[:, i] / gap) ** 2
        degenerate = (z[:, m] <= tiny) & (f_pole < 0) & ~blocked

        lam0 = np.max(np.where(z > 0, a * z - a2, -np.inf), axis=1)
        lam0 = np.where(np.isfinite(lam0), lam0, -a2[m])
        lam = np.maximum(lam0, -a2[m] * (1 - 1e-12))
        for _ in range(100):
            den = a2 + lam[:, None]
            q = a * z / den
            F = np.sum(q * q, axis=1) - 1.0
            dF = -2.0 * np.sum(q * q / den, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(dF < 0, F / dF, 0.0)
            lam = lam - np.where(degenerate, 0.0, step)
            if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(lam))):
                break
        p = a2 * z / (a2 + lam[:, None])

        if np.any(degenerate):
            pd = np.zeros((int(degenerate.sum()), 3))
            zd = z[degenerate]
            acc = np.ones(len(zd))
            for i in others:
                pd[:, i] = a2[i] * zd[:, i] / (a2[i] - a2[m])
                acc -= (pd[:, i] / a[i]) ** 2
            pd[:, m] = a[m] * np.sqrt(np.maximum(acc, 0.0))
            p[degenerate] = pd

        p = np.where(y < 0, -p, p)
        return (p + np.asarray(self.center)).reshape(shape)

    def _inside(self, x):
        y = _as_points(x) - np.asarray(self.center)
        return np.sum((y / np.asarray(self.semi_axes)) ** 2, axis=-1) < 1.0

    def __call__(self, x):
        x = _as_points(x)
        d = _norm(x - self.closest_point(x))
        return np.where(self._inside(x), -d, d)

    def _surface_normal(self, p):
        a2 = np.asarray(self.semi_axes, dtype=float) ** 2
        return normalize((p - np.asarray(self.center)) / a2)

    def gradient(self, x, cfg=DEFAULT_GEOMETRY):
        return self._surface_normal(self.closest_point(x))

    def principal_curvatures(self, p):
        """Principal curvatures (outward-normal convention) at surface points ``p``."""
        a = np.asarray(self.semi_axes, dtype=float)
        a2 = a * a
        y = _as_points(p) - np.asarray(self.center)
        g = 2.0 * y / a2
        gn = _norm(g)
        n = g / gn[..., None]
        hdiag = 2.0 / a2
        tr = np.sum(hdiag) - np.sum(hdiag * n * n, axis=-1)
        s = tr / gn
        gauss = 1.0 / (np.prod(a2) * np.sum(y * y / (a2 * a2), axis=-1) ** 2)
        disc = np.sqrt(np.maximum(s * s - 4.0 * gauss, 0.0))
        return 0.5 * (s + disc), 0.5 * (s - disc)

    def mean_curvature(self, x, cfg=DEFAULT_GEOMETRY):
        x = _as_points(x)
        p = self.closest_point(x)
        d = _norm(x - p)
        delta = np.where(self._inside(x), -d, d)
        k1, k2 = self.principal_curvatures(p)
        return 0.5 * (k1 / (1.0 + delta * k1) + k2 / (1.0 + delta * k2))

    def bounds(self):
        c = np.asarray(self.center, float)
        a = np.asarray(self.semi_axes, float)
        return c - a, c + a


def smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    """Polynomial smooth minimum; never exceeds ``min(a, b)``."""
    if k <= 0:
        return np.minimum(a, b)
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


@dataclass(frozen=True)
class SmoothUnion(Sdf):
    children: tuple = ()
    k: float = 0.1

    def __call__(self, x):
        x = _as_points(x)
        d = self.children[0](x)
        for child in self.children[1:]:
            d = smooth_min(d, child(x), self.k)
        return d

    def bounds(self):
        lo, hi = zip(*(c.bounds() for c in self.children))
        return np.min(lo, axis=0) - self.k, np.max(hi, axis=0) + self.k


_PARAM_RE = re.compile(r"^(\w+)(?:\[(\d+)\])?$")


@dataclass(frozen=True)
class Parametric(Sdf):
    """A primitive whose listed fields are driven by the free vector ``theta``.

    ``params`` entries are field names, optionally indexed: ``"radius"``,
    ``"center[2]"``, ``"semi_axes[0]"``.
    """

    base: Sdf = field(default_factory=Sphere)
    params: tuple = ()
    theta: tuple = ()

    def __post_init__(self):
        if len(self.params) != len(self.theta):
            raise ValueError("params and theta must have equal length")
        object.__setattr__(self, "_resolved", _apply_params(self.base, self.params, self.theta))

    @property
    def resolved(self) -> Sdf:
        return self._resolved  # type: ignore[attr-defined]

    def with_theta(self, theta) -> "Parametric":
        return dataclasses.replace(self, theta=tuple(float(t) for t in theta))

    @property
    def exact(self):  # type: ignore[override]
        return self.resolved.exact

    def __call__(self, x):
        return self.resolved(x)

    def gradient(self, x, cfg=DEFAULT_GEOMETRY):
        return self.resolved.gradient(x, cfg)

    def mean_curvature(self, x, cfg=DEFAULT_GEOMETRY):
        return self.resolved.mean_curvature(x, cfg)

    def bounds(self):
        return self.resolved.bounds()


def _apply_params(base: Sdf, names, values) -> Sdf:
    updates: dict = {}
    for name, value in zip(names, values):
        m = _PARAM_RE.match(name)
        if not m or not hasattr(base, m.group(1)):
            raise ValueError(f"unknown parameter {name!r} for {type(base).__name__}")
        key, idx = m.group(1), m.group(2)
        if idx is None:
            updates[key] = float(value)
        else:
            cur = list(updates.get(key, getattr(base, key)))
            cur[int(idx)] = float(value)
            updates[key] = tuple(cur)
    return dataclasses.replace(base, **updates)


def parameter_values(base: Sdf, names) -> tuple:
    out = []
    for name in names:
        m = _PARAM_RE.match(name)
        if not m:
            raise ValueError(name)
        v = getattr(base, m.group(1))
        out.append(float(v if m.group(2) is None else v[int(m.group(2))]))
    return tuple(out)


# ---------------------------------------------------------------------------
# Rays, samples, osculating spheres
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_max: float = 1e3

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))
        if self.t_near < 0 or self.t_max <= self.t_near:
            raise ValueError("need 0 <= t_near < t_max")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class SurfaceSample:
    t: float
    point: np.ndarray
    normal: np.ndarray
    curvature: float
    valid: bool
    iterations: int


@dataclass(frozen=True)
class OsculatingSphere:
    center: np.ndarray
    radius: float
    sign: int  # +1 convex, -1 concave


@dataclass
class HitBatch:
    t: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray
    valid: np.ndarray
    iterations: np.ndarray


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def sdf_eval(sdf: Sdf, x) -> np.ndarray | float:
    out = sdf(_as_points(x))
    return float(out) if np.ndim(out) == 0 else out


def sdf_normal(sdf: Sdf, x, cfg: GeometryConfig = DEFAULT_GEOMETRY) -> np.ndarray:
    g = sdf.gradient(_as_points(x), cfg)
    gn = _norm(g)
    if np.any(gn <= 1e-9):
        raise DegenerateGradient(f"|grad f| = {np.min(gn):.3g}")
    return g / gn[..., None]


def sdf_mean_curvature(sdf: Sdf, x, cfg: GeometryConfig = DEFAULT_GEOMETRY):
    x = _as_points(x)
    sdf_normal(sdf, x, cfg)  # raises DegenerateGradient
    k = sdf.mean_curvature(x, cfg)
    return float(k) if np.ndim(k) == 0 else k


def intersect_batch(
    sdf: Sdf,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_near=0.0,
    t_max=1e3,
    cfg: GeometryConfig = DEFAULT_GEOMETRY,
    with_curvature: bool = True,
) -> HitBatch:
    """Sphere-trace many rays at once, then polish each hit with Newton steps."""
    origins = np.atleast_2d(_as_points(origins))
    dirs = np.atleast_2d(_as_points(dirs))
    n = len(dirs)
    origins = np.broadcast_to(origins, dirs.shape)
    t = np.broadcast_to(np.asarray(t_near, float), (n,)).copy()
    t_max = np.broadcast_to(np.asarray(t_max, float), (n,))
    eps = cfg.eps_hit
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    for _ in range(cfg.max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        f = sdf(origins[idx] + t[idx, None] * dirs[idx])
        iters[idx] += 1
        done = np.abs(f) <= eps
        hit[idx[done]] = True
        t[idx] = np.where(done, t[idx], t[idx] + cfg.step_scale * f)
        escaped = t[idx] > t_max[idx]
        active[idx[done | escaped]] = False

    idx = np.nonzero(hit)[0]
    if len(idx):
        o, d, th = origins[idx], dirs[idx], t[idx]
        for _ in range(2):
            x = o + th[:, None] * d
            f = sdf(x)
            slope = np.sum(sdf.gradient(x, cfg) * d, axis=-1)
            ok = np.abs(slope) > 0.1
            t_new = np.where(ok, th - f / np.where(ok, slope, 1.0), th)
            better = np.abs(sdf(o + t_new[:, None] * d)) < np.abs(f)
            th = np.where(better, t_new, th)
        t[idx] = th

    point = origins + t[:, None] * dirs
    normal = np.full((n, 3), np.nan)
    curv = np.full(n, np.nan)
    if len(idx):
        g = sdf.gradient(point[idx], cfg)
        normal[idx] = g / _norm(g)[:, None]
        if with_curvature:
            curv[idx] = sdf.mean_curvature(point[idx], cfg)
    t = np.where(hit, t, np.inf)
    return HitBatch(t=t, point=point, normal=normal, curvature=curv, valid=hit, iterations=iters)


def intersect(sdf: Sdf, ray: Ray, cfg: GeometryConfig = DEFAULT_GEOMETRY) -> SurfaceSample:
    h = intersect_batch(sdf, ray.origin, ray.direction, ray.t_near, ray.t_max, cfg)
    return SurfaceSample(
        t=float(h.t[0]),
        point=h.point[0],
        normal=h.normal[0],
        curvature=float(h.curvature[0]),
        valid=bool(h.valid[0]),
        iterations=int(h.iterations[0]),
    )


def osculating_radius(k: np.ndarray, cfg: GeometryConfig = DEFAULT_GEOMETRY) -> np.ndarray:
    num = 2.0 if cfg.osculating_radius_convention == "paper_two_over_k" else 1.0
    with np.errstate(divide="ignore"):
        return num / np.abs(k)


def osculating_sphere(sample: SurfaceSample, cfg: GeometryConfig = DEFAULT_GEOMETRY) -> OsculatingSphere:
    if not sample.valid:
        raise ValueError("osculating sphere needs a valid surface sample")
    k = sample.curvature
    if not abs(k) > cfg.k_min:
        raise NearPlanar(f"|K| = {abs(k):.3g} <= {cfg.k_min:.3g}")
    radius = float(osculating_radius(k, cfg))
    sign = 1 if k > 0 else -1
    center = np.asarray(sample.point) - sign * radius * np.asarray(sample.normal)
    return OsculatingSphere(center=center, radius=radius, sign=sign)


def ray_sphere_roots(origins, dirs, centers, radii):
    """Both roots of |o + t d - c|^2 = r^2 for unit ``d``; NaN where the ray misses."""
    oc = _as_points(origins) - _as_points(centers)
    d = _as_points(dirs)
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - np.asarray(radii, float) ** 2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        s = np.sqrt(disc)
    # numerically stable pair
    q = -b - np.copysign(s, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = q
        r2 = np.where(q != 0, c / q, -b)
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    miss = disc < 0
    return np.where(miss, np.nan, lo), np.where(miss, np.nan, hi)


def ray_sphere_intersect(ray: Ray, sphere: OsculatingSphere) -> float | None:
    lo, hi = ray_sphere_roots(ray.origin, ray.direction, sphere.center, sphere.radius)
    if np.isnan(lo):
        return None
    for root in (float(lo), float(hi)):
        if root >= 0:
            return root
    return None


def reflect(d, n) -> np.ndarray:
    """Mirror reflection ``d - 2 (d.n) n`` (vectorised over leading axes)."""
    d = _as_points(d)
    n = _as_points(n)
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def bounding_sphere(sdf: Sdf) -> tuple[np.ndarray, float]:
    lo, hi = sdf.bounds()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        return np.zeros(3), math.inf
    return 0.5 * (lo + hi), 0.5 * float(np.linalg.norm(hi - lo))
