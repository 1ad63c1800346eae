"""Emissive textured primitives forming a closed synthetic world.

Every primitive returns the hit distance of a batch of rays plus the emitted
linear RGB at the hit. Textures are float images sampled bilinearly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


def bilinear(tex: np.ndarray, u: np.ndarray, v: np.ndarray, wrap_u: bool = False) -> np.ndarray:
    """Sample ``tex`` (H, W, C) at normalised coords; ``u`` along width, ``v`` along height.

    Texel centres sit at ``(i + 0.5) / W``. Out-of-range coords clamp, or wrap in ``u``.
    """
    H, W = tex.shape[:2]
    x = np.asarray(u, float) * W - 0.5
    y = np.clip(np.asarray(v, float) * H - 0.5, 0.0, H - 1.0)
    if wrap_u:
        x0 = np.floor(x)
        fx = x - x0
        xa = x0.astype(np.int64) % W
        xb = (xa + 1) % W
    else:
        x = np.clip(x, 0.0, W - 1.0)
        xa = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
        fx = x - xa
        xb = np.minimum(xa + 1, W - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    fy = y - y0
    y1 = np.minimum(y0 + 1, H - 1)
    fx = fx[..., None]
    fy = fy[..., None]
    top = tex[y0, xa] * (1 - fx) + tex[y0, xb] * fx
    bot = tex[y1, xa] * (1 - fx) + tex[y1, xb] * fx
    return top * (1 - fy) + bot * fy


def procedural_texture(spec: dict, width: int = 256, height: int = 128) -> np.ndarray:
    """Rasterise a procedural texture description into an ``(H, W, 3)`` float image.

    Supported ``type`` values: ``constant``, ``checker``, ``gradient``, ``smooth``
    (sum of a few random low-frequency sinusoids, deterministic per ``seed``).
    """
    kind = spec.get("type", "constant")
    width = int(spec.get("width", width))
    height = int(spec.get("height", height))
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    U, V = np.meshgrid(u, v)
    if kind == "constant":
        return np.broadcast_to(np.asarray(spec.get("color", (0.5, 0.5, 0.5)), float), (height, width, 3)).copy()
    if kind == "checker":
        n = spec.get("n", 8)
        nu, nv = (n, n) if np.isscalar(n) else n
        a = np.asarray(spec.get("color_a", (0.9, 0.9, 0.9)), float)
        b = np.asarray(spec.get("color_b", (0.1, 0.1, 0.1)), float)
        mask = ((np.floor(U * nu) + np.floor(V * nv)) % 2).astype(bool)
        return np.where(mask[..., None], b, a)
    if kind == "gradient":
        a = np.asarray(spec.get("color_a", (0.1, 0.2, 0.8)), float)
        b = np.asarray(spec.get("color_b", (0.9, 0.8, 0.3)), float)
        t = V if spec.get("axis", "v") == "v" else U
        return a + t[..., None] * (b - a)
    if kind == "smooth":
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        terms = int(spec.get("terms", 6))
        fmax = int(spec.get("max_freq", 3))
        base = np.asarray(spec.get("base", (0.5, 0.5, 0.5)), float)
        amp = float(spec.get("amplitude", 0.35))
        out = np.broadcast_to(base, (height, width, 3)).copy()
        for _ in range(terms):
            ku = rng.integers(0, fmax + 1)
            kv = rng.integers(1 if ku == 0 else 0, fmax + 1)
            phase = rng.uniform(0, 2 * np.pi)
            col = rng.uniform(-1, 1, 3)
            # integer u-frequency keeps the texture periodic in longitude; the
            # sin(pi v) envelope removes the pinch at the equirect poles
            wave = np.sin(2 * np.pi * (ku * U + 0.5 * kv * V) + phase)
            if ku > 0:
                wave = wave * np.sin(np.pi * V)
            out += (amp / terms) * col * wave[..., None]
        return np.clip(out, 0.0, 1.0)
    raise ConfigError(f"unknown procedural texture type {kind!r}", "texture.type")


def load_texture(spec, base_dir: Path | None = None) -> np.ndarray:
    """Texture from a procedural dict, an RGB triple, an array, or an image / PFM path."""
    if isinstance(spec, np.ndarray):
        return np.asarray(spec, float)
    if isinstance(spec, dict):
        return procedural_texture(spec)
    if isinstance(spec, (list, tuple)) and len(spec) == 3 and all(np.isscalar(c) for c in spec):
        return np.broadcast_to(np.asarray(spec, float), (1, 1, 3)).copy()
    from .imageio import read_image

    path = Path(spec)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    if not path.is_file():
        raise ConfigError(f"texture file not found: {path}", "texture")
    return read_image(path)


def _dir_to_equirect(d: np.ndarray):
    """Longitude around +z maps to ``u``; ``v = 0`` at the north pole (+z)."""
    u = (np.arctan2(d[..., 1], d[..., 0]) / (2 * np.pi)) % 1.0
    v = np.arccos(np.clip(d[..., 2], -1.0, 1.0)) / np.pi
    return u, v


class Primitive:
    texture: np.ndarray

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def emission(self, p: np.ndarray, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Dome(Primitive):
    """Inward-facing sphere with an equirectangular texture."""

    radius: float
    texture: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, float)

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        t = -b + np.sqrt(np.maximum(disc, 0.0))
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def emission(self, p, d):
        u, v = _dir_to_equirect((p - self.center) / self.radius)
        return bilinear(self.texture, u, v, wrap_u=True)


@dataclass
class Ball(Primitive):
    """Outward-facing textured sphere (equirect around its centre)."""

    center: np.ndarray
    radius: float
    texture: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, float)

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def emission(self, p, d):
        u, v = _dir_to_equirect((p - self.center) / self.radius)
        return bilinear(self.texture, u, v, wrap_u=True)


@dataclass
class Quad(Primitive):
    """Two-sided parallelogram ``center + a*U + b*V`` for ``a, b in [-1, 1]``."""

    center: np.ndarray
    half_u: np.ndarray
    half_v: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.half_u = np.asarray(self.half_u, float)
        self.half_v = np.asarray(self.half_v, float)
        n = np.cross(self.half_u, self.half_v)
        if np.linalg.norm(n) == 0:
            raise ConfigError("degenerate quad", "environment.quad")
        self.normal = n / np.linalg.norm(n)

    def local(self, p):
        rel = p - self.center
        G = np.array([[self.half_u @ self.half_u, self.half_u @ self.half_v],
                      [self.half_u @ self.half_v, self.half_v @ self.half_v]])
        rhs = np.stack([rel @ self.half_u, rel @ self.half_v], axis=-1)
        ab = rhs @ np.linalg.inv(G).T
        return ab[..., 0], ab[..., 1]

    def intersect(self, o, d):
        den = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ self.normal) / den
        t = np.where(np.abs(den) > 1e-12, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        a, b = self.local(p)
        inside = (np.abs(a) <= 1) & (np.abs(b) <= 1) & (t > 1e-9)
        return np.where(inside, t, np.inf)

    def emission(self, p, d):
        a, b = self.local(p)
        return bilinear(self.texture, 0.5 * (a + 1), 0.5 * (1 - b))


@dataclass
class Box(Primitive):
    """Axis-aligned box; each face shows the full texture."""

    center: np.ndarray
    half_size: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.half_size = np.asarray(self.half_size, float)

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.center - self.half_size - o) * inv
            t2 = (self.center + self.half_size - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tn = np.minimum(t1, t2).max(axis=-1)
        tf = np.maximum(t1, t2).min(axis=-1)
        t = np.where(tn > 1e-9, tn, tf)
        return np.where((tf >= tn) & (t > 1e-9), t, np.inf)

    def emission(self, p, d):
        q = (p - self.center) / self.half_size
        axis = np.argmax(np.abs(q), axis=-1)
        others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        a = np.take_along_axis(q, others[..., :1], axis=-1)[..., 0]
        b = np.take_along_axis(q, others[..., 1:], axis=-1)[..., 0]
        return bilinear(self.texture, 0.5 * (a + 1), 0.5 * (1 - b))


@dataclass
class GroundTruthEnvironment:
    primitives: list = field(default_factory=list)

    @property
    def domes(self) -> list[Dome]:
        return [p for p in self.primitives if isinstance(p, Dome)]

    def check_closed(self, center, radius) -> None:
        """Require a dome that encloses the ball ``(center, radius)``."""
        for dome in self.domes:
            if np.linalg.norm(np.asarray(center, float) - dome.center) + radius < dome.radius:
                return
        raise ConfigError("environment is not closed: no dome encloses the object", "environment")

    def trace(self, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
        """Radiance and hit distance along rays; black and ``inf`` where nothing is hit."""
        o = np.asarray(origins, float)
        d = np.asarray(dirs, float)
        o, d = np.broadcast_arrays(o, d)
        shape = d.shape[:-1]
        o = o.reshape(-1, 3)
        d = d.reshape(-1, 3)
        best = np.full(len(d), np.inf)
        who = np.full(len(d), -1)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(o, d)
            closer = t < best
            best = np.where(closer, t, best)
            who = np.where(closer, i, who)
        rgb = np.zeros((len(d), 3))
        for i, prim in enumerate(self.primitives):
            sel = who == i
            if sel.any():
                p = o[sel] + best[sel, None] * d[sel]
                rgb[sel] = prim.emission(p, d[sel])
        return rgb.reshape(*shape, 3), best.reshape(shape)

    def radiance(self, origins, dirs) -> np.ndarray:
        return self.trace(origins, dirs)[0]
