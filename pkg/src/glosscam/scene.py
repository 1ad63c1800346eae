"""Scene description files (TOML) and their in-memory form.

Schema (version "1")::

    version = "1"

    [object]
    type = "sphere"            # sphere | ellipsoid | capsule | plane | smooth_union
    center = [0, 0, 0]
    radius = 1.0
    rho_s = 0.8                # scalar mirror reflectance
    irradiance = 1.0           # diffuse = albedo * irradiance
    albedo = [0.2, 0.2, 0.2]   # RGB, texture path, or procedural table
    params = ["radius"]        # optional free geometry parameters

    [[environment]]            # one table per primitive
    type = "dome"              # dome | quad | box | ball
    radius = 5.0
    texture = { type = "smooth", seed = 3 }

    [cameras]
    rig = "orbit"              # orbit | poses
    count = 40
    radius = 3.5
    elevation = 20.0
    fov = 50.0                 # or a list cycled over the views

    [render]
    width = 128
    height = 128
    samples = 1

    [field]                    # optional: volume of the environment field
    bmin = [-5.5, -5.5, -5.5]
    bmax = [5.5, 5.5, 5.5]

Relative texture paths resolve against the scene file's directory.
"""

from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .camera import Camera, cycle_fov, orbit_cameras
from .environment import Ball, Box, Dome, GroundTruthEnvironment, Quad, load_texture
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = "1"


def _locate(text: str | None, key: str) -> str:
    """`` (line N)`` suffix for the first assignment of ``key`` in ``text``."""
    if not text:
        return ""
    leaf = key.split(".")[-1].split("[")[0]
    m = re.search(rf"^\s*{re.escape(leaf)}\s*=", text, flags=re.M)
    if m is None:
        m = re.search(rf"^\s*\[+\s*{re.escape(leaf)}\s*\]+", text, flags=re.M)
    return f" (line {text.count(chr(10), 0, m.start()) + 1})" if m else ""


class _Reader:
    """Typed access into a nested dict that raises ConfigError with field paths."""

    def __init__(self, data: dict, path: str, text: str | None):
        self.data = data
        self.path = path
        self.text = text

    def _err(self, key, msg):
        name = f"{self.path}.{key}" if self.path else key
        return ConfigError(msg + _locate(self.text, key), name)

    def has(self, key):
        return key in self.data

    def raw(self, key, default=...):
        if key not in self.data:
            if default is ...:
                raise self._err(key, "missing required field")
            return default
        return self.data[key]

    def number(self, key, default=..., positive=False, nonneg=False):
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self._err(key, f"expected a number, got {v!r}")
        if positive and not v > 0:
            raise self._err(key, "must be > 0")
        if nonneg and v < 0:
            raise self._err(key, "must be >= 0")
        return float(v)

    def integer(self, key, default=..., minimum=None):
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            raise self._err(key, f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise self._err(key, f"must be >= {minimum}")
        return int(v)

    def vec3(self, key, default=...):
        v = self.raw(key, default)
        if not (isinstance(v, (list, tuple)) and len(v) == 3 and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
            raise self._err(key, f"expected 3 numbers, got {v!r}")
        return tuple(float(c) for c in v)

    def string(self, key, default=..., choices=None):
        v = self.raw(key, default)
        if not isinstance(v, str):
            raise self._err(key, f"expected a string, got {v!r}")
        if choices and v not in choices:
            raise self._err(key, f"must be one of {sorted(choices)}")
        return v

    def table(self, key) -> "_Reader":
        v = self.raw(key)
        if not isinstance(v, dict):
            raise self._err(key, "expected a table")
        return _Reader(v, f"{self.path}.{key}" if self.path else key, self.text)

    def texture(self, key, base_dir, default=...):
        spec = self.raw(key, default)
        try:
            tex = load_texture(spec, base_dir)
        except ConfigError as exc:
            raise self._err(key, str(exc)) from exc
        except (OSError, ValueError) as exc:
            raise self._err(key, f"cannot load texture: {exc}") from exc
        if tex.ndim != 3 or tex.shape[2] != 3 or not np.all(np.isfinite(tex)) or tex.min() < 0:
            raise self._err(key, "texture must be finite, non-negative RGB")
        return tex


def sdf_from_spec(r: _Reader) -> geo.Sdf:
    kind = r.string("type", choices={"sphere", "ellipsoid", "capsule", "plane", "smooth_union"})
    if kind == "sphere":
        return geo.Sphere(r.vec3("center", (0.0, 0.0, 0.0)), r.number("radius", 1.0, positive=True))
    if kind == "ellipsoid":
        axes = r.vec3("semi_axes")
        if min(axes) <= 0:
            raise r._err("semi_axes", "must be > 0")
        return geo.Ellipsoid(r.vec3("center", (0.0, 0.0, 0.0)), axes)
    if kind == "capsule":
        return geo.Capsule(r.vec3("a"), r.vec3("b"), r.number("radius", positive=True))
    if kind == "plane":
        n = r.vec3("normal", (0.0, 0.0, 1.0))
        if np.linalg.norm(n) == 0:
            raise r._err("normal", "must be non-zero")
        return geo.Plane(r.vec3("point", (0.0, 0.0, 0.0)), n)
    children = r.raw("children")
    if not isinstance(children, list) or not children:
        raise r._err("children", "expected a non-empty list of tables")
    kids = tuple(sdf_from_spec(_Reader(c, f"{r.path}.children[{i}]", r.text)) for i, c in enumerate(children))
    return geo.SmoothUnion(kids, r.number("k", 0.1, positive=True))


@dataclass
class ObjectConfig:
    sdf: geo.Sdf
    albedo: np.ndarray  # (H, W, 3) texture in spherical UV around ``albedo_center``
    rho_s: float = 1.0
    irradiance: float = 1.0
    albedo_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    params: tuple = ()


@dataclass
class RigConfig:
    kind: str = "orbit"
    count: int = 40
    radius: float = 3.5
    elevation: float = 20.0
    center: tuple = (0.0, 0.0, 0.0)
    phase: float = 0.0
    fov: float | tuple = 50.0  # a sequence is cycled over the views
    poses: list = field(default_factory=list)


@dataclass
class SceneConfig:
    object: ObjectConfig
    environment: GroundTruthEnvironment
    rig: RigConfig = field(default_factory=RigConfig)
    width: int = 128
    height: int = 128
    samples: int = 1
    field_bmin: np.ndarray | None = None
    field_bmax: np.ndarray | None = None
    version: str = SCHEMA_VERSION
    base_dir: Path = field(default_factory=Path.cwd)
    source: dict = field(default_factory=dict)
    geometry: geo.GeometryConfig = geo.DEFAULT_GEOMETRY
    hash: str = ""

    @property
    def sdf(self) -> geo.Sdf:
        return self.object.sdf

    def cameras(self, count: int | None = None) -> list[Camera]:
        r = self.rig
        if r.kind == "poses":
            cams = [Camera.from_dict({"width": self.width, "height": self.height, "fov_deg": cycle_fov(r.fov, i), **p})
                    for i, p in enumerate(r.poses)]
            return cams if count is None else cams[:count]
        n = r.count if count is None else count
        return orbit_cameras(n, r.radius, r.elevation, self.width, self.height, r.fov, r.center, r.phase)

    def field_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.field_bmin is not None:
            return self.field_bmin, self.field_bmax
        dome = max(self.environment.domes, key=lambda d: d.radius)
        h = 1.05 * dome.radius
        return dome.center - h, dome.center + h


def _environment(items, base_dir, text) -> GroundTruthEnvironment:
    if not isinstance(items, list) or not items:
        raise ConfigError("expected at least one [[environment]] table" + _locate(text, "environment"), "environment")
    prims = []
    for i, item in enumerate(items):
        r = _Reader(item, f"environment[{i}]", text)
        kind = r.string("type", choices={"dome", "quad", "box", "ball"})
        tex = r.texture("texture", base_dir)
        if kind == "dome":
            prims.append(Dome(r.number("radius", positive=True), tex, r.vec3("center", (0.0, 0.0, 0.0))))
        elif kind == "quad":
            prims.append(Quad(r.vec3("center"), r.vec3("half_u"), r.vec3("half_v"), tex))
        elif kind == "box":
            prims.append(Box(r.vec3("center"), r.vec3("half_size"), tex))
        else:
            prims.append(Ball(r.vec3("center"), r.number("radius", positive=True), tex))
    return GroundTruthEnvironment(prims)


def scene_from_dict(data: dict, base_dir=".", text: str | None = None) -> SceneConfig:
    base_dir = Path(base_dir)
    root = _Reader(data, "", text)
    version = str(root.raw("version", SCHEMA_VERSION))
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported scene version {version!r}" + _locate(text, "version"), "version")

    o = root.table("object")
    sdf = sdf_from_spec(o)
    albedo = o.texture("albedo", base_dir, [0.5, 0.5, 0.5])
    if albedo.max() > 1.0:
        raise o._err("albedo", "albedo values must lie in [0, 1]")
    params = tuple(o.raw("params", []))
    if params:
        try:
            sdf = geo.Parametric(sdf, params, geo.parameter_values(sdf, params))
        except (ValueError, AttributeError, IndexError, TypeError) as exc:
            raise o._err("params", str(exc)) from exc
        if len(params) > 8:
            raise o._err("params", "at most 8 free geometry parameters")
    lo, hi = sdf.bounds()
    finite = np.isfinite(lo) & np.isfinite(hi)
    center = np.where(finite, 0.5 * (np.where(finite, lo, 0.0) + np.where(finite, hi, 0.0)), 0.0)
    obj = ObjectConfig(
        sdf=sdf,
        albedo=albedo,
        rho_s=o.number("rho_s", 1.0, nonneg=True),
        irradiance=o.number("irradiance", 1.0, nonneg=True),
        albedo_center=np.asarray(o.vec3("albedo_center", tuple(center))),
        params=params,
    )

    env = _environment(root.raw("environment"), base_dir, text)
    radius = np.max(hi - lo) * 0.5 * np.sqrt(3) if np.all(np.isfinite(hi - lo)) else 0.0
    if np.all(np.isfinite(hi - lo)):
        env.check_closed(center, radius)
    elif not env.domes:
        raise ConfigError("environment is not closed: no dome", "environment")

    c = root.table("cameras") if root.has("cameras") else _Reader({}, "cameras", text)
    kind = c.string("rig", "orbit", choices={"orbit", "poses"})
    if isinstance(c.raw("fov", None), list):
        fovs = c.raw("fov")
        if not fovs or not all(isinstance(f, (int, float)) and not isinstance(f, bool) and 0 < f < 180 for f in fovs):
            raise c._err("fov", "expected a number or a non-empty list of angles in (0, 180)")
        fov = tuple(float(f) for f in fovs)
    else:
        fov = c.number("fov", 50.0, positive=True)
    rig = RigConfig(kind=kind, fov=fov)
    if kind == "orbit":
        rig.count = c.integer("count", 40, minimum=1)
        rig.radius = c.number("radius", 3.5, positive=True)
        rig.elevation = c.number("elevation", 20.0)
        rig.center = c.vec3("center", (0.0, 0.0, 0.0))
        rig.phase = c.number("phase", 0.0)
    else:
        poses = c.raw("poses")
        if not isinstance(poses, list) or not poses:
            raise c._err("poses", "camera count must be >= 1")
        rig.poses = poses
        rig.count = len(poses)

    rd = root.table("render") if root.has("render") else _Reader({}, "render", text)
    width = rd.integer("width", 128, minimum=1)
    height = rd.integer("height", 128, minimum=1)
    samples = rd.integer("samples", 1, minimum=1)

    bmin = bmax = None
    if root.has("field"):
        f = root.table("field")
        bmin, bmax = np.asarray(f.vec3("bmin")), np.asarray(f.vec3("bmax"))
        if np.any(bmax <= bmin):
            raise f._err("bmax", "must exceed bmin on every axis")

    scene = SceneConfig(obj, env, rig, width, height, samples, bmin, bmax, version, base_dir, data)
    scene.hash = scene_hash(data, base_dir)
    try:
        scene.cameras()
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid camera: {exc}" + _locate(text, "cameras"), "cameras") from exc
    return scene


def load_scene(path) -> SceneConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scene file not found: {path}", "scene")
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}", "scene") from exc
    return scene_from_dict(data, path.parent, text)


def _texture_files(obj, base_dir: Path):
    if isinstance(obj, dict):
        for k, v in sorted(obj.items()):
            if k in ("texture", "albedo") and isinstance(v, str):
                yield base_dir / v
            else:
                yield from _texture_files(v, base_dir)
    elif isinstance(obj, list):
        for v in obj:
            yield from _texture_files(v, base_dir)


def scene_hash(data: dict, base_dir=".") -> str:
    """SHA-256 over the canonical JSON of the scene plus referenced texture bytes."""
    h = hashlib.sha256(json.dumps(data, sort_keys=True, separators=(",", ":")).encode())
    for p in _texture_files(data, Path(base_dir)):
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()
