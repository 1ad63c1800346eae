"""Ground-truth forward renderer and the volumetric (SDF density) object renderer.

Shading model: ``c = albedo(x) * E + rho_s * L_env(x, reflect(d, n))`` on the
object; the environment is seen directly where the object is missed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import virtual_sensor as vs
from .camera import Camera
from .env_field import EnvField, make_cones, render_cones
from .environment import GroundTruthEnvironment

LAYERS = ("mixed", "diffuse_gt", "specular_gt", "normal_gt", "mask", "depth_gt")


@dataclass
class SurfaceAlbedo:
    """Diffuse albedo texture in spherical UV around ``center`` (u: longitude, v: polar angle)."""

    texture: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.texture.ndim != 3 or self.texture.shape[2] != 3:
            raise ValueError(f"albedo texture must be (H, W, 3), got {self.texture.shape}")
        if not np.all(np.isfinite(self.texture)) or self.texture.min() < 0 or self.texture.max() > 1:
            raise ValueError("albedo values must lie in [0, 1]")

    @classmethod
    def constant(cls, rgb, center=(0.0, 0.0, 0.0), size=(8, 16)) -> "SurfaceAlbedo":
        return cls(np.broadcast_to(np.asarray(rgb, float), (*size, 3)).copy(), np.asarray(center, float))

    def taps(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flat texel indices ``(..., 4)`` and bilinear weights for surface points."""
        H, W = self.texture.shape[:2]
        r = np.asarray(points, float) - self.center
        rn = np.linalg.norm(r, axis=-1)
        u = (np.arctan2(r[..., 1], r[..., 0]) / (2 * np.pi)) % 1.0
        v = np.arccos(np.clip(r[..., 2] / np.where(rn > 0, rn, 1.0), -1.0, 1.0)) / np.pi
        x = u * W - 0.5
        y = np.clip(v * H - 0.5, 0.0, H - 1.0)
        x0 = np.floor(x)
        fx = x - x0
        xa = x0.astype(np.int64) % W
        xb = (xa + 1) % W
        y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
        fy = y - y0
        y1 = np.minimum(y0 + 1, H - 1)
        idx = np.stack([y0 * W + xa, y0 * W + xb, y1 * W + xa, y1 * W + xb], axis=-1)
        wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
        return idx, wts

    def __call__(self, points: np.ndarray) -> np.ndarray:
        idx, wts = self.taps(points)
        flat = self.texture.reshape(-1, 3)
        return np.einsum("...k,...kc->...c", wts, flat[idx])

    def adjoint(self, points: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Texture gradient of ``sum(grad * self(points))``."""
        idx, wts = self.taps(points)
        out = np.zeros((self.texture.shape[0] * self.texture.shape[1], 3))
        contrib = wts[..., :, None] * np.asarray(grad, float)[..., None, :]
        np.add.at(out, idx.reshape(-1), contrib.reshape(-1, 3))
        return out.reshape(self.texture.shape)


def scene_albedo(scene) -> SurfaceAlbedo:
    return SurfaceAlbedo(scene.object.albedo, scene.object.albedo_center)


def _trace_limit(scene, origin) -> float:
    return max(float(np.linalg.norm(np.asarray(origin) - d.center) + d.radius) for d in scene.environment.domes)


def shade_surface(scene, albedo: SurfaceAlbedo, points, normals, dirs):
    """Diffuse and specular radiance at surface hits."""
    diffuse = albedo(points) * scene.object.irradiance
    refl = geo.reflect(dirs, normals)
    specular = scene.object.rho_s * scene.environment.radiance(points, refl)
    return diffuse, specular


def pixel_offsets(samples: int, seed) -> np.ndarray:
    """Sub-pixel sample offsets in ``[0, 1)^2``; one centred sample when ``samples == 1``."""
    if samples <= 1:
        return np.full((1, 2), 0.5)
    return np.random.default_rng(seed).random((samples, 2))


def render_forward(scene, camera: Camera, samples: int | None = None, seed=0, albedo: SurfaceAlbedo | None = None):
    """All ground-truth layers for one view.

    With several samples per pixel, colour layers are pixel averages, ``mask`` is
    object coverage and ``depth_gt`` averages over the covering samples.
    ``mixed = diffuse_gt + specular_gt`` wherever ``mask == 1``.
    """
    samples = scene.samples if samples is None else samples
    sdf = scene.sdf
    lo, hi = sdf.bounds()
    center, radius = geo.bounding_sphere(sdf)
    if np.isfinite(radius):
        scene.environment.check_closed(center, radius)
    albedo = albedo or scene_albedo(scene)
    ii, jj = camera.pixel_grid()
    P = len(ii)
    acc = {k: np.zeros((P, 3)) for k in ("direct", "diffuse_gt", "specular_gt", "normal_gt")}
    cover = np.zeros(P)
    depth = np.zeros(P)
    t_max = _trace_limit(scene, camera.origin)
    for off in pixel_offsets(samples, seed):
        d = camera.directions(ii + off[0], jj + off[1])
        hits = geo.intersect_batch(sdf, camera.origin, d, 0.0, t_max, scene.geometry, with_curvature=False)
        h = hits.valid
        direct = scene.environment.radiance(np.broadcast_to(camera.origin, d.shape), d)
        diff = np.zeros((P, 3))
        spec = np.zeros((P, 3))
        if h.any():
            diff[h], spec[h] = shade_surface(scene, albedo, hits.point[h], hits.normal[h], d[h])
            acc["normal_gt"][h] += hits.normal[h]
            depth[h] += hits.t[h]
        acc["diffuse_gt"] += diff
        acc["specular_gt"] += spec
        acc["direct"] += np.where(h[:, None], 0.0, direct)
        cover += h
    n = len(pixel_offsets(samples, seed))
    H, W = camera.height, camera.width
    out = {k: (acc[k] / n).reshape(H, W, 3) for k in ("diffuse_gt", "specular_gt")}
    # composite after averaging so that mixed = diffuse + specular holds bitwise on covered pixels
    out["mixed"] = out["diffuse_gt"] + out["specular_gt"] + (acc["direct"] / n).reshape(H, W, 3)
    nrm = acc["normal_gt"]
    nn = np.linalg.norm(nrm, axis=-1, keepdims=True)
    out["normal_gt"] = np.where(nn > 0, nrm / np.where(nn > 0, nn, 1.0), 0.0).reshape(H, W, 3)
    out["mask"] = (cover / n).reshape(H, W)
    out["depth_gt"] = np.where(cover > 0, depth / np.maximum(cover, 1), 0.0).reshape(H, W)
    return {k: out[k] for k in LAYERS}


def sdf_density(f, alpha: float = 100.0, beta: float = 0.01):
    """``alpha * Psi_beta(-f)`` with ``Psi`` the zero-mean Laplace CDF (dense inside)."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    s = -np.asarray(f, float)
    half = 0.5 * np.exp(-np.abs(s) / beta)
    return alpha * np.where(s >= 0, 1.0 - half, half)


@dataclass
class VolumeSamples:
    """Per-ray quadrature: sample distances, weights and leftover transmittance."""

    t: np.ndarray  # (P, S)
    weights: np.ndarray  # (P, S)
    transmittance: np.ndarray  # (P,)


def volume_samples(sdf, origins, dirs, t_lo, t_hi, alpha, beta, n_samples, cfg=geo.DEFAULT_GEOMETRY) -> VolumeSamples:
    """Coarse uniform samples plus a fine band of width 20 beta around the surface.

    The band centres on the sphere-traced hit, or on the coarse SDF minimum for
    rays that miss, so grazing rays still resolve the thin shell.
    """
    P = len(dirs)
    n_coarse = max(2, n_samples // 2)
    n_fine = max(2, n_samples - n_coarse)
    u = (np.arange(n_coarse) + 0.5) / n_coarse
    tc = t_lo[:, None] + u[None] * (t_hi - t_lo)[:, None]
    fc = sdf((origins[:, None] + tc[..., None] * dirs[:, None]).reshape(-1, 3)).reshape(P, n_coarse)
    hits = geo.intersect_batch(sdf, origins, dirs, t_lo, t_hi, cfg, with_curvature=False)
    t_star = np.where(hits.valid, hits.t, tc[np.arange(P), np.argmin(fc, axis=1)])
    band = t_star[:, None] + 10 * beta * np.linspace(-1, 1, n_fine)[None]
    t = np.sort(np.concatenate([tc, band], axis=1), axis=1)
    t = np.clip(t, t_lo[:, None], t_hi[:, None])
    delta = np.diff(t, axis=1)
    delta = np.concatenate([delta, delta[:, -1:]], axis=1)
    f = sdf((origins[:, None] + t[..., None] * dirs[:, None]).reshape(-1, 3)).reshape(t.shape)
    sigma = sdf_density(f, alpha, beta)
    tau = sigma * delta
    trans = np.exp(-np.concatenate([np.zeros((P, 1)), np.cumsum(tau, axis=1)], axis=1))
    w = trans[:, :-1] * (1 - np.exp(-tau))
    return VolumeSamples(t, w, trans[:, -1])


def render_volumetric(
    scene,
    camera: Camera,
    env: EnvField | GroundTruthEnvironment | None = None,
    alpha: float = 100.0,
    beta: float = 0.01,
    n_samples: int = 64,
    mode: str = "curved",
    cone_samples: int = 64,
    albedo: SurfaceAlbedo | None = None,
    w_min: float = 1e-6,
) -> dict:
    """Volume-render the object with SDF density; specular via virtual cones at each sample.

    ``env`` is either a learned field (cones rendered through it) or the
    ground-truth environment (the cone axis is traced exactly). Samples whose
    virtual cone is invalid contribute no specular radiance.
    """
    env = scene.environment if env is None else env
    albedo = albedo or scene_albedo(scene)
    sdf = scene.sdf
    ii, jj = camera.pixel_grid()
    d = camera.directions(ii + 0.5, jj + 0.5)
    P = len(d)
    o = np.broadcast_to(camera.origin, d.shape)
    c, r = geo.bounding_sphere(sdf)
    if not np.isfinite(r):
        raise ValueError("volumetric rendering needs a bounded object")
    lo, hi = geo.ray_sphere_roots(o, d, c, r * 1.05)
    ray_hit = np.isfinite(lo) & (hi > 0)
    diffuse = np.zeros((P, 3))
    specular = np.zeros((P, 3))
    T = np.ones(P)
    idx = np.nonzero(ray_hit)[0]
    if len(idx):
        t_lo = np.maximum(lo[idx], 0.0)
        vsamp = volume_samples(sdf, o[idx], d[idx], t_lo, hi[idx], alpha, beta, n_samples, scene.geometry)
        T[idx] = vsamp.transmittance
        live = vsamp.weights > w_min
        pi, si = np.nonzero(live)
        w = vsamp.weights[pi, si]
        ts = vsamp.t[pi, si]
        ray = idx[pi]
        pts = o[ray] + ts[:, None] * d[ray]
        np.add.at(diffuse, ray, w[:, None] * albedo(pts) * scene.object.irradiance)
        eu, ev = camera.cone_frames(d[ray])
        cones = vs.virtual_cones_at(sdf, o[ray], d[ray], camera.rdot, eu, ev, ts, mode, scene.geometry)
        ok = cones.valid
        rad = np.zeros((len(ts), 3))
        if ok.any():
            if isinstance(env, GroundTruthEnvironment):
                rad[ok] = env.radiance(cones.point[ok], cones.axis[ok])
            else:
                cs = make_cones(env, cones.apex[ok], cones.axis[ok], cones.rdot[ok], near=cones.near[ok])
                rad[ok] = render_cones(env, cs, cone_samples).rgb
        np.add.at(specular, ray, w[:, None] * scene.object.rho_s * rad)
    if isinstance(env, GroundTruthEnvironment):
        direct = env.radiance(o, d)
    else:
        direct = render_cones(env, make_cones(env, o, d, camera.rdot), cone_samples).rgb
    mixed = diffuse + specular + T[:, None] * direct
    H, W = camera.height, camera.width
    return {
        "mixed": mixed.reshape(H, W, 3),
        "diffuse": diffuse.reshape(H, W, 3),
        "specular": specular.reshape(H, W, 3),
        "opacity": (1 - T).reshape(H, W),
    }
