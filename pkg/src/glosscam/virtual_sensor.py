"""Turn the patch of mirror surface seen by one pixel into a single-pixel camera.

The real pixel cone is bounded by four rays; where they meet the local
osculating sphere they mark the corners of the virtual pixel. Reflecting the
bounding rays off the sphere normals and finding the point nearest to all
reflected rays gives the apex of the virtual cone. Its axis is the reflected
chief ray and its radius slope comes from the spread of the reflected corner
rays around that axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .camera import Camera
from .errors import CornerMiss, NoHit, RaysParallel

MODE_CURVED, MODE_PLANAR, MODE_NAIVE = 0, 1, 2
MODE_NAMES = {MODE_CURVED: "curved", MODE_PLANAR: "planar", MODE_NAIVE: "naive"}
CORNER_ANGLES = np.array([0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi])
MAX_CORNER_RETRIES = 3
PARALLEL_ANGLE = 1e-6


@dataclass(frozen=True)
class Cone:
    apex: np.ndarray
    axis: np.ndarray
    rdot: float
    e_u: np.ndarray
    e_v: np.ndarray


def pixel_cone(camera: Camera, pixel: tuple[int, int]) -> Cone:
    i, j = pixel
    if not (0 <= i < camera.width and 0 <= j < camera.height):
        raise IndexError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    d = camera.directions(np.array([i + 0.5]), np.array([j + 0.5]))
    eu, ev = camera.cone_frames(d)
    return Cone(camera.origin.copy(), d[0], camera.rdot, eu[0], ev[0])


def bounding_directions(axis, rdot, eu, ev) -> np.ndarray:
    """Unit directions of the four bounding rays, shape ``(..., 4, 3)``."""
    axis = np.asarray(axis, float)
    rdot = np.asarray(rdot, float)[..., None, None]
    c = np.cos(CORNER_ANGLES)[:, None]
    s = np.sin(CORNER_ANGLES)[:, None]
    d = axis[..., None, :] + rdot * (c * np.asarray(eu)[..., None, :] + s * np.asarray(ev)[..., None, :])
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def bounding_rays(cone: Cone) -> list[geo.Ray]:
    dirs = bounding_directions(cone.axis, cone.rdot, cone.e_u, cone.e_v)
    return [geo.Ray(cone.apex, d) for d in dirs]


def reflect(d, n) -> np.ndarray:
    return geo.reflect(d, n)


def least_squares_focus(points: np.ndarray, dirs: np.ndarray):
    """Point minimising the summed squared distance to lines ``(points, dirs)``.

    Works on stacks ``(M, k, 3)``. Returns ``(v, residual, parallel)`` where
    ``residual`` is the minimised objective and ``parallel`` flags bundles
    whose maximum pairwise angle is below ``PARALLEL_ANGLE``.
    """
    points = np.asarray(points, float)
    dirs = np.asarray(dirs, float)
    proj = np.eye(3) - dirs[..., :, None] * dirs[..., None, :]
    A = proj.sum(axis=-3)
    b = np.einsum("...kij,...kj->...i", proj, points)
    v = np.einsum("...ij,...j->...i", np.linalg.pinv(A), b)
    r = np.einsum("...kij,...kj->...ki", proj, v[..., None, :] - points)
    residual = np.sum(r * r, axis=(-1, -2))
    cosines = np.einsum("...ai,...bi->...ab", dirs, dirs)
    sines = np.sqrt(np.clip(1.0 - cosines**2, 0.0, None))
    parallel = np.max(np.arctan2(sines, cosines), axis=(-1, -2)) <= PARALLEL_ANGLE
    return v, residual, parallel


def virtual_origin(points, dirs) -> tuple[np.ndarray, float]:
    """Least-squares focus of a single reflected bundle (centre ray + corners)."""
    v, residual, parallel = least_squares_focus(np.asarray(points)[None], np.asarray(dirs)[None])
    if parallel[0]:
        raise RaysParallel("reflected rays are parallel; use the planar mirror construction")
    return v[0], float(residual[0])


def virtual_pixel_corners(cone: Cone, sphere: geo.OsculatingSphere, t_ref: float | None = None):
    """Corners ``ds_j`` and facing normals ``n_j`` of the virtual pixel.

    With ``t_ref`` (the chief-ray hit distance) the root nearest to it is used;
    otherwise the nearest non-negative root.
    """
    dirs = bounding_directions(cone.axis, cone.rdot, cone.e_u, cone.e_v)
    lo, hi = geo.ray_sphere_roots(cone.apex, dirs, sphere.center, sphere.radius)
    corners = np.empty((4, 3))
    for j in range(4):
        if np.isnan(lo[j]):
            raise CornerMiss(j)
        if t_ref is None:
            t = lo[j] if lo[j] >= 0 else hi[j]
            if t < 0:
                raise CornerMiss(j)
        else:
            t = lo[j] if abs(lo[j] - t_ref) <= abs(hi[j] - t_ref) else hi[j]
        corners[j] = cone.apex + t * dirs[j]
    normals = sphere.sign * (corners - sphere.center)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return corners, normals


@dataclass
class VirtualConeBatch:
    """Vectorised virtual cameras; one row per input ray."""

    apex: np.ndarray
    axis: np.ndarray
    rdot: np.ndarray
    near: np.ndarray  # distance along the axis from apex to the virtual pixel
    valid: np.ndarray
    mode: np.ndarray
    residual: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray
    corners: np.ndarray
    corner_normals: np.ndarray
    incident: np.ndarray
    reflected: np.ndarray
    center_reflected: np.ndarray
    osc_center: np.ndarray
    osc_radius: np.ndarray
    retries: np.ndarray

    def __len__(self):
        return len(self.apex)

    def subset(self, idx) -> "VirtualConeBatch":
        return VirtualConeBatch(**{k: v[idx] for k, v in self.__dict__.items()})


def virtual_cones_at(
    sdf: geo.Sdf,
    origins: np.ndarray,
    dirs: np.ndarray,
    rdot,
    eu: np.ndarray,
    ev: np.ndarray,
    t: np.ndarray,
    mode: str = "curved",
    cfg: geo.GeometryConfig = geo.DEFAULT_GEOMETRY,
    radius_rule: str = "mean_tangent",
) -> VirtualConeBatch:
    """Virtual cones for points ``o + t d`` on (or near) the surface."""
    dirs = np.atleast_2d(np.asarray(dirs, float))
    M = len(dirs)
    origins = np.broadcast_to(np.asarray(origins, float), (M, 3))
    rdot = np.broadcast_to(np.asarray(rdot, float), (M,)).copy()
    t = np.broadcast_to(np.asarray(t, float), (M,))
    x = origins + t[:, None] * dirs

    g = sdf.gradient(x, cfg)
    gn = np.linalg.norm(g, axis=-1)
    valid = np.isfinite(t) & (gn > 1e-9)
    n = np.where(valid[:, None], g / np.where(gn > 0, gn, 1.0)[:, None], np.nan)
    K = np.full(M, np.nan)
    if valid.any():
        K[valid] = sdf.mean_curvature(x[valid], cfg)

    curved = valid & (np.abs(K) > cfg.k_min)
    s_k = np.where(K > 0, 1.0, -1.0)
    R = np.where(curved, geo.osculating_radius(np.where(curved, K, 1.0), cfg), np.nan)
    c = x - (s_k * R)[:, None] * n

    corners = np.full((M, 4, 3), np.nan)
    incident = np.full((M, 4, 3), np.nan)
    retries = np.zeros(M, dtype=np.int64)
    pending = curved.copy()
    for attempt in range(MAX_CORNER_RETRIES + 1):
        idx = np.nonzero(pending)[0]
        if len(idx) == 0:
            break
        b = bounding_directions(dirs[idx], rdot[idx] / 2**attempt, eu[idx], ev[idx])
        lo, hi = geo.ray_sphere_roots(origins[idx, None], b, c[idx, None], R[idx, None])
        pick = np.where(np.abs(lo - t[idx, None]) <= np.abs(hi - t[idx, None]), lo, hi)
        ok = np.all(np.isfinite(pick), axis=1)
        good = idx[ok]
        corners[good] = origins[good, None] + pick[ok, :, None] * b[ok]
        incident[good] = b[ok]
        retries[good] = attempt
        pending[good] = False
    valid &= ~pending  # corner misses after all retries

    planar = valid & ~curved
    if planar.any():
        idx = np.nonzero(planar)[0]
        b = bounding_directions(dirs[idx], rdot[idx], eu[idx], ev[idx])
        denom = np.einsum("mkj,mj->mk", b, n[idx])
        num = np.einsum("mj,mj->m", x[idx] - origins[idx], n[idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            tj = num[:, None] / denom
        ok = np.all(np.isfinite(tj) & (np.abs(denom) > 1e-12), axis=1)
        corners[idx[ok]] = origins[idx[ok], None] + tj[ok, :, None] * b[ok]
        incident[idx] = b
        valid[idx[~ok]] = False

    corner_normals = np.where(planar[:, None, None], n[:, None, :], (s_k / R)[:, None, None] * (corners - c[:, None]))
    corner_normals = corner_normals / np.linalg.norm(corner_normals, axis=-1, keepdims=True)
    reflected = geo.reflect(incident, corner_normals)
    w0 = geo.reflect(dirs, n)

    pts = np.concatenate([x[:, None], corners], axis=1)
    rdirs = np.concatenate([w0[:, None], reflected], axis=1)
    apex = np.full((M, 3), np.nan)
    residual = np.full(M, np.nan)
    out_mode = np.full(M, MODE_PLANAR, dtype=np.int64)
    idx = np.nonzero(curved & valid)[0]
    if len(idx):
        v, res, par = least_squares_focus(pts[idx], rdirs[idx])
        apex[idx], residual[idx] = v, res
        out_mode[idx] = MODE_CURVED
        planar = planar | (valid & curved & np.isin(np.arange(M), idx[par]))
    idx = np.nonzero(planar & valid)[0]
    if len(idx):
        o = origins[idx]
        apex[idx] = o - 2.0 * np.sum((o - x[idx]) * n[idx], axis=1, keepdims=True) * n[idx]
        out_mode[idx] = MODE_PLANAR
        r = rdirs[idx]
        proj = np.eye(3) - r[..., :, None] * r[..., None, :]
        diff = np.einsum("mkij,mkj->mki", proj, apex[idx, None] - pts[idx])
        residual[idx] = np.sum(diff * diff, axis=(1, 2))

    cosines = np.clip(np.einsum("mkj,mj->mk", reflected, w0), -1.0, 1.0)
    sines = np.linalg.norm(np.cross(reflected, w0[:, None]), axis=-1)
    tangents = sines / np.maximum(cosines, 1e-12)
    spread = np.max(tangents, axis=1) if radius_rule == "max_tangent" else np.mean(tangents, axis=1)
    # undo the first-order effect of shrinking the cone during corner retries
    v_rdot = spread * 2.0**retries

    if mode == "naive":
        apex = np.where(valid[:, None], x, np.nan)
        v_rdot = rdot.copy()
        out_mode = np.full(M, MODE_NAIVE, dtype=np.int64)

    near = np.maximum(np.einsum("mj,mj->m", x - apex, w0), 0.0)
    return VirtualConeBatch(
        apex=apex,
        axis=w0,
        rdot=np.where(valid, v_rdot, np.nan),
        near=np.where(valid, near, np.nan),
        valid=valid,
        mode=out_mode,
        residual=residual,
        point=x,
        normal=n,
        curvature=K,
        corners=corners,
        corner_normals=corner_normals,
        incident=incident,
        reflected=reflected,
        center_reflected=w0,
        osc_center=np.where(curved[:, None], c, np.nan),
        osc_radius=R,
        retries=retries,
    )


def build_virtual_cones(
    sdf: geo.Sdf,
    origins: np.ndarray,
    dirs: np.ndarray,
    rdot,
    eu: np.ndarray,
    ev: np.ndarray,
    mode: str = "curved",
    cfg: geo.GeometryConfig = geo.DEFAULT_GEOMETRY,
    radius_rule: str = "mean_tangent",
    t_max: float = 1e3,
) -> VirtualConeBatch:
    """Intersect pixel rays with the surface and build their virtual cones."""
    hits = geo.intersect_batch(sdf, origins, dirs, 0.0, t_max, cfg, with_curvature=False)
    t = np.where(hits.valid, hits.t, np.nan)
    batch = virtual_cones_at(sdf, origins, dirs, rdot, eu, ev, t, mode, cfg, radius_rule)
    batch.valid &= hits.valid
    return batch


def camera_virtual_cones(sdf, camera: Camera, mode="curved", cfg=geo.DEFAULT_GEOMETRY, radius_rule="mean_tangent", rdot_scale=1.0):
    """Virtual cones for every pixel of ``camera`` in row-major order."""
    ii, jj = camera.pixel_grid()
    d = camera.directions(ii + 0.5, jj + 0.5)
    eu, ev = camera.cone_frames(d)
    return build_virtual_cones(sdf, camera.origin, d, camera.rdot * rdot_scale, eu, ev, mode, cfg, radius_rule)


@dataclass(frozen=True)
class VirtualSensorPixel:
    sample: geo.SurfaceSample
    sphere: geo.OsculatingSphere | None
    corners: np.ndarray
    corner_normals: np.ndarray
    reflected: np.ndarray
    center_reflected: np.ndarray
    cone: Cone
    residual: float
    mode: str


def build_virtual_pixel(
    sdf: geo.Sdf,
    camera: Camera,
    pixel: tuple[int, int],
    mode: str = "curved",
    cfg: geo.GeometryConfig = geo.DEFAULT_GEOMETRY,
    radius_rule: str = "mean_tangent",
    rdot: float | None = None,
) -> VirtualSensorPixel:
    cone = pixel_cone(camera, pixel)
    if rdot is not None:
        cone = Cone(cone.apex, cone.axis, rdot, cone.e_u, cone.e_v)
    sample = geo.intersect(sdf, geo.Ray(cone.apex, cone.axis), cfg)
    if not sample.valid:
        raise NoHit(f"pixel {pixel} misses the object")
    b = virtual_cones_at(
        sdf, cone.apex, cone.axis[None], cone.rdot, cone.e_u[None], cone.e_v[None],
        np.array([sample.t]), mode, cfg, radius_rule,
    )
    if not b.valid[0]:
        raise CornerMiss(int(np.argmax(np.isnan(b.corners[0, :, 0]))))
    sphere = None
    if np.isfinite(b.osc_radius[0]):
        sphere = geo.OsculatingSphere(b.osc_center[0], float(b.osc_radius[0]), 1 if b.curvature[0] > 0 else -1)
    eu, ev = _perpendicular_basis(b.axis[0])
    return VirtualSensorPixel(
        sample=sample,
        sphere=sphere,
        corners=b.corners[0],
        corner_normals=b.corner_normals[0],
        reflected=b.reflected[0],
        center_reflected=b.center_reflected[0],
        cone=Cone(b.apex[0], b.axis[0], float(b.rdot[0]), eu, ev),
        residual=float(b.residual[0]),
        mode=MODE_NAMES[int(b.mode[0])],
    )


def _perpendicular_basis(d: np.ndarray):
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    eu = np.cross(helper, d)
    eu /= np.linalg.norm(eu)
    return eu, np.cross(d, eu)


def perpendicular_basis(d: np.ndarray):
    """Orthonormal ``(e_u, e_v)`` spanning the plane perpendicular to each ``d``."""
    d = np.atleast_2d(np.asarray(d, float))
    helper = np.where((np.abs(d[:, 0]) < 0.9)[:, None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    eu = np.cross(helper, d)
    eu /= np.linalg.norm(eu, axis=-1, keepdims=True)
    return eu, np.cross(d, eu)
