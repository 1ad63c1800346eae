"""Voxel-grid environment radiance field queried with conical frustums.

Density is stored raw and activated with softplus. View-dependent colour is a
degree-``L`` real SH expansion per colour channel (``B = (L+1)^2`` coefficients),
decoded at the cone axis direction and clamped at zero.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .camera import Camera
from .errors import CheckpointError, OutsideVolume

CHECKPOINT_MAGIC = b"ENVF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIffffffIIfff")
FLAG_CONTRACT = 1
FLAG_OPAQUE_FAR = 2


def configure_threads() -> int:
    """Cap numba workers with ``ORCA_THREADS`` when set."""
    import numba

    n = os.environ.get("ORCA_THREADS")
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


def sh_basis(dirs: np.ndarray, degree: int = 2) -> np.ndarray:
    """Real SH basis (same sign convention as the kernels), shape ``(..., (degree+1)^2)``."""
    d = np.asarray(dirs, float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full_like(x, K.SH_C0)]
    if degree >= 1:
        out += [-K.SH_C1 * y, K.SH_C1 * z, -K.SH_C1 * x]
    if degree >= 2:
        c = K.SH_C2
        out += [c[0] * x * y, c[1] * y * z, c[2] * (2 * z * z - x * x - y * y), c[3] * x * z, c[4] * (x * x - y * y)]
    if degree > 2:
        raise ValueError("SH degree > 2 is not supported")
    return np.stack(out, axis=-1)


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, float)
    return np.where(y > 20, y, np.log(np.expm1(np.maximum(y, 1e-12))))


@dataclass
class EnvField:
    bmin: np.ndarray
    bmax: np.ndarray
    density: np.ndarray  # (N, N, N) raw, pre-softplus
    sh: np.ndarray  # (N, N, N, B, 3)
    contract: bool = False
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    opaque_far: bool = False  # last sample of each cone absorbs the remaining transmittance

    def __post_init__(self):
        self.bmin = np.asarray(self.bmin, float).reshape(3)
        self.bmax = np.asarray(self.bmax, float).reshape(3)
        self.density = np.ascontiguousarray(self.density, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        self.background = np.asarray(self.background, float).reshape(3)
        N = self.density.shape[0]
        if self.density.shape != (N, N, N):
            raise ValueError("density grid must be cubic")
        if not 2 <= N <= 256:
            raise ValueError(f"grid resolution {N} outside [2, 256]")
        if self.sh.shape[:3] != (N, N, N) or self.sh.shape[4] != 3 or self.sh.shape[3] not in (1, 4, 9):
            raise ValueError(f"bad SH grid shape {self.sh.shape}")
        if np.any(self.bmax <= self.bmin):
            raise ValueError("bounds must satisfy bmin < bmax")

    @classmethod
    def create(
        cls,
        resolution: int,
        bmin,
        bmax,
        sh_degree: int = 2,
        init_density: float = 0.1,
        init_rgb=0.5,
        contract: bool = False,
        background=(0.0, 0.0, 0.0),
        opaque_far: bool = False,
    ) -> "EnvField":
        N = int(resolution)
        B = (sh_degree + 1) ** 2
        dens = np.full((N, N, N), float(inverse_softplus(init_density)))
        sh = np.zeros((N, N, N, B, 3))
        sh[..., 0, :] = np.broadcast_to(np.asarray(init_rgb, float), 3) / K.SH_C0
        return cls(bmin, bmax, dens, sh, contract, np.asarray(background, float), opaque_far)

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    @property
    def n_basis(self) -> int:
        return self.sh.shape[3]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.n_basis))) - 1

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.density)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bmax - self.bmin) / (self.resolution - 1)

    def grid_points(self) -> np.ndarray:
        axes = [np.linspace(self.bmin[a], self.bmax[a], self.resolution) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "EnvField":
        return EnvField(self.bmin.copy(), self.bmax.copy(), self.density.copy(), self.sh.copy(),
                        self.contract, self.background.copy(), self.opaque_far)

    def _kernel_args(self):
        N = self.resolution
        return (
            self.density.reshape(-1),
            self.sh.reshape(N**3, self.n_basis * 3),
            self.n_basis,
            self.bmin,
            self.bmax,
            N,
            bool(self.contract),
        )


@dataclass(frozen=True)
class FrustumSample:
    """Segment ``[t0, t1]`` of a cone with apex, unit axis and radius slope ``rdot``."""

    t0: float
    t1: float
    apex: np.ndarray
    axis: np.ndarray
    rdot: float

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("frustum needs t1 > t0")
        if self.rdot < 0:
            raise ValueError("rdot must be non-negative")

    @property
    def moments(self) -> tuple[float, float]:
        s = 0.5 * (self.t0 + self.t1)
        return K.frustum_moments(s, 0.5 * (self.t1 - self.t0), self.rdot)

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.apex, float) + self.moments[0] * np.asarray(self.axis, float)

    @property
    def covariance(self) -> np.ndarray:
        """Diagonal of the radial covariance used by the taps."""
        d = np.asarray(self.axis, float)
        return self.moments[1] * (1.0 - d * d)


def sample_field(field: EnvField, frustum: FrustumSample) -> tuple[float, np.ndarray]:
    """Tap-averaged density and decoded radiance; ``(0, background)`` outside the volume."""
    sigma, rgb, inside = sample_frustums(
        field, frustum.mean[None], np.asarray(frustum.axis, float)[None], np.array([frustum.moments[1]])
    )
    if not inside[0]:
        return 0.0, field.background.copy()
    return float(sigma[0]), rgb[0]


def sample_frustums(field: EnvField, means, axes, var_r):
    dens, sh, B, bmin, bmax, N, contract = field._kernel_args()
    return K.sample_frustums(
        dens, sh, B, bmin, bmax, N, contract,
        np.ascontiguousarray(means, dtype=float).reshape(-1, 3),
        np.ascontiguousarray(axes, dtype=float).reshape(-1, 3),
        np.ascontiguousarray(var_r, dtype=float).reshape(-1),
    )


def slab_near_far(bmin, bmax, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit distances of rays through an AABB (``near >= 0``; ``near >= far`` on a miss)."""
    o = np.asarray(origins, float)
    d = np.asarray(dirs, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (bmin - o) * inv
        t2 = (bmax - o) * inv
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    inside_axis = (d == 0) & (o >= bmin) & (o <= bmax)
    lo = np.where(d == 0, np.where(inside_axis, -np.inf, np.inf), lo)
    hi = np.where(d == 0, np.where(inside_axis, np.inf, -np.inf), hi)
    near = np.maximum(lo.max(axis=-1), 0.0)
    far = hi.min(axis=-1)
    return near, far


@dataclass
class ConeSet:
    """Flat arrays describing ``M`` cones and their sampling interval."""

    apex: np.ndarray
    axis: np.ndarray
    rdot: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.apex.shape[0]

    def subset(self, idx) -> "ConeSet":
        return ConeSet(self.apex[idx], self.axis[idx], self.rdot[idx], self.near[idx], self.far[idx])


def make_cones(field: EnvField, apex, axis, rdot, near=None, contract_far: float = 4.0) -> ConeSet:
    """Clip cones to the field volume; ``near`` is an extra lower bound (e.g. the mirror surface)."""
    apex = np.ascontiguousarray(np.asarray(apex, float).reshape(-1, 3))
    axis = np.asarray(axis, float).reshape(-1, 3)
    axis = np.ascontiguousarray(axis / np.linalg.norm(axis, axis=-1, keepdims=True))
    M = apex.shape[0]
    rdot = np.ascontiguousarray(np.broadcast_to(np.asarray(rdot, float), (M,)))
    if field.contract:
        # contracted space reaches infinity; march a fixed multiple of the box half-diagonal
        reach = contract_far * 0.5 * np.linalg.norm(field.bmax - field.bmin)
        tn = np.zeros(M)
        tf = np.full(M, reach)
    else:
        tn, tf = slab_near_far(field.bmin, field.bmax, apex, axis)
    if near is not None:
        tn = np.maximum(tn, np.broadcast_to(np.asarray(near, float), (M,)))
    hit = np.isfinite(tn) & (tf > tn)
    tn = np.where(hit, tn, 0.0)
    tf = np.where(hit, tf, tn)
    return ConeSet(apex, axis, rdot, np.ascontiguousarray(tn), np.ascontiguousarray(tf))


@dataclass
class RenderResult:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray | None = None


def _jitter_array(jitter, M, n):
    if jitter is None:
        return np.zeros((0, 0))
    jitter = np.ascontiguousarray(jitter, dtype=float)
    if jitter.shape != (M, n):
        raise ValueError(f"jitter must have shape {(M, n)}")
    return jitter


def render_cones(
    field: EnvField,
    cones: ConeSet,
    n_samples: int = 64,
    background=None,
    jitter: np.ndarray | None = None,
    w_eps: float = 0.0,
    t_eps: float = 0.0,
    return_weights: bool = False,
) -> RenderResult:
    """Quadrature of tap-averaged density/radiance along each cone.

    ``jitter`` holds per-sample stratification offsets in ``[0, 1)``; ``None``
    uses the bin centres. Samples with weight ``<= w_eps`` skip colour and
    marching stops once transmittance drops below ``t_eps``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    bg = field.background if background is None else np.asarray(background, float).reshape(3)
    M = len(cones)
    rgb, depth, opacity, weights = K.render_cones(
        *field._kernel_args(), cones.apex, cones.axis, cones.rdot, cones.near, cones.far, int(n_samples),
        _jitter_array(jitter, M, n_samples), bg, float(w_eps), float(t_eps), bool(field.opaque_far),
        bool(return_weights),
    )
    return RenderResult(rgb, depth, opacity, weights if return_weights else None)


def backward(
    field: EnvField,
    cones: ConeSet,
    grad_rgb: np.ndarray,
    n_samples: int = 64,
    background=None,
    jitter: np.ndarray | None = None,
    w_eps: float = 0.0,
    t_eps: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`render_cones` rgb with ``grad_rgb``.

    Returns gradients for the raw density grid and the SH grid.
    """
    bg = field.background if background is None else np.asarray(background, float).reshape(3)
    M = len(cones)
    gd, gs = K.backward_cones(
        *field._kernel_args(), cones.apex, cones.axis, cones.rdot, cones.near, cones.far, int(n_samples),
        _jitter_array(jitter, M, n_samples), bg, float(w_eps), float(t_eps), bool(field.opaque_far),
        np.ascontiguousarray(grad_rgb, dtype=float).reshape(M, 3),
    )
    return gd.reshape(field.density.shape), gs.reshape(field.sh.shape)


def gradients(field: EnvField, cones: ConeSet, residuals: np.ndarray, **kw):
    """Gradients of ``sum(residuals**2)`` where ``residuals = rendered - target``."""
    return backward(field, cones, 2.0 * np.asarray(residuals, float), **kw)


def render_cone(field: EnvField, cone, n_samples: int = 64, background=None, near=None):
    """Render one cone (anything with ``apex``, ``axis``, ``rdot``)."""
    cs = make_cones(field, cone.apex, cone.axis, cone.rdot, near=near)
    r = render_cones(field, cs, n_samples, background)
    return r.rgb[0], float(r.depth[0]), float(r.opacity[0])


def render_novel_view(
    field: EnvField, camera: Camera, n_samples: int = 128, background=None, chunk: int = 1 << 16,
    near: float = 0.0, depth_mode: str = "z",
) -> tuple[np.ndarray, np.ndarray]:
    """Linear RGB image ``(H, W, 3)`` and expected-depth map ``(H, W)`` along pixel cones.

    ``depth_mode="z"`` gives depth along the optical axis (a fronto-parallel wall
    is constant); ``"ray"`` gives distance from the camera centre along each cone.
    ``near`` skips space right in front of the camera (e.g. the object it sits in).
    """
    if depth_mode not in ("z", "ray"):
        raise ValueError("depth_mode must be 'z' or 'ray'")
    ii, jj = camera.pixel_grid()
    dirs = camera.directions(ii + 0.5, jj + 0.5)
    cones = make_cones(field, np.broadcast_to(camera.origin, dirs.shape), dirs, camera.rdot, near=near)
    rgb = np.empty((len(cones), 3))
    depth = np.empty(len(cones))
    for lo in range(0, len(cones), chunk):
        sl = slice(lo, lo + chunk)
        r = render_cones(field, cones.subset(sl), n_samples, background)
        rgb[sl] = r.rgb
        depth[sl] = r.depth
    if depth_mode == "z":
        depth = depth * (dirs @ camera.rotation[:, 2])
    return rgb.reshape(camera.height, camera.width, 3), depth.reshape(camera.height, camera.width)


def save_field(field: EnvField, path) -> None:
    """Binary checkpoint: fixed little-endian header then float32 density and SH blocks.

    Header ``<4sIIffffffIIfff``: magic ``ENVF``, version, N, bmin[3], bmax[3],
    B, flags (bit 0 = contraction, bit 1 = opaque far end), background[3]. Data: ``N^3`` densities in
    C order, then ``N^3 * B * 3`` SH coefficients in C order ``(x, y, z, b, rgb)``.
    """
    N = field.resolution
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, N, *field.bmin, *field.bmax, field.n_basis,
        (FLAG_CONTRACT if field.contract else 0) | (FLAG_OPAQUE_FAR if field.opaque_far else 0), *field.background,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(field.density.astype("<f4").tobytes())
        f.write(field.sh.astype("<f4").tobytes())


def load_field(path) -> EnvField:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, N, *rest = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a field checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    bmin, bmax, B, flags, bg = rest[0:3], rest[3:6], rest[6], rest[7], rest[8:11]
    n_d, n_s = N**3, N**3 * B * 3
    if len(data) != _HEADER.size + 4 * (n_d + n_s):
        raise CheckpointError("checkpoint size does not match header")
    block = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    try:
        return EnvField(bmin, bmax, block[:n_d].reshape(N, N, N), block[n_d:].reshape(N, N, N, B, 3),
                        bool(flags & FLAG_CONTRACT), bg, bool(flags & FLAG_OPAQUE_FAR))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


__all__ = [
    "EnvField", "FrustumSample", "ConeSet", "RenderResult", "OutsideVolume",
    "sample_field", "sample_frustums", "make_cones", "render_cones", "render_cone", "backward",
    "gradients", "render_novel_view", "save_field", "load_field", "sh_basis", "slab_near_far",
    "configure_threads",
]
