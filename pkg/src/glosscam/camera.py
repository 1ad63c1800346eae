"""Pinhole cameras and per-pixel cones.

Camera frame: x right, y down, z forward (OpenCV). ``c2w`` is the 3x4
camera-to-world matrix ``[R | o]``. Pixel ``(i, j)`` is column ``i``, row ``j``
and its centre sits at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    pixel_pitch: float = 1.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(3, 4)
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) <= 0:
            raise ValueError("camera rotation must be a proper orthonormal matrix")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:, 3]

    @property
    def rdot(self) -> float:
        """Cone radius per unit distance: half a pixel over the focal length."""
        return 0.5 * self.pixel_pitch / math.sqrt(self.fx * self.fy)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def directions(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit world directions through continuous image coordinates ``(u, v)``."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        local = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d = local @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        jj, ii = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return ii.ravel(), jj.ravel()

    def cone_frames(self, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cone cross-section basis aligned with the sensor axes."""
        x_axis = self.rotation[:, 0]
        eu = x_axis - (dirs @ x_axis)[..., None] * dirs
        eu /= np.linalg.norm(eu, axis=-1, keepdims=True)
        ev = np.cross(dirs, eu)
        return eu, ev

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points to continuous pixel coordinates ``(u, v)``; NaN behind the camera."""
        local = (np.asarray(points, float) - self.origin) @ self.rotation
        z = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * local[..., 0] / z + self.cx
            v = self.fy * local[..., 1] / z + self.cy
        uv = np.stack([u, v], axis=-1)
        uv[z <= 0] = np.nan
        return uv

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "pixel_pitch": self.pixel_pitch,
            "c2w": self.c2w.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        if "c2w" in d:
            return cls(
                width=int(d["width"]),
                height=int(d["height"]),
                fx=float(d["fx"]),
                fy=float(d.get("fy", d["fx"])),
                cx=float(d.get("cx", d["width"] / 2)),
                cy=float(d.get("cy", d["height"] / 2)),
                c2w=np.asarray(d["c2w"], dtype=float),
                pixel_pitch=float(d.get("pixel_pitch", 1.0)),
            )
        return cls.look_at(
            d["position"],
            d.get("look_at", d.get("target")),
            width=int(d["width"]),
            height=int(d["height"]),
            fov_deg=float(d.get("fov_deg", 50.0)),
            up=d.get("up", (0.0, 0.0, 1.0)),
        )

    @classmethod
    def look_at(cls, position, target, width: int, height: int, fov_deg: float = 50.0, up=(0.0, 0.0, 1.0)):
        position = np.asarray(position, dtype=float)
        c2w = np.hstack([look_at_rotation(position, target, up), position[:, None]])
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, c2w)


def look_at_rotation(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    fwd = np.asarray(target, float) - np.asarray(position, float)
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, float)
    if abs(fwd @ up) > 1 - 1e-9 * np.linalg.norm(up):
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def orbit_positions(count: int, radius: float, elevation_deg: float, center=(0.0, 0.0, 0.0), phase_deg: float = 0.0):
    az = np.radians(phase_deg) + 2 * np.pi * np.arange(count) / count
    el = math.radians(elevation_deg)
    c = np.asarray(center, float)
    pts = np.stack(
        [radius * math.cos(el) * np.cos(az), radius * math.cos(el) * np.sin(az), np.full(count, radius * math.sin(el))],
        axis=-1,
    )
    return pts + c


def cycle_fov(fov_deg, i: int) -> float:
    """Field of view of view ``i``: a scalar, or a sequence cycled over the views."""
    if np.ndim(fov_deg) == 0:
        return float(fov_deg)
    return float(fov_deg[i % len(fov_deg)])


def orbit_cameras(count, radius, elevation_deg, width, height, fov_deg=50.0, center=(0.0, 0.0, 0.0), phase_deg=0.0):
    return [
        Camera.look_at(p, center, width, height, cycle_fov(fov_deg, i))
        for i, p in enumerate(orbit_positions(count, radius, elevation_deg, center, phase_deg))
    ]
