"""Disparity measurements between translated novel views."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, shift as nd_shift


def depth_mask(depth: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels whose rendered depth is below ``threshold`` (the near occluder)."""
    return np.isfinite(depth) & (depth < threshold)


def centroid(mask: np.ndarray) -> np.ndarray:
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        return np.full(mask.ndim, np.nan)
    return np.array([i.mean() for i in idx])


def centroid_shift(mask_a: np.ndarray, mask_b: np.ndarray, axis: int = 1) -> float:
    """Shift of the mask centroid from view ``a`` to view ``b`` along ``axis`` (pixels)."""
    return float(centroid(mask_b)[axis] - centroid(mask_a)[axis])


def image_shift(img_a: np.ndarray, img_b: np.ndarray, valid: np.ndarray, max_shift: int = 20, axis: int = 1) -> float:
    """Sub-pixel translation ``s`` minimising ``|a(p) - b(p + s)|^2`` over ``valid`` pixels of ``a``.

    Integer search followed by a parabola through the best three costs.
    """
    a = np.asarray(img_a, float)
    b = np.asarray(img_b, float)
    costs = np.full(2 * max_shift + 1, np.inf)
    n = a.shape[axis]
    for k, s in enumerate(range(-max_shift, max_shift + 1)):
        sh = [0.0] * a.ndim
        sh[axis] = -s
        bs = nd_shift(b, sh, order=0, mode="constant", cval=np.nan)
        m = valid & np.all(np.isfinite(bs), axis=-1) if a.ndim == 3 else valid & np.isfinite(bs)
        if m.sum() < max(16, n):
            continue
        costs[k] = float(np.mean((a[m] - bs[m]) ** 2))
    k = int(np.argmin(costs))
    s = float(k - max_shift)
    if 0 < k < len(costs) - 1 and np.all(np.isfinite(costs[k - 1:k + 2])):
        c0, c1, c2 = costs[k - 1:k + 2]
        den = c0 - 2 * c1 + c2
        if den > 0:
            s += 0.5 * (c0 - c2) / den
    return s


def revealed_mask(occ_a: np.ndarray, occ_b: np.ndarray) -> np.ndarray:
    """Background in view ``b`` that the occluder hides in view ``a``."""
    return occ_a & ~occ_b


def background_mask(occ_a: np.ndarray, occ_b: np.ndarray, margin: int = 2) -> np.ndarray:
    """Pixels clear of both occluder masks by ``margin`` pixels."""
    occ = binary_dilation(occ_a | occ_b, iterations=margin) if margin > 0 else occ_a | occ_b
    return ~occ


@dataclass
class ParallaxReport:
    baseline: float
    occluder_shift: float  # predicted occluder centroid disparity (pixels)
    background_shift: float  # predicted background disparity (pixels)
    gt_background_shift: float
    revealed_pixels: int
    revealed_ssim: float  # translated view vs ground truth inside the revealed mask

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def translated_pair(scene, field, baseline: float = 0.4, size: int = 96, fov_deg: float = 90.0,
                    n_samples: int = 64, depth_threshold: float = 3.5, center=(0.0, 0.0, 0.0),
                    look=(0.0, 0.0, 1.0), up=(0.0, 1.0, 0.0)) -> ParallaxReport:
    """Render two novel views translated by ``baseline`` along the image x axis and measure disparity.

    Occluder masks threshold the ray depth; the revealed region comes from the
    ground-truth depth of the scene's environment.
    """
    from .camera import Camera
    from .env_field import render_novel_view
    from .metrics import ssim
    from .optim import novel_near

    c = np.asarray(center, float)
    look = np.asarray(look, float)
    base = Camera.look_at(c, c + look, size, size, fov_deg, up=up)
    xdir = base.rotation[:, 0]
    out = []
    for s in (-0.5, 0.5):
        o = c + s * baseline * xdir
        cam = Camera.look_at(o, o + look, size, size, fov_deg, up=up)
        img, depth = render_novel_view(field, cam, n_samples, near=novel_near(scene, cam), depth_mode="ray")
        ii, jj = cam.pixel_grid()
        d = cam.directions(ii + 0.5, jj + 0.5)
        g_rgb, g_t = scene.environment.trace(np.broadcast_to(cam.origin, d.shape), d)
        out.append((img, depth, g_rgb.reshape(size, size, 3), g_t.reshape(size, size)))
    (ia, da, ga, ta), (ib, db, gb, tb) = out
    oa, ob = depth_mask(da, depth_threshold), depth_mask(db, depth_threshold)
    ga_occ, gb_occ = depth_mask(ta, depth_threshold), depth_mask(tb, depth_threshold)
    rev = revealed_mask(ga_occ, gb_occ)
    return ParallaxReport(
        baseline=float(baseline),
        occluder_shift=float(abs(centroid_shift(oa, ob))),
        background_shift=float(abs(image_shift(ia, ib, background_mask(oa, ob)))),
        gt_background_shift=float(abs(image_shift(ga, gb, background_mask(ga_occ, gb_occ)))),
        revealed_pixels=int(rev.sum()),
        revealed_ssim=float(ssim(np.clip(ib, 0, 1), np.clip(gb, 0, 1), mask=rev)) if rev.any() else float("nan"),
    )
