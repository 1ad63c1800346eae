import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glosscam import geometry as geo
from glosscam import virtual_sensor as vs
from glosscam.camera import Camera
from glosscam.errors import NoHit, RaysParallel


def sphere_cam(width=64, fov=40.0, pos=(0.0, 0.0, 3.0)):
    return Camera.look_at(pos, (0, 0, 0), width, width, fov, up=(0, 1, 0))


def exact_sphere_pencil(o, axis, eu, ev, eps, n=64):
    """Reflected ring of rays around ``axis`` off the unit sphere, by closed-form intersection."""
    ang = np.arange(n) * 2 * np.pi / n
    d = axis[None] + eps * (np.cos(ang)[:, None] * eu + np.sin(ang)[:, None] * ev)
    d = np.vstack([axis, d])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    b = d @ o
    t = -b - np.sqrt(b * b - (o @ o - 1.0))
    p = o + t[:, None] * d
    nrm = p / np.linalg.norm(p, axis=1, keepdims=True)
    return p, d - 2 * np.sum(d * nrm, 1, keepdims=True) * nrm


def lines_focus(p, w):
    A = np.zeros((3, 3))
    rhs = np.zeros(3)
    for pi, wi in zip(p, w):
        P = np.eye(3) - np.outer(wi, wi)
        A += P
        rhs += P @ pi
    return np.linalg.solve(A, rhs)


def caustic_oracle(o, axis, eu, ev):
    """Focus of an infinitesimal reflected pencil: dense ring foci at two widths, Richardson-extrapolated."""
    f1 = lines_focus(*exact_sphere_pencil(o, axis, eu, ev, 1e-4))
    f2 = lines_focus(*exact_sphere_pencil(o, axis, eu, ev, 5e-5))
    return (4 * f2 - f1) / 3


def grid_search_min(obj, center, half=0.5, n=11, rounds=40):
    c = np.asarray(center, float)
    for _ in range(rounds):
        ax = np.linspace(-half, half, n)
        g = c + np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        c = g[np.argmin([obj(x) for x in g])]
        half *= 0.5
    return c


# -- pixel cones -------------------------------------------------------------------------


def test_pixel_cone_unit_focal():
    cam = Camera(2, 2, 1.0, 1.0, 1.0, 1.0)
    assert vs.pixel_cone(cam, (0, 0)).rdot == 0.5


def test_center_pixel_is_optical_axis():
    cam = Camera.look_at((1.0, 2.0, 3.0), (0, 0, 0), 33, 33, 50.0)
    c = vs.pixel_cone(cam, (16, 16))
    np.testing.assert_allclose(c.axis, cam.rotation[:, 2], atol=1e-12)


@given(st.integers(0, 47), st.integers(0, 31))
def test_pixel_cone_backprojection(i, j):
    cam = Camera(48, 32, 40.0, 42.0, 23.0, 15.5, Camera.look_at((1, -2, 3), (0, 0, 0), 48, 32).c2w)
    c = vs.pixel_cone(cam, (i, j))
    local = np.linalg.solve(cam.intrinsics, [i + 0.5, j + 0.5, 1.0])
    world = cam.rotation @ local
    np.testing.assert_allclose(c.axis, world / np.linalg.norm(world), atol=1e-12)
    assert abs(c.e_u @ c.axis) < 1e-9 and abs(c.e_v @ c.axis) < 1e-9 and abs(c.e_u @ c.e_v) < 1e-9
    np.testing.assert_array_equal(c.apex, cam.origin)


def test_pixel_cone_bounds():
    with pytest.raises(IndexError):
        vs.pixel_cone(Camera(2, 2, 1.0, 1.0, 1.0, 1.0), (2, 0))


# -- bounding rays -----------------------------------------------------------------------


def test_degenerate_cone_rays_equal_axis():
    c = vs.Cone(np.zeros(3), np.array([0, 0, -1.0]), 0.0, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    for r in vs.bounding_rays(c):
        np.testing.assert_allclose(r.direction, [0, 0, -1.0])


def test_first_bounding_ray():
    c = vs.Cone(np.zeros(3), np.array([0, 0, -1.0]), 0.1, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    expect = np.array([0.1, 0, -1.0]) / math.hypot(0.1, 1.0)
    np.testing.assert_allclose(vs.bounding_rays(c)[0].direction, expect, atol=1e-15)


@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 0.5))
def test_bounding_rays_equal_angle(seed, rdot):
    r = np.random.default_rng(seed)
    axis = geo.normalize(r.normal(size=3))
    eu, ev = vs.perpendicular_basis(axis)
    dirs = vs.bounding_directions(axis, rdot, eu[0], ev[0])
    ang = np.arccos(np.clip(dirs @ axis, -1, 1))
    np.testing.assert_allclose(ang, math.atan(rdot), atol=1e-9)


# -- corners -----------------------------------------------------------------------------


def axial_cone(rdot):
    return vs.Cone(np.array([0, 0, 3.0]), np.array([0, 0, -1.0]), rdot, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))


UNIT = geo.OsculatingSphere(np.zeros(3), 1.0, 1)


def test_zero_radius_corners():
    corners, normals = vs.virtual_pixel_corners(axial_cone(0.0), UNIT)
    np.testing.assert_allclose(corners, np.tile([0, 0, 1.0], (4, 1)), atol=1e-12)
    np.testing.assert_allclose(normals, np.tile([0, 0, 1.0], (4, 1)), atol=1e-12)


def test_corners_symmetric_under_quarter_turn():
    corners, _ = vs.virtual_pixel_corners(axial_cone(0.05), UNIT)
    rot = np.array([[0, -1.0, 0], [1.0, 0, 0], [0, 0, 1.0]])
    np.testing.assert_allclose(corners @ rot.T, np.roll(corners, -1, axis=0), atol=1e-12)


def test_corners_match_quadric_roots():
    cone = axial_cone(0.05)
    corners, normals = vs.virtual_pixel_corners(cone, UNIT)
    for j, th in enumerate([0, 0.5 * np.pi, np.pi, 1.5 * np.pi]):
        d = np.array([0.05 * math.cos(th), 0.05 * math.sin(th), -1.0])
        d /= np.linalg.norm(d)
        b = d @ cone.apex
        t = -b - math.sqrt(b * b - (cone.apex @ cone.apex - 1))
        np.testing.assert_allclose(corners[j], cone.apex + t * d, atol=1e-8)
        np.testing.assert_allclose(normals[j], corners[j] / np.linalg.norm(corners[j]), atol=1e-12)


def test_concave_corner_normals_face_ray():
    cone = vs.Cone(np.zeros(3), np.array([0, 0, 1.0]), 0.05, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    inner = geo.OsculatingSphere(np.zeros(3), 2.0, -1)
    corners, normals = vs.virtual_pixel_corners(cone, inner)
    assert np.all(np.einsum("kj,kj->k", normals, corners - cone.apex) < 0)


# -- virtual origin ----------------------------------------------------------------------


def test_consistent_pencil():
    p = np.array([0.3, -0.2, 0.5])
    dirs = geo.normalize(np.random.default_rng(0).normal(size=(5, 3)))
    v, res = vs.virtual_origin(p + 2.0 * dirs, dirs)
    np.testing.assert_allclose(v, p, atol=1e-12)
    assert res < 1e-20


def test_parallel_rays_raise():
    pts = np.array([[0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    with pytest.raises(RaysParallel):
        vs.virtual_origin(pts, np.tile([0, 0, 1.0], (3, 1)))


def test_paraxial_sphere_origin_matches_grid_search():
    cone = axial_cone(0.01)
    corners, normals = vs.virtual_pixel_corners(cone, UNIT)
    dirs = vs.bounding_directions(cone.axis, cone.rdot, cone.e_u, cone.e_v)
    pts = np.vstack([[0, 0, 1.0], corners])
    refl = np.vstack([[0, 0, 1.0], geo.reflect(dirs, normals)])
    v, _ = vs.virtual_origin(pts, refl)

    def obj(x):
        r = np.cross(x - pts, refl)
        return np.sum(r * r)

    oracle = grid_search_min(obj, [0, 0, 0.5])
    np.testing.assert_allclose(v, oracle, atol=1e-4)
    assert 0 < v[2] < 1 and abs(v[0]) < 1e-9 and abs(v[1]) < 1e-9


# -- full virtual pixels -----------------------------------------------------------------


def test_mirror_plane_pixel():
    cam = Camera.look_at((0.3, -0.2, 2.0), (0, 0, 0), 16, 16, 40.0)
    px = vs.build_virtual_pixel(geo.Plane(), cam, (5, 9))
    assert px.mode == "planar"
    np.testing.assert_allclose(px.cone.apex, [0.3, -0.2, -2.0], atol=1e-9)
    assert px.cone.rdot == pytest.approx(cam.rdot, rel=1e-9)


def test_paraxial_focus_at_half_radius():
    cam = Camera.look_at((0, 0, 1000.0), (0, 0, 0), 65, 65, 0.05, up=(0, 1, 0))
    px = vs.build_virtual_pixel(geo.Sphere(), cam, (32, 32))
    assert px.mode == "curved"
    np.testing.assert_allclose(px.cone.apex, [0, 0, 0.5], atol=1e-3)


def test_axis_is_center_reflection_and_reflection_law():
    cam = sphere_cam()
    b = vs.camera_virtual_cones(geo.Sphere(), cam)
    ok = b.valid
    assert ok.sum() > 500
    np.testing.assert_array_equal(b.axis[ok], b.center_reflected[ok])
    inc, nrm, ref = b.incident[ok], b.corner_normals[ok], b.reflected[ok]
    np.testing.assert_allclose(np.linalg.norm(ref, axis=-1), 1.0, atol=1e-9)
    a_in = np.arccos(np.clip(-np.sum(inc * nrm, -1), -1, 1))
    a_out = np.arccos(np.clip(np.sum(ref * nrm, -1), -1, 1))
    assert np.max(np.abs(a_in - a_out)) <= 1e-6


def test_curved_residual_is_grid_minimum():
    cam = sphere_cam(16)
    px = vs.build_virtual_pixel(geo.Sphere(), cam, (10, 5))
    pts = np.vstack([px.sample.point, px.corners])
    refl = np.vstack([px.center_reflected, px.reflected])

    def obj(x):
        r = np.cross(x - pts, refl)
        return np.sum(r * r)

    oracle = grid_search_min(obj, px.cone.apex, half=0.2)
    assert px.residual <= obj(oracle) * (1 + 1e-9) + 1e-18
    np.testing.assert_allclose(px.cone.apex, oracle, atol=1e-4)


def test_caustic_sheets_bracket_the_focus():
    cam = sphere_cam()
    cone = vs.pixel_cone(cam, (40, 22))
    focus = caustic_oracle(cone.apex, cone.axis, cone.e_u, cone.e_v)
    p, w = exact_sphere_pencil(cone.apex, cone.axis, cone.e_u, cone.e_v, 0.0, n=1)
    p, w = p[0], w[0]
    # sagittal sheet: where the chief reflected ray meets the source-centre axis (z axis)
    s_sag = -p[0] / w[0]
    # tangential sheet: envelope of neighbouring rays in the plane of incidence
    plane_n = np.cross(cone.apex, cone.axis)
    tdir = geo.normalize(np.cross(plane_n, cone.axis))
    p2, w2 = exact_sphere_pencil(cone.apex, geo.normalize(cone.axis + 1e-6 * tdir), cone.e_u, cone.e_v, 0.0, n=1)
    A = np.stack([w, -w2[0]], axis=1)
    s_tan = np.linalg.lstsq(A, p2[0] - p, rcond=None)[0][0]
    s_focus = (focus - p) @ w
    assert np.linalg.norm(np.cross(focus - p, w)) < 1e-6
    assert min(s_sag, s_tan) < s_focus < max(s_sag, s_tan)


def test_caustic_convergence():
    cam = sphere_cam()
    cone = vs.pixel_cone(cam, (40, 22))
    oracle = caustic_oracle(cone.apex, cone.axis, cone.e_u, cone.e_v)
    r0 = 8 * cam.rdot
    rdots = r0 / 2.0 ** np.arange(7)
    errs = [np.linalg.norm(vs.build_virtual_pixel(geo.Sphere(), cam, (40, 22), rdot=r).cone.apex - oracle) for r in rdots]
    assert np.all(np.diff(errs) < 0)
    assert np.polyfit(np.log(rdots), np.log(errs), 1)[0] >= 0.8
    assert errs[-1] <= 1e-3


def test_mirror_equivalence_full_grid():
    cam = Camera.look_at((0.4, -0.3, 2.0), (0.1, 0.0, 0.0), 64, 64, 40.0)
    b = vs.camera_virtual_cones(geo.Plane(), cam)
    assert b.valid.all()
    mirrored = cam.origin * np.array([1, 1, -1.0])
    ii, jj = cam.pixel_grid()
    d = cam.directions(ii + 0.5, jj + 0.5)
    assert np.max(np.linalg.norm(b.apex - mirrored, axis=-1)) <= 1e-6
    md = d * np.array([1, 1, -1.0])
    assert np.max(np.arccos(np.clip(np.sum(b.axis * md, -1), -1, 1))) <= 1e-6
    assert np.max(np.abs(b.rdot / cam.rdot - 1)) <= 1e-6


def test_naive_apex_on_surface_curved_inside():
    cam = sphere_cam(32)
    sphere = geo.Sphere()
    naive = vs.camera_virtual_cones(sphere, cam, mode="naive")
    curved = vs.camera_virtual_cones(sphere, cam, mode="curved")
    assert np.max(np.abs(sphere(naive.apex[naive.valid]))) <= geo.DEFAULT_GEOMETRY.eps_hit
    np.testing.assert_allclose(naive.rdot[naive.valid], cam.rdot)
    cv = curved.valid & (curved.mode == vs.MODE_CURVED)
    assert cv.sum() > 100
    assert np.all(sphere(curved.apex[cv]) < 0)


def test_rdot_grows_with_curvature():
    cam = Camera.look_at((0, 0, 4.0), (0, 0, 0), 33, 33, 20.0, up=(0, 1, 0))
    rd = [vs.build_virtual_pixel(geo.Sphere((0, 0, 0), r), cam, (18, 16)).cone.rdot for r in (2.0, 1.0, 0.5, 0.25)]
    assert all(r >= 0 for r in rd)
    assert np.all(np.diff(rd) > 0)


def test_max_tangent_rule_not_below_mean():
    cam = sphere_cam(16)
    a = vs.camera_virtual_cones(geo.Ellipsoid((0, 0, 0), (1.0, 0.7, 0.5)), cam, radius_rule="mean_tangent")
    b = vs.camera_virtual_cones(geo.Ellipsoid((0, 0, 0), (1.0, 0.7, 0.5)), cam, radius_rule="max_tangent")
    ok = a.valid & b.valid
    assert np.all(b.rdot[ok] >= a.rdot[ok] - 1e-15)


def test_no_hit_raises():
    with pytest.raises(NoHit):
        vs.build_virtual_pixel(geo.Sphere((0, 0, 0), 0.1), sphere_cam(16), (0, 0))


def test_grazing_pixels_retry_or_drop():
    cam = sphere_cam(64)
    b = vs.camera_virtual_cones(geo.Sphere(), cam, rdot_scale=40.0)
    assert b.retries.max() >= 1
    assert np.all(b.retries <= vs.MAX_CORNER_RETRIES)
