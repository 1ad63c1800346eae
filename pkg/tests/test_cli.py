import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from glosscam import cli
from glosscam.camera import Camera
from glosscam.env_field import EnvField, save_field
from glosscam.imageio import read_pfm
from glosscam.optim import FitProblem, read_loss_curve
from glosscam.scene import load_scene

ROOT = Path(__file__).resolve().parents[1]

SCENE = """version = "1"

[object]
type = "sphere"
radius = 1.0
rho_s = 0.8
albedo = [0.2, 0.15, 0.1]

[[environment]]
type = "dome"
radius = 5.0
texture = { type = "smooth", seed = 3 }

[cameras]
count = 8
radius = 3.5
elevation = 20.0
fov = 40.0

[render]
width = 20
height = 20
"""

FIT = """[fit]
iterations = 30
batch_size = 256
resolution = 12
n_samples = 16
sh_degree = 0
opaque_far = true
fit_direct = true
tv_weight = 0.0
lr_density = 0.1

[eval]
n_samples = 16
novel_size = 16
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "scene.toml").write_text(SCENE)
    (tmp_path / "fit.toml").write_text(FIT)
    assert run("gen-dataset", "--scene", tmp_path / "scene.toml", "--out", tmp_path / "ds", "--seed", 1) == 0
    return tmp_path


def write_camera(path, cam: Camera):
    path.write_text(json.dumps(cam.to_dict()))
    return path


def test_fit_success_writes_artefacts(workdir):
    out = workdir / "run"
    assert run("fit", "--dataset", workdir / "ds", "--config", workdir / "fit.toml", "--out", out, "--quiet") == 0
    for name in ("field.envf", "albedo.pfm", "albedo.png", "loss_curve.csv", "fit.json", "report.json", "report.txt"):
        assert (out / name).is_file(), name
    assert len(read_loss_curve(out / "loss_curve.csv")) == 30
    assert run("evaluate", "--run", out, "--dataset", workdir / "ds") == 0
    assert (out / "evaluation.json").is_file()


def test_fit_is_idempotent(workdir):
    args = ["fit", "--dataset", workdir / "ds", "--config", workdir / "fit.toml", "--quiet"]
    assert run(*args, "--out", workdir / "a") == 0
    assert run(*args, "--out", workdir / "b") == 0
    for name in ("loss_curve.csv", "field.envf", "report.json", "albedo.pfm"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes(), name


def test_resume_reproduces_uninterrupted_run(workdir):
    args = ["fit", "--dataset", workdir / "ds", "--config", workdir / "fit.toml", "--quiet"]
    assert run(*args, "--out", workdir / "full") == 0
    assert run(*args, "--out", workdir / "part", "--stop-at", 12) == 0
    assert not (workdir / "part" / "report.json").exists()
    assert run(*args, "--out", workdir / "part", "--resume") == 0
    full = read_loss_curve(workdir / "full" / "loss_curve.csv")
    part = read_loss_curve(workdir / "part" / "loss_curve.csv")
    assert full.tobytes() == part.tobytes()


def test_single_view_exit_4_unless_forced(workdir):
    assert run("gen-dataset", "--scene", workdir / "scene.toml", "--out", workdir / "one", "--views", 1) == 0
    args = ["fit", "--dataset", workdir / "one", "--config", workdir / "fit.toml", "--quiet", "--out", workdir / "r"]
    assert run(*args) == 4
    with pytest.warns(UserWarning):
        assert run(*args, "--force") == 0


def test_non_finite_exit_3(workdir, monkeypatch):
    monkeypatch.setattr(FitProblem, "loss_and_grads", lambda self, *a, **k: (float("inf"), {}))
    assert run("fit", "--dataset", workdir / "ds", "--config", workdir / "fit.toml", "--out", workdir / "r",
               "--quiet") == 3


def test_scene_hash_mismatch_exit_6(workdir):
    (workdir / "scene.toml").write_text(SCENE.replace("rho_s = 0.8", "rho_s = 0.7"))
    assert run("fit", "--dataset", workdir / "ds", "--config", workdir / "fit.toml", "--out", workdir / "r") == 6


def test_schema_error_exit_2(tmp_path):
    (tmp_path / "bad.toml").write_text(SCENE.replace("radius = 1.0", "radius = -1.0"))
    assert run("gen-dataset", "--scene", tmp_path / "bad.toml", "--out", tmp_path / "ds") == 2
    (tmp_path / "fit.toml").write_text("[fit]\nlr_field = -1.0\n")
    (tmp_path / "ok.toml").write_text(SCENE)
    assert run("gen-dataset", "--scene", tmp_path / "ok.toml", "--out", tmp_path / "ds", "--views", 2) == 0
    assert run("fit", "--dataset", tmp_path / "ds", "--config", tmp_path / "fit.toml", "--out", tmp_path / "r") == 2
    cam = tmp_path / "cam.json"
    cam.write_text("{not json")
    assert run("export-caustic", "--scene", tmp_path / "ok.toml", "--camera", cam, "--out", tmp_path / "c.csv") == 2


def test_module_entry_point_exit_code(tmp_path):
    (tmp_path / "bad.toml").write_text(SCENE.replace('type = "sphere"', 'type = "torus"'))
    p = subprocess.run([sys.executable, "-m", "glosscam", "gen-dataset", "--scene", str(tmp_path / "bad.toml"),
                        "--out", str(tmp_path / "ds")], capture_output=True, text=True)
    assert p.returncode == 2
    assert "line 4" in p.stderr


# ---------------------------------------------------------------- novel views

def wall_checkpoint(path):
    """Opaque constant-colour wall filling the plane z >= 1.5."""
    f = EnvField.create(65, [-2, -2, -1], [2, 2, 3], sh_degree=0, init_rgb=(0.3, 0.6, 0.9))
    z = f.grid_points()[..., 2]
    f.density[:] = np.where(z >= 1.5 - 1e-9, 1e4, -1e4)
    save_field(f, path)
    return 1.5 - 0.5 * f.voxel_size[2]


def test_render_depth_of_wall_is_constant(tmp_path):
    wall = wall_checkpoint(tmp_path / "wall.envf")
    cam = write_camera(tmp_path / "cam.json", Camera.look_at([0.1, -0.2, 0], [0.1, -0.2, 1], 32, 32, 40, up=(0, 1, 0)))
    n = 512
    assert run("render-depth", "--field", tmp_path / "wall.envf", "--camera", cam, "--out", tmp_path / "d",
               "--samples", n) == 0
    depth = read_pfm(tmp_path / "d" / "depth.pfm")
    assert not (tmp_path / "d" / "rgb.pfm").exists()
    # wider edge footprints see the wall a little early, so allow 1.5 sample spacings
    spacing = 3.2 / n
    assert np.ptp(depth) <= 1.5 * spacing
    assert depth.mean() == pytest.approx(wall, abs=2 * spacing)
    assert run("render-novel", "--field", tmp_path / "wall.envf", "--camera", cam, "--out", tmp_path / "n") == 0
    rgb = read_pfm(tmp_path / "n" / "rgb.pfm")
    np.testing.assert_allclose(rgb, np.broadcast_to([0.3, 0.6, 0.9], rgb.shape), atol=2e-3)


def test_render_checkpoint_errors_exit_5(tmp_path):
    wall_checkpoint(tmp_path / "wall.envf")
    cam = write_camera(tmp_path / "cam.json", Camera.look_at([0, 0, 0], [0, 0, 1], 8, 8, 40, up=(0, 1, 0)))
    assert run("render-novel", "--field", tmp_path / "missing.envf", "--camera", cam, "--out", tmp_path / "o") == 5
    data = bytearray((tmp_path / "wall.envf").read_bytes())
    data[4:8] = (99).to_bytes(4, "little")
    (tmp_path / "v99.envf").write_bytes(bytes(data))
    assert run("render-novel", "--field", tmp_path / "v99.envf", "--camera", cam, "--out", tmp_path / "o") == 5


# ---------------------------------------------------------------- caustic export

def read_caustic(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0].keys()) == ["x", "y", "z", "dx", "dy", "dz", "rdot", "residual", "mode"]
    return rows, np.array([[float(r[k]) for k in ("x", "y", "z")] for r in rows])


def test_plane_caustic_is_mirrored_camera(tmp_path):
    scene = load_scene(ROOT / "scenes" / "mirror_plane.toml")
    cam = scene.cameras()[1]
    path = write_camera(tmp_path / "cam.json", cam)
    assert run("export-caustic", "--scene", ROOT / "scenes" / "mirror_plane.toml", "--camera", path,
               "--out", tmp_path / "c.csv") == 0
    rows, pts = read_caustic(tmp_path / "c.csv")
    mirrored = cam.origin * np.array([1, 1, -1])
    assert len(rows) > 0.5 * cam.width * cam.height
    np.testing.assert_allclose(pts, np.broadcast_to(mirrored, pts.shape), atol=1e-9)
    assert {r["mode"] for r in rows} == {"planar"}


def test_sphere_caustic_lies_inside(tmp_path):
    scene_path = ROOT / "scenes" / "sphere_dome.toml"
    scene = load_scene(scene_path)
    cam = Camera.look_at([0.0, -3.5, 1.0], [0, 0, 0], 24, 24, 40)
    path = write_camera(tmp_path / "cam.json", cam)
    out = tmp_path / "c.csv"
    assert run("export-caustic", "--scene", scene_path, "--camera", path, "--out", out) == 0
    first = out.read_bytes()
    rows, pts = read_caustic(out)
    assert len(rows) > 50
    assert np.all(np.linalg.norm(pts, axis=1) < 1.0)
    assert np.all(scene.sdf(pts) < 0)
    assert run("export-caustic", "--scene", scene_path, "--camera", path, "--out", out) == 0
    assert out.read_bytes() == first
