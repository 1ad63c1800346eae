"""Multi-view datasets: rendered layers on disk plus a JSON manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .camera import Camera
from .errors import ConfigError, MissingLayer
from .imageio import layer_name, read_pfm, write_pfm, write_png
from .rendering import LAYERS, render_forward

MANIFEST = "manifest.json"


@dataclass
class View:
    index: int
    camera: Camera
    files: dict
    root: Path
    _cache: dict = field(default_factory=dict, repr=False)

    def layer(self, name: str) -> np.ndarray:
        if name not in self._cache:
            if name not in self.files:
                raise MissingLayer(f"view {self.index} has no layer {name!r}")
            path = self.root / self.files[name]
            if not path.is_file():
                raise MissingLayer(f"missing layer file {path}")
            self._cache[name] = read_pfm(path).astype(np.float64)
        return self._cache[name]

    def layers(self) -> dict:
        return {k: self.layer(k) for k in self.files}


@dataclass
class Dataset:
    root: Path
    views: list
    scene_hash: str
    seed: int
    scene_path: str | None = None
    generator: str = ""

    def __len__(self):
        return len(self.views)

    def split(self, holdout_every: int = 8) -> tuple[list, list]:
        """Views ``i`` with ``i % holdout_every == holdout_every - 1`` are held out."""
        if holdout_every <= 1 or len(self.views) < holdout_every:
            return list(self.views), []
        test = [v for v in self.views if v.index % holdout_every == holdout_every - 1]
        train = [v for v in self.views if v.index % holdout_every != holdout_every - 1]
        return train, test


def camera_record(cam: Camera) -> dict:
    return {
        "c2w": [list(map(float, row)) for row in cam.c2w],
        "intrinsics": {
            "width": cam.width, "height": cam.height, "fx": cam.fx, "fy": cam.fy,
            "cx": cam.cx, "cy": cam.cy, "pixel_pitch": cam.pixel_pitch,
        },
    }


def camera_from_record(rec: dict) -> Camera:
    return Camera.from_dict({**rec["intrinsics"], "c2w": rec["c2w"]})


def generate_dataset(scene, out_dir, views: int | None = None, seed: int = 0, png: bool = False,
                     scene_path: str | None = None) -> Dataset:
    """Render every layer of every rig view and write the manifest.

    Per-view sub-pixel jitter is seeded by ``(seed, view)``, so output bytes
    depend only on the scene and the seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cams = scene.cameras(views)
    records = []
    for i, cam in enumerate(cams):
        layers = render_forward(scene, cam, seed=[int(seed), i])
        files = {}
        for name in LAYERS:
            files[name] = layer_name(name, i, "pfm")
            write_pfm(out / files[name], layers[name])
            if png and name in ("mixed", "diffuse_gt", "specular_gt"):
                write_png(out / layer_name(name, i, "png"), layers[name])
        records.append({"index": i, **camera_record(cam), "files": files})
    manifest = {
        "generator": f"glosscam {__version__}",
        "version": 1,
        "scene_hash": scene.hash,
        "scene_path": scene_path,
        "seed": int(seed),
        "layers": list(LAYERS),
        "views": records,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return load_dataset(out)


def load_dataset(root, check_files: bool = True) -> Dataset:
    root = Path(root)
    path = root / MANIFEST if root.is_dir() else root
    root = path.parent
    if not path.is_file():
        raise ConfigError(f"no manifest at {path}", "dataset")
    try:
        m = json.loads(path.read_text())
        views = []
        for rec in m["views"]:
            cam = camera_from_record(rec)
            v = View(int(rec["index"]), cam, dict(rec["files"]), root)
            views.append(v)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed manifest: {exc}", "dataset") from exc
    if check_files:
        for v in views:
            for name, fname in v.files.items():
                p = root / fname
                if not p.is_file():
                    raise MissingLayer(f"manifest lists missing file {p}")
                head = p.read_bytes()[:64].split(b"\n")
                w, h = map(int, head[1].split())
                if (w, h) != (v.camera.width, v.camera.height):
                    raise ConfigError(f"{p}: resolution {w}x{h} does not match the camera", "dataset")
    return Dataset(root, views, m.get("scene_hash", ""), int(m.get("seed", 0)), m.get("scene_path"), m.get("generator", ""))
