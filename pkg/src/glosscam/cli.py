"""Command-line entry point: ``python -m glosscam <command> ...``.

Exit codes: 0 success, 2 configuration or schema error, 3 non-finite loss,
4 insufficient baseline, 5 checkpoint error, 6 scene hash mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .errors import (CheckpointError, ConfigError, InsufficientBaseline, MissingLayer, NonFiniteLoss,
                     SceneHashMismatch)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_CODES = (
    (ConfigError, 2),
    (MissingLayer, 2),
    (tomllib.TOMLDecodeError, 2),
    (NonFiniteLoss, 3),
    (InsufficientBaseline, 4),
    (CheckpointError, 5),
    (SceneHashMismatch, 6),
)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def load_camera(path):
    """Camera from a JSON pose file.

    Accepts ``Camera.to_dict`` output, a dataset manifest record
    (``c2w`` plus ``intrinsics``) or a look-at description
    (``position``, ``look_at``, ``width``, ``height``, ``fov_deg``, ``up``).
    """
    from .camera import Camera

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"camera file not found: {path}", "camera")
    try:
        d = json.loads(path.read_text())
        if "intrinsics" in d:
            d = {**d["intrinsics"], "c2w": d["c2w"]}
        return Camera.from_dict(d)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad camera file {path}: {exc}", "camera") from exc


def _scene_for_dataset(ds, scene_arg):
    from .scene import load_scene

    if scene_arg is not None:
        path = Path(scene_arg)
    elif ds.scene_path:
        path = Path(ds.scene_path)
        if not path.is_absolute():
            path = ds.root / path
    else:
        raise ConfigError("dataset manifest names no scene file; pass --scene", "scene")
    scene = load_scene(path)
    if ds.scene_hash and scene.hash != ds.scene_hash:
        raise SceneHashMismatch(f"scene {path} hash {scene.hash[:12]} does not match dataset {ds.scene_hash[:12]}")
    return scene


def cmd_gen_dataset(args) -> int:
    from .dataset import generate_dataset
    from .scene import load_scene

    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rel = os.path.relpath(Path(args.scene).resolve(), out.resolve())
    ds = generate_dataset(scene, out, views=args.views, seed=args.seed, png=args.png, scene_path=rel)
    _log(f"wrote {len(ds)} views to {out}")
    return 0


def cmd_fit(args) -> int:
    from .dataset import load_dataset
    from .optim import EvalConfig, FitConfig, run_fit

    ds = load_dataset(args.dataset)
    scene = _scene_for_dataset(ds, args.scene)
    cfg = FitConfig.load(args.config) if args.config else FitConfig()
    eval_cfg = EvalConfig.load(args.config) if args.config else EvalConfig()
    result, metrics = run_fit(scene, ds, cfg, args.out, eval_cfg, resume=args.resume, stop_at=args.stop_at,
                              force=args.force, log=None if args.quiet else _log)
    if metrics is None:
        _log(f"stopped at iteration {len(result.loss_curve)}; resume with --resume")
    else:
        for k, v in metrics.flat().items():
            print(f"{k} = {v!r}")
    return 0


def cmd_evaluate(args) -> int:
    from .dataset import load_dataset
    from .metrics import write_report
    from .optim import EvalConfig, evaluate, load_run

    ds = load_dataset(args.dataset)
    scene = _scene_for_dataset(ds, args.scene)
    result, cfg = load_run(args.run, scene)
    eval_cfg = EvalConfig.load(args.config) if args.config else EvalConfig()
    _, test = ds.split(cfg.holdout_every)
    metrics = evaluate(scene, result, cfg, test, eval_cfg.cameras(scene), eval_cfg.n_samples)
    out = Path(args.out) if args.out else Path(args.run) / "evaluation.json"
    write_report(out, metrics, {"scene_hash": ds.scene_hash, "heldout_views": [v.index for v in test]})
    for k, v in metrics.flat().items():
        print(f"{k} = {v!r}")
    return 0


def _render(args, write_rgb: bool) -> int:
    from .env_field import load_field, render_novel_view
    from .imageio import write_pfm, write_png

    field = load_field(args.field)
    cam = load_camera(args.camera)
    rgb, depth = render_novel_view(field, cam, args.samples, near=args.near, depth_mode=args.depth_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if write_rgb:
        write_pfm(out / "rgb.pfm", rgb)
        write_png(out / "rgb.png", rgb)
    write_pfm(out / "depth.pfm", depth)
    finite = np.isfinite(depth)
    scale = float(depth[finite].max()) if finite.any() and depth[finite].max() > 0 else 1.0
    write_png(out / "depth.png", np.where(finite, depth / scale, 0.0), gamma=1.0)
    _log(f"wrote {out}")
    return 0


def cmd_render_novel(args) -> int:
    return _render(args, True)


def cmd_render_depth(args) -> int:
    return _render(args, False)


CAUSTIC_HEADER = ("x", "y", "z", "dx", "dy", "dz", "rdot", "residual", "mode")


def cmd_export_caustic(args) -> int:
    from .scene import load_scene
    from .virtual_sensor import MODE_NAMES, camera_virtual_cones

    scene = load_scene(args.scene)
    cam = load_camera(args.camera)
    if args.rdot_scale <= 0:
        raise ConfigError("must be positive", "rdot-scale")
    b = camera_virtual_cones(scene.sdf, cam, mode=args.mode, rdot_scale=args.rdot_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CAUSTIC_HEADER)
        for i in np.flatnonzero(b.valid):
            w.writerow([*(repr(float(x)) for x in b.apex[i]), *(repr(float(x)) for x in b.axis[i]),
                        repr(float(b.rdot[i])), repr(float(b.residual[i])), MODE_NAMES[int(b.mode[i])]])
    _log(f"wrote {int(b.valid.sum())} virtual cameras to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glosscam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="render a multi-view dataset from a scene file")
    g.add_argument("--scene", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=None, help="number of rig views (default: the scene's)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--png", action="store_true", help="also write tone-mapped PNG previews")
    g.set_defaults(func=cmd_gen_dataset)

    f = sub.add_parser("fit", help="fit the environment field and albedo to a dataset")
    f.add_argument("--dataset", required=True)
    f.add_argument("--config", default=None, help="TOML file with [fit] and optional [eval] tables")
    f.add_argument("--out", required=True)
    f.add_argument("--scene", default=None, help="scene file (default: the one named in the manifest)")
    f.add_argument("--force", action="store_true", help="fit even when the views lack baseline")
    f.add_argument("--resume", action="store_true", help="continue from out/state.npz")
    f.add_argument("--stop-at", type=int, default=None, help="stop after this many iterations")
    f.add_argument("--quiet", action="store_true")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="recompute held-out and novel-view metrics of a run")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--scene", default=None)
    e.add_argument("--config", default=None, help="TOML file with an [eval] table")
    e.add_argument("--out", default=None, help="report path (default: run/evaluation.json)")
    e.set_defaults(func=cmd_evaluate)

    for name, func, text in (("render-novel", cmd_render_novel, "render colour and depth from a field checkpoint"),
                             ("render-depth", cmd_render_depth, "render depth from a field checkpoint")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--field", required=True)
        r.add_argument("--camera", required=True, help="JSON pose file")
        r.add_argument("--out", required=True, help="output directory")
        r.add_argument("--near", type=float, default=0.0)
        r.add_argument("--samples", type=int, default=128)
        r.add_argument("--depth-mode", choices=("z", "ray"), default="z",
                       help="depth along the optical axis or along each pixel ray")
        r.set_defaults(func=func)

    c = sub.add_parser("export-caustic", help="write per-pixel virtual cameras as a CSV point cloud")
    c.add_argument("--scene", required=True)
    c.add_argument("--camera", required=True, help="JSON pose file")
    c.add_argument("--out", required=True)
    c.add_argument("--mode", choices=("curved", "naive"), default="curved")
    c.add_argument("--rdot-scale", type=float, default=1.0)
    c.set_defaults(func=cmd_export_caustic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .env_field import configure_threads

    warnings.filterwarnings("ignore", message="The TBB threading layer")
    configure_threads()
    try:
        return args.func(args)
    except tuple(cls for cls, _ in EXIT_CODES) as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                _log(f"error: {exc}")
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
