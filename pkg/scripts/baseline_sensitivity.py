"""Beyond-FoV novel-view PSNR as a function of the number of training views.

    python3 scripts/baseline_sensitivity.py --views 1 5 20 --out runs/baseline
"""

import argparse
import dataclasses
import warnings
from pathlib import Path

import numpy as np

from glosscam.dataset import generate_dataset
from glosscam.env_field import render_novel_view
from glosscam.metrics import psnr
from glosscam.optim import EvalConfig, FitConfig, fit, gt_environment_view, novel_near
from glosscam.scene import load_scene


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scene", default="scenes/sphere_ablation.toml")
    p.add_argument("--config", default="configs/fit_sphere.toml")
    p.add_argument("--views", type=int, nargs="+", default=[1, 5, 20])
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--out", default="runs/baseline")
    args = p.parse_args()

    scene = load_scene(args.scene)
    ds = generate_dataset(scene, Path(args.out) / "dataset", seed=0)
    cfg = dataclasses.replace(FitConfig.load(args.config), iterations=args.iterations)
    cams = EvalConfig.load(args.config).cameras(scene)
    # spread the chosen views around the orbit
    for n in args.views:
        idx = np.linspace(0, len(ds.views), n, endpoint=False).astype(int)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = fit(scene, [ds.views[i] for i in idx], cfg, force=True)
        scores = []
        for cam in cams:
            img, _ = render_novel_view(res.field, cam, 64, near=novel_near(scene, cam))
            scores.append(psnr(np.clip(img, 0, 1), np.clip(gt_environment_view(scene, cam), 0, 1)))
        note = " (insufficient baseline)" if any("spread" in str(w.message) for w in caught) else ""
        print(f"{n:3d} views: beyond-FoV PSNR {np.mean(scores):.2f} dB, spread {res.info['baseline_spread']:.3f}{note}")


if __name__ == "__main__":
    main()
