"""Curved versus naive virtual cones under identical seeds: held-out specular PSNR.

    python3 scripts/ablation.py --scene scenes/sphere_ablation.toml --out runs/ablation
"""

import argparse
from pathlib import Path

from glosscam.dataset import generate_dataset
from glosscam.optim import EvalConfig, FitConfig, run_fit
from glosscam.scene import load_scene


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scene", default="scenes/sphere_ablation.toml")
    p.add_argument("--config", default="configs/fit_sphere.toml")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    out = Path(args.out)
    scene = load_scene(args.scene)
    ds = generate_dataset(scene, out / "dataset", seed=args.seed)
    base = FitConfig.load(args.config)
    psnr = {}
    for cone in ("curved", "naive"):
        cfg = FitConfig.from_dict({**base.to_dict(), "cone": cone})
        _, m = run_fit(scene, ds, cfg, out / cone, EvalConfig.load(args.config))
        psnr[cone] = m.layers["specular"].psnr
        print(f"{cone:7s} " + "  ".join(f"{k} {v:.3f}" for k, v in m.flat().items() if k.endswith("psnr")))
    print(f"specular gap (curved - naive): {psnr['curved'] - psnr['naive']:.2f} dB")


if __name__ == "__main__":
    main()
