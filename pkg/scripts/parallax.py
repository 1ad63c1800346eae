"""Disparity of the occluder versus the background in translated novel views of a fitted field.

    python3 scripts/parallax.py --scene scenes/sphere_dome.toml --field runs/main/run/field.envf
"""

import argparse

from glosscam.env_field import load_field
from glosscam.parallax import translated_pair
from glosscam.scene import load_scene


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scene", default="scenes/sphere_dome.toml")
    p.add_argument("--field", required=True)
    p.add_argument("--baselines", type=float, nargs="+", default=[0.2, 0.3, 0.4, 0.5])
    p.add_argument("--size", type=int, default=96)
    args = p.parse_args()

    scene = load_scene(args.scene)
    field = load_field(args.field)
    print("baseline  occluder_px  background_px  gt_background_px  revealed_px  revealed_ssim")
    for b in args.baselines:
        r = translated_pair(scene, field, baseline=b, size=args.size)
        print(f"{b:8.2f}  {r.occluder_shift:11.2f}  {r.background_shift:13.2f}  {r.gt_background_shift:16.2f}"
              f"  {r.revealed_pixels:11d}  {r.revealed_ssim:13.3f}")


if __name__ == "__main__":
    main()
