"""End-to-end roundtrip: render a dataset, fit the field, report held-out and beyond-FoV metrics.

    python3 scripts/roundtrip.py --scene scenes/sphere_dome.toml --config configs/fit_sphere.toml --out runs/main
"""

import argparse
import json
from pathlib import Path

from glosscam.dataset import generate_dataset
from glosscam.optim import EvalConfig, FitConfig, run_fit
from glosscam.parallax import translated_pair
from glosscam.scene import load_scene


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scene", default="scenes/sphere_dome.toml")
    p.add_argument("--config", default="configs/fit_sphere.toml")
    p.add_argument("--out", default="runs/main")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline", type=float, default=0.4, help="translation between the parallax views")
    args = p.parse_args()

    out = Path(args.out)
    scene = load_scene(args.scene)
    ds = generate_dataset(scene, out / "dataset", seed=args.seed)
    result, metrics = run_fit(scene, ds, FitConfig.load(args.config), out / "run", EvalConfig.load(args.config), log=print)
    for k, v in metrics.flat().items():
        print(f"{k} = {v:.4f}")
    par = translated_pair(scene, result.field, baseline=args.baseline)
    (out / "run" / "parallax.json").write_text(json.dumps(par.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(par.to_dict(), indent=2))


if __name__ == "__main__":
    main()
