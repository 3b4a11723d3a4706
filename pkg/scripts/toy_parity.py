#!/usr/bin/env python3
"""Train all three trunk variants on the toy scene and print the parity table.

Generates the 64x64 dataset on first use, fits each variant with the same
budget, and reports final full-validation PSNR/SSIM plus the collapsing
variants' gap to the full-resolution baseline.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from nflab.fields.config import NetworkConfig
from nflab.scenes import gen_dataset, load_blender
from nflab.trainer.loop import TrainConfig, Trainer

VARIANTS = (("nerf", 3), ("unerf-sub", 3), ("unerf-conv", 3))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="data/toy64",
                    help="dataset directory (generated if absent)")
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=48)
    args = ap.parse_args()

    scene = Path(args.scene)
    if not scene.exists():
        print(f"generating toy scene at {scene} ...", flush=True)
        gen_dataset(scene, splits={"train": 24, "val": 4, "test": 4},
                    width=64, height=64, n_samples=512)
    cams, imgs = load_blender(scene, "train", near=2.0, far=6.0)
    vcams, vimgs = load_blender(scene, "val", near=2.0, far=6.0)

    results = {}
    for variant, kernel in VARIANTS:
        net = NetworkConfig(variant=variant, kernel=kernel, width=args.width,
                            pos_freqs=4, dir_freqs=2, down_levels=3,
                            dtype="float32")
        tcfg = TrainConfig(iterations=args.iterations, rays_per_batch=64,
                           n_coarse=24, n_fine=48, lr_init=5e-3,
                           lr_final=5e-4, seed=args.seed, eval_every=0,
                           chunk=2048)
        trainer = Trainer(net, tcfg, cams, imgs, val_cameras=vcams,
                          val_images=vimgs)
        t0 = time.time()
        for _ in range(args.iterations):
            trainer.step()
        p, s = trainer.evaluate()
        results[variant] = (p, s)
        print(f"{variant:11s} val psnr {p:6.2f} dB  ssim {s:.4f}  "
              f"({time.time() - t0:.0f}s)", flush=True)

    base = results["nerf"][0]
    for variant in ("unerf-sub", "unerf-conv"):
        delta = results[variant][0] - base
        print(f"{variant} - nerf: {delta:+.2f} dB")
    return 0


if __name__ == "__main__":
    sys.exit(main())
