#!/usr/bin/env python3
"""Sweep the up-path interpolation strategies and write the comparison CSV.

Runs one collapsing-variant spec per strategy with an identical training
budget, then prints the per-strategy validation quality.
"""

import argparse
import csv
import io
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from nflab.bench import ExperimentSpec, interp_ablation
from nflab.fields.config import NetworkConfig
from nflab.scenes import gen_dataset


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="data/toy64",
                    help="dataset directory (generated if absent)")
    ap.add_argument("--out", default="interp_ablation.csv")
    ap.add_argument("--variant", default="unerf-sub",
                    choices=("unerf-sub", "unerf-conv"))
    ap.add_argument("--kernel", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--timed", action="store_true",
                    help="also measure median ms/iteration "
                         "(needs >= 250 iterations)")
    args = ap.parse_args()

    scene = Path(args.scene)
    if not scene.exists():
        print(f"generating toy scene at {scene} ...", flush=True)
        gen_dataset(scene, splits={"train": 24, "val": 4, "test": 4},
                    width=64, height=64, n_samples=512)

    spec = ExperimentSpec(spec_id=args.variant, variant=args.variant,
                          kernel=args.kernel, interp="position-aware",
                          n_coarse=24, n_fine=48, rays=64, scene=str(scene),
                          iterations=args.iterations, seed=args.seed)
    network = NetworkConfig(variant=args.variant, width=48, pos_freqs=4,
                            dir_freqs=2, down_levels=3, dtype="float32")
    text = interp_ablation([spec], network=network, timed=args.timed,
                           log=lambda m: print(m, flush=True))
    Path(args.out).write_text(text)
    print(f"wrote {args.out}")

    rows = list(csv.reader(io.StringIO(text)))
    header, data = rows[0], rows[1:]
    for row in data:
        interp = row[header.index("interp")]
        psnr = row[header.index("val_psnr")]
        ms = row[header.index("ms_per_iter_median")] or "-"
        print(f"{interp:15s} val psnr {float(psnr):6.2f} dB  "
              f"ms/iter {ms}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
