#!/usr/bin/env python3
"""Half-precision degradation sweep over backbone depth.

Builds freshly seeded toy backbones, truncates them to each requested
depth, and compares level-0 pyramid features under both emulated half
modes against the full-precision reference (mean cosine per seed).
"""

import argparse

import numpy as np

from dart.model import build_model, toy_config
from dart.pipeline import STUDY_MODES, precision_study
from dart.scenes import scene_images


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--depths", default="2,4,8")
    parser.add_argument("--images", type=int, default=5)
    parser.add_argument("--base-seed", type=int, default=0)
    args = parser.parse_args()

    depths = [int(d) for d in args.depths.split(",")]
    images = scene_images(args.images, seed=9000, num_classes=4)
    per_mode = {mode.value: {d: [] for d in depths} for mode in STUDY_MODES}
    for s in range(args.seeds):
        model = build_model(toy_config(seed=args.base_seed + s))
        report = precision_study(model, images, depths)
        for depth, mode, cosine in report.rows:
            per_mode[mode][depth].append(cosine)

    print(f"mean level-0 feature cosine vs full precision ({args.seeds} seeds, {args.images} images)")
    print(f"{'depth':>5} " + " ".join(f"{m:>18}" for m in per_mode))
    for d in depths:
        cells = " ".join(f"{np.mean(per_mode[m][d]):>18.8f}" for m in per_mode)
        print(f"{d:>5} {cells}")

    fused, generic = (m.value for m in STUDY_MODES)
    deepest = max(depths)
    hits = sum(
        1
        for i in range(args.seeds)
        if per_mode[generic][deepest][i] < per_mode[fused][deepest][i]
    )
    print(f"\nper-step rounding below accumulation-safe rounding in {hits}/{args.seeds} seeds at depth {deepest}")


if __name__ == "__main__":
    main()
