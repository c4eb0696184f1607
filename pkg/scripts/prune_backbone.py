#!/usr/bin/env python3
"""Greedy sub-block pruning sweep on the toy backbone.

Runs the search for a given budget, prints the removal order with the
per-step reconstruction deltas, and shows how detection outputs drift
from the unpruned model as sub-blocks come out.
"""

import argparse

from dart.model import build_model, toy_config
from dart.pipeline import PipelineConfig, PipelineLevel, run_batched
from dart.pruning import apply_plan, greedy_prune, PruningPlan
from dart.scenes import calibration_images, scene_images


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=2)
    parser.add_argument("--k", type=int, default=6)
    parser.add_argument("--calib", type=int, default=8)
    parser.add_argument("--jobs", type=int, default=None)
    parser.add_argument("--memoize", action="store_true")
    args = parser.parse_args()

    model = build_model(toy_config(seed=args.seed))
    calib = calibration_images(args.calib, image_size=model.config.image_size)
    plan = greedy_prune(model, calib, args.k, jobs=args.jobs, memoize=args.memoize)

    print(f"SBP-{args.k} on seed {args.seed} ({args.calib} calibration images)")
    print(f"{'step':>4} {'block':>5} {'kind':>5} {'delta':>12}")
    for i, step in enumerate(plan.steps):
        print(f"{i:>4} {step.sub_block.block:>5} {step.sub_block.kind:>5} {step.delta:>12.4f}")
    print(f"deltas non-decreasing: {plan.deltas_non_decreasing()}")

    cfg = PipelineConfig.for_level(PipelineLevel.BATCHED_DET_ONLY)
    classes = ["person", "car", "dog", "cat"]
    scene = scene_images(1, seed=500, num_classes=len(classes))[0]
    baseline = run_batched(model, scene, classes, cfg)
    print(f"\nqualitative drift on one scene ({len(classes)} classes)")
    print(f"{'removed':>8} {'detections':>11} {'identical to unpruned':>22}")
    for k in range(args.k + 1):
        partial = PruningPlan(plan.steps[:k], plan.protected, plan.model_seed, plan.calib_fingerprint)
        dets = run_batched(apply_plan(model, partial), scene, classes, cfg)
        print(f"{k:>8} {len(dets):>11} {str(dets == baseline):>22}")


if __name__ == "__main__":
    main()
