#!/usr/bin/env python3
"""Print the analytic latency tables from the shipped timing presets.

Covers the five-level cumulative hierarchy at 3 classes, the per-class
latency breakdown with pipelining bounds, and a frame-rate-vs-classes
sweep suitable for external plotting.
"""

import argparse

from dart.scheduler import (
    PRESETS,
    class_scaling_reproduction,
    hierarchy_reproduction,
    latency_level,
    LatencyLevel,
    pipelined_fps_bound,
    simulate_pipeline,
)

LEVEL_NAMES = {
    0: "naive (N full passes)",
    1: "shared backbone",
    2: "+ batched + det-only",
    3: "+ compiled backbone",
    4: "+ compiled enc-dec + pipeline",
}


def print_hierarchy():
    result = hierarchy_reproduction()
    print(f"Cumulative optimization hierarchy ({result['classes']} classes)")
    print(f"{'lvl':>3} {'optimization':<32} {'ms':>7} {'ref ms':>7} {'speedup':>8}")
    for row in result["rows"]:
        print(
            f"{row['level']:>3} {LEVEL_NAMES[row['level']]:<32} {row['ms']:>7.1f} "
            f"{row['reference_ms']:>7.1f} {row['speedup']:>7.1f}x"
        )
    overhead = result["rows"][4]["calibrated_overhead_ms"]
    print(f"level-4 pipelining overhead calibrated to {overhead:.1f} ms\n")


def print_class_scaling():
    result = class_scaling_reproduction()
    print(f"Latency breakdown by class count (profile {result['profile']})")
    header = f"{'N':>3} {'BB ms':>7} {'E-D ms':>7} {'sum ms':>7} {'seq fps':>8} {'bound':>7} {'sim':>7} {'observed':>9}"
    print(header)
    for row in result["rows"]:
        print(
            f"{row['n']:>3} {row['bb_ms']:>7.1f} {row['ed_ms']:>7.1f} {row['sum_ms']:>7.1f} "
            f"{row['seq_fps']:>8.1f} {row['pipe_bound_fps']:>7.1f} {row['simulated_pipe_fps']:>7.1f} "
            f"{row['observed_pipe_fps']:>9.1f}"
        )
    print()


def print_fps_vs_classes(preset_name: str, max_classes: int):
    profile = PRESETS[preset_name]
    print(f"Frame rate vs class count (profile {preset_name}; table for external plotting)")
    print(f"{'N':>3} {'seq fps':>8} {'pipe bound':>11} {'pipe sim':>9}")
    for n in range(1, max_classes + 1):
        seq = 1000.0 / latency_level(profile, LatencyLevel.COMPILED_PIPELINE, n)
        bound = pipelined_fps_bound(profile, n)
        sim = simulate_pipeline(profile, n, 100).achieved_fps
        print(f"{n:>3} {seq:>8.1f} {bound:>11.1f} {sim:>9.1f}")
    print()


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", default="paper-trt-1008", choices=sorted(PRESETS))
    parser.add_argument("--max-classes", type=int, default=8)
    args = parser.parse_args()
    print_hierarchy()
    print_class_scaling()
    print_fps_vs_classes(args.preset, args.max_classes)
