"""Analytic two-stage latency model and inter-frame pipeline simulator.

Timing profiles are inputs (files or shipped presets), never host
measurements, so the reference tables reproduce identically on any
machine.  The simulator models the backbone and the encoder-decoder as
two serially reusable stages; consecutive invocations of a stage are
separated by the profile's pipelining overhead (the per-frame
scheduling cost), which yields the closed form

    steady-state per-frame latency = max(t_bb, t_ed(N)) + overhead
    makespan = t_bb + t_ed(N) + (frames - 1) * steady_state

and therefore achieved FPS <= 1000 / max(t_bb, t_ed(N)), with equality
exactly when the overhead is zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum


class ProfileError(ValueError):
    """A timing profile is malformed or does not cover the request."""


@dataclass(frozen=True)
class TimingProfile:
    t_bb: float
    t_ed: tuple[tuple[int, float], ...]  # (class count, ms), ascending
    t_mask: float = 0.0
    t_other: float = 0.0
    overhead: float = 0.0
    name: str = ""

    def __post_init__(self) -> None:
        if min(self.t_bb, self.t_mask, self.t_other, self.overhead) < 0:
            raise ProfileError("profile timings must be non-negative")
        if not self.t_ed:
            raise ProfileError("profile needs at least one (N, ms) encoder-decoder entry")
        ns = [n for n, _ in self.t_ed]
        ms = [m for _, m in self.t_ed]
        if ns != sorted(ns) or len(set(ns)) != len(ns):
            raise ProfileError("t_ed table must have strictly increasing class counts")
        if any(m < 0 for m in ms):
            raise ProfileError("t_ed entries must be non-negative")
        if any(a > b for a, b in zip(ms, ms[1:])):
            raise ProfileError("t_ed must be non-decreasing in the class count")

    def ed_ms(self, n: int) -> float:
        """Encoder-decoder time at n classes; linear interpolation between
        tabulated counts, extrapolation refused."""
        if n < 1:
            raise ProfileError(f"class count must be >= 1, got {n}")
        ns = [x for x, _ in self.t_ed]
        if n < ns[0] or n > ns[-1]:
            raise ProfileError(
                f"profile {self.name or '(unnamed)'} covers N in [{ns[0]}, {ns[-1]}], requested {n}"
            )
        for (n0, m0), (n1, m1) in zip(self.t_ed, self.t_ed[1:]):
            if n0 <= n <= n1:
                if n == n0:
                    return m0
                return m0 + (m1 - m0) * (n - n0) / (n1 - n0)
        return self.t_ed[-1][1]

    def to_dict(self) -> dict:
        return {
            "t_bb": self.t_bb,
            "t_ed": [list(e) for e in self.t_ed],
            "t_mask": self.t_mask,
            "t_other": self.t_other,
            "overhead": self.overhead,
        }


def profile_to_json(profile: TimingProfile) -> str:
    return json.dumps(profile.to_dict(), indent=2)


def profile_from_json(text: str, name: str = "") -> TimingProfile:
    doc = json.loads(text)
    return TimingProfile(
        t_bb=doc["t_bb"],
        t_ed=tuple((int(n), float(m)) for n, m in doc["t_ed"]),
        t_mask=doc.get("t_mask", 0.0),
        t_other=doc.get("t_other", 0.0),
        overhead=doc.get("overhead", 0.0),
        name=name,
    )


class LatencyLevel(Enum):
    """The deployment ladder; each rung keeps everything below it."""

    NAIVE = 0
    SHARED_BACKBONE = 1
    BATCHED_DET_ONLY = 2
    COMPILED_BACKBONE = 3
    COMPILED_PIPELINE = 4


def latency_level(profile: TimingProfile, level: LatencyLevel, n: int, pipelined: bool = False) -> float:
    """Per-frame latency (ms) of one deployment level at n classes.

    Levels 3 and 4 reuse the batched formula; the caller expresses the
    compiled stages by handing in the corresponding profile.  Only level
    4 supports ``pipelined``.
    """
    if n < 1:
        raise ProfileError(f"class count must be >= 1, got {n}")
    if pipelined and level is not LatencyLevel.COMPILED_PIPELINE:
        raise ProfileError(f"level {level.name} has no pipelined variant")
    per_class = profile.ed_ms(1) + profile.t_mask + profile.t_other if level in (
        LatencyLevel.NAIVE,
        LatencyLevel.SHARED_BACKBONE,
    ) else None
    if level is LatencyLevel.NAIVE:
        return n * (profile.t_bb + per_class)
    if level is LatencyLevel.SHARED_BACKBONE:
        return profile.t_bb + n * per_class
    if pipelined:
        return max(profile.t_bb, profile.ed_ms(n)) + profile.overhead
    return profile.t_bb + profile.ed_ms(n) + profile.t_other


def pipelined_fps_bound(profile: TimingProfile, n: int) -> float:
    """Throughput ceiling of the two-stage pipeline, overhead ignored."""
    slowest = max(profile.t_bb, profile.ed_ms(n))
    if slowest <= 0:
        raise ProfileError("fps bound undefined for zero stage timings")
    return 1000.0 / slowest


@dataclass(frozen=True)
class FrameTiming:
    frame: int
    bb_start: float
    bb_end: float
    ed_start: float
    ed_end: float


@dataclass(frozen=True)
class ScheduleTrace:
    frames: tuple[FrameTiming, ...]
    steady_state_ms: float
    achieved_fps: float
    makespan_ms: float

    def validate(self) -> None:
        for f in self.frames:
            if f.ed_start < f.bb_end or f.bb_end < f.bb_start or f.ed_end < f.ed_start:
                raise ValueError(f"trace ordering violated within frame {f.frame}")
        for prev, cur in zip(self.frames, self.frames[1:]):
            if cur.bb_start < prev.bb_end or cur.ed_start < prev.ed_end:
                raise ValueError(f"stage serially reused out of order at frame {cur.frame}")


def simulate_pipeline(profile: TimingProfile, n: int, num_frames: int) -> ScheduleTrace:
    """Event-driven simulation of the two-stage inter-frame pipeline."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    t_bb = profile.t_bb
    t_ed = profile.ed_ms(n)
    ovh = profile.overhead
    frames = []
    bb_free = 0.0
    ed_free = 0.0
    for f in range(num_frames):
        bb_start = bb_free
        bb_end = bb_start + t_bb
        bb_free = bb_end + ovh
        ed_start = max(bb_end, ed_free)
        ed_end = ed_start + t_ed
        ed_free = ed_end + ovh
        frames.append(FrameTiming(f, bb_start, bb_end, ed_start, ed_end))
    makespan = frames[-1].ed_end
    if num_frames >= 2:
        steady = frames[-1].ed_end - frames[-2].ed_end
    else:
        steady = makespan
    fps = 1000.0 / steady if steady > 0 else float("inf")
    trace = ScheduleTrace(tuple(frames), steady, fps, makespan)
    trace.validate()
    return trace


def steady_state_closed_form(profile: TimingProfile, n: int) -> float:
    return max(profile.t_bb, profile.ed_ms(n)) + profile.overhead


def makespan_closed_form(profile: TimingProfile, n: int, num_frames: int) -> float:
    return profile.t_bb + profile.ed_ms(n) + (num_frames - 1) * steady_state_closed_form(profile, n)


def calibrate_overhead(profile: TimingProfile, n: int, observed_fps: float) -> float:
    """Overhead that makes the simulated steady state match an observed
    frame rate: solve 1000 / (max(t_bb, t_ed(N)) + x) = fps for x."""
    if observed_fps <= 0:
        raise ValueError("observed fps must be positive")
    x = 1000.0 / observed_fps - max(profile.t_bb, profile.ed_ms(n))
    return max(x, 0.0)


# ---------------------------------------------------------------------------
# shipped presets (reference RTX 4080 deployment timings)
# ---------------------------------------------------------------------------

PRESETS: dict[str, TimingProfile] = {
    # eager deployment at 1008px: 87 ms backbone, flat 25 ms enc-dec
    "paper-pytorch-1008": TimingProfile(
        t_bb=87.0, t_ed=((1, 25.0), (3, 25.0)), name="paper-pytorch-1008"
    ),
    # compiled backbone, eager enc-dec (the hierarchy's level-3 state)
    "paper-trt-bb-1008": TimingProfile(
        t_bb=53.0, t_ed=((1, 25.0), (3, 25.0)), name="paper-trt-bb-1008"
    ),
    # both stages compiled at 1008px; overhead calibrated on the 1-class row
    "paper-trt-1008": TimingProfile(
        t_bb=53.2,
        t_ed=((1, 7.9), (2, 11.4), (4, 19.2), (8, 34.7)),
        overhead=0.3,
        name="paper-trt-1008",
    ),
    # both stages compiled at 644px; approximate monotone fit of the
    # reference frame rates (the raw sequence is not exactly decomposable
    # into a constant backbone plus a non-decreasing enc-dec)
    "paper-trt-644": TimingProfile(
        t_bb=24.0,
        t_ed=((1, 6.6), (2, 6.6), (4, 6.6), (8, 11.5)),
        overhead=0.3,
        name="paper-trt-644",
    ),
}

# reference observed pipelined frame rates, reported next to computed bounds
OBSERVED_PIPE_FPS: dict[str, dict[int, float]] = {
    "paper-trt-1008": {1: 18.7, 2: 17.6, 4: 15.8, 8: 12.5},
    "paper-trt-644": {1: 40.6, 2: 40.2, 4: 40.0, 8: 32.9},
}

# reference cumulative-hierarchy cells at 3 classes, 1008px
REFERENCE_HIERARCHY_MS = {0: 336.0, 1: 162.0, 2: 112.0, 3: 78.0, 4: 60.0}
REFERENCE_HIERARCHY_CLASSES = 3
_TRT_ED_3CLASS_MS = 15.0  # compiled enc-dec at 3 classes

# reference class-scaling rows at 1008px: (N, BB, E-D, Sum, Seq FPS, Pipe FPS)
REFERENCE_CLASS_SCALING = (
    (1, 53.2, 7.9, 61.1, 16.3, 18.7),
    (2, 53.2, 11.4, 64.6, 15.5, 17.6),
    (4, 53.2, 19.2, 72.4, 13.8, 15.8),
    (8, 53.2, 34.7, 87.9, 11.5, 12.5),
)


def hierarchy_reproduction() -> dict:
    """Recompute the five-level cumulative latency hierarchy at 3 classes.

    Levels 0-2 use the eager profile, level 3 swaps in the compiled
    backbone, level 4 compiles the enc-dec as well and pipelines; its
    overhead is calibrated against the reference level-4 latency and
    reported alongside.
    """
    n = REFERENCE_HIERARCHY_CLASSES
    eager = PRESETS["paper-pytorch-1008"]
    trt_bb = PRESETS["paper-trt-bb-1008"]
    level4_seq = TimingProfile(t_bb=trt_bb.t_bb, t_ed=((n, _TRT_ED_3CLASS_MS),), name="trt-full")
    overhead = REFERENCE_HIERARCHY_MS[4] - max(level4_seq.t_bb, level4_seq.ed_ms(n))
    level4 = TimingProfile(
        t_bb=level4_seq.t_bb, t_ed=level4_seq.t_ed, overhead=overhead, name="trt-full"
    )
    rows = [
        {"level": 0, "ms": latency_level(eager, LatencyLevel.NAIVE, n)},
        {"level": 1, "ms": latency_level(eager, LatencyLevel.SHARED_BACKBONE, n)},
        {"level": 2, "ms": latency_level(eager, LatencyLevel.BATCHED_DET_ONLY, n)},
        {"level": 3, "ms": latency_level(trt_bb, LatencyLevel.COMPILED_BACKBONE, n)},
        {
            "level": 4,
            "ms": simulate_pipeline(level4, n, 100).steady_state_ms,
            "sequential_ms": latency_level(level4, LatencyLevel.COMPILED_PIPELINE, n),
            "calibrated_overhead_ms": overhead,
        },
    ]
    base = rows[0]["ms"]
    for r in rows:
        r["speedup"] = base / r["ms"]
        r["reference_ms"] = REFERENCE_HIERARCHY_MS[r["level"]]
    return {"classes": n, "rows": rows}


def class_scaling_reproduction(frames: int = 100) -> dict:
    """Recompute the per-class-count latency breakdown on the compiled
    profile and report the pipelining bounds beside the reference
    observed pipelined frame rates."""
    profile = PRESETS["paper-trt-1008"]
    observed = OBSERVED_PIPE_FPS["paper-trt-1008"]
    rows = []
    for n, ref_bb, ref_ed, ref_sum, ref_seq, ref_pipe in REFERENCE_CLASS_SCALING:
        total = latency_level(profile, LatencyLevel.COMPILED_PIPELINE, n)
        trace = simulate_pipeline(profile, n, frames)
        rows.append(
            {
                "n": n,
                "bb_ms": profile.t_bb,
                "ed_ms": profile.ed_ms(n),
                "sum_ms": total,
                "seq_fps": 1000.0 / total,
                "pipe_bound_fps": pipelined_fps_bound(profile, n),
                "simulated_pipe_fps": trace.achieved_fps,
                "observed_pipe_fps": observed[n],
                "reference": {
                    "bb_ms": ref_bb,
                    "ed_ms": ref_ed,
                    "sum_ms": ref_sum,
                    "seq_fps": ref_seq,
                    "pipe_fps": ref_pipe,
                },
            }
        )
    return {"profile": profile.name, "rows": rows}
