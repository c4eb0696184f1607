"""The optimization hierarchy over one detector model.

Four execution strategies: per-class naive inference, shared-backbone,
batched decoding with optional mask-head removal, and the same with
half-precision stage modes.  Every strategy is a pure function of
(model, image, class names, config); instrumentation counters are per
run, never global.  In full precision all strategies are bitwise
output-preserving by construction: kernels fix their accumulation order
and the batched decoder processes classes independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .model import (
    DetectorModel,
    FpnFeatures,
    RawQueryOutputs,
    backbone_forward,
    encdec_forward,
    mask_head_forward,
    sigmoid,
    text_encode,
    truncate_model,
)
from .tensors import PrecisionMode, cosine_similarity


class PipelineLevel(Enum):
    NAIVE = "naive"
    SHARED_BACKBONE = "shared"
    BATCHED_DET_ONLY = "batched"
    BATCHED_DET_ONLY_FP16 = "batched-fp16"

    @property
    def rank(self) -> int:
        return _LEVEL_ORDER.index(self)

    @property
    def optimizations(self) -> frozenset[str]:
        """Cumulative: each level includes everything below it."""
        return _LEVEL_OPTS[self]


_LEVEL_ORDER = [
    PipelineLevel.NAIVE,
    PipelineLevel.SHARED_BACKBONE,
    PipelineLevel.BATCHED_DET_ONLY,
    PipelineLevel.BATCHED_DET_ONLY_FP16,
]
_LEVEL_OPTS = {
    PipelineLevel.NAIVE: frozenset(),
    PipelineLevel.SHARED_BACKBONE: frozenset({"shared-backbone"}),
    PipelineLevel.BATCHED_DET_ONLY: frozenset({"shared-backbone", "batched", "detection-only"}),
    PipelineLevel.BATCHED_DET_ONLY_FP16: frozenset(
        {"shared-backbone", "batched", "detection-only", "fp16"}
    ),
}


@dataclass(frozen=True)
class PipelineConfig:
    level: PipelineLevel = PipelineLevel.BATCHED_DET_ONLY
    backbone_mode: PrecisionMode = PrecisionMode.FP32
    encdec_mode: PrecisionMode = PrecisionMode.FP32
    detection_only: bool = True
    n_max: int | None = None  # None = unbounded chunk size
    presence_threshold: float = 0.5
    score_threshold: float = 0.45
    nms_iou_threshold: float = 0.5
    cross_class_nms: bool = False

    def __post_init__(self) -> None:
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        for name in ("presence_threshold", "score_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def for_level(cls, level: PipelineLevel, **overrides) -> "PipelineConfig":
        mode = (
            PrecisionMode.FP16_ACCUM_FP32
            if level is PipelineLevel.BATCHED_DET_ONLY_FP16
            else PrecisionMode.FP32
        )
        base = cls(
            level=level,
            backbone_mode=mode,
            encdec_mode=mode,
            detection_only="detection-only" in level.optimizations,
        )
        return replace(base, **overrides)


@dataclass(frozen=True)
class Detection:
    class_id: int
    class_name: str
    box: tuple[float, float, float, float]  # (cx, cy, w, h) in [0, 1]
    score: float
    presence: float


@dataclass
class RunCounters:
    backbone_passes: int = 0
    encdec_passes: int = 0
    encdec_classes: int = 0
    mask_head_calls: int = 0
    text_cache_hits: int = 0
    text_cache_misses: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class EmptyClassSetError(ValueError):
    pass


def _require_classes(class_names: list[str]) -> None:
    if not class_names:
        raise EmptyClassSetError("at least one class name is required")


def _backbone(model, image, mode, counters: RunCounters | None) -> FpnFeatures:
    if counters is not None:
        counters.backbone_passes += 1
    return backbone_forward(model, image, mode)


def _text(model, names, counters: RunCounters | None):
    if counters is not None:
        for n in set(names):
            if n in model._text_cache:
                counters.text_cache_hits += 1
            else:
                counters.text_cache_misses += 1
    return text_encode(model, names)


def _encdec(model, fpn, batch, mode, counters: RunCounters | None) -> RawQueryOutputs:
    if counters is not None:
        counters.encdec_passes += 1
        counters.encdec_classes += len(batch)
    return encdec_forward(model, fpn, batch, mode)


def _concat_raw(parts: list[RawQueryOutputs]) -> RawQueryOutputs:
    return RawQueryOutputs(
        query_features=np.concatenate([p.query_features for p in parts]),
        boxes=np.concatenate([p.boxes for p in parts]),
        presence_logits=np.concatenate([p.presence_logits for p in parts]),
        score_logits=np.concatenate([p.score_logits for p in parts]),
    )


def run_naive(model, image, class_names, cfg: PipelineConfig, counters: RunCounters | None = None) -> list[Detection]:
    """One full pipeline execution per class (the unoptimized baseline)."""
    _require_classes(class_names)
    parts = []
    for name in class_names:
        fpn = _backbone(model, image, cfg.backbone_mode, counters)
        emb = _text(model, [name], counters)
        raw = _encdec(model, fpn, emb.stack([name]), cfg.encdec_mode, counters)
        if not cfg.detection_only:
            mask_head_forward(model, fpn, raw)
            if counters is not None:
                counters.mask_head_calls += 1
        parts.append(raw)
    return postprocess(_concat_raw(parts), class_names, cfg)


def run_shared(model, image, class_names, cfg: PipelineConfig, counters: RunCounters | None = None) -> list[Detection]:
    """Backbone once, per-class decoding still sequential."""
    _require_classes(class_names)
    fpn = _backbone(model, image, cfg.backbone_mode, counters)
    parts = []
    for name in class_names:
        emb = _text(model, [name], counters)
        raw = _encdec(model, fpn, emb.stack([name]), cfg.encdec_mode, counters)
        if not cfg.detection_only:
            mask_head_forward(model, fpn, raw)
            if counters is not None:
                counters.mask_head_calls += 1
        parts.append(raw)
    return postprocess(_concat_raw(parts), class_names, cfg)


def chunk_count(n: int, n_max: int | None) -> int:
    return 1 if n_max is None else math.ceil(n / n_max)


def run_batched(model, image, class_names, cfg: PipelineConfig, counters: RunCounters | None = None) -> list[Detection]:
    """Backbone once, classes decoded in ceil(N / n_max) batched passes."""
    _require_classes(class_names)
    fpn = _backbone(model, image, cfg.backbone_mode, counters)
    return run_batched_from_fpn(model, fpn, class_names, cfg, counters)


def run_batched_from_fpn(model, fpn: FpnFeatures, class_names, cfg: PipelineConfig, counters: RunCounters | None = None) -> list[Detection]:
    """Batched decoding against precomputed backbone features."""
    _require_classes(class_names)
    emb = _text(model, class_names, counters)
    size = len(class_names) if cfg.n_max is None else cfg.n_max
    parts = []
    for start in range(0, len(class_names), size):
        chunk = class_names[start : start + size]
        raw = _encdec(model, fpn, emb.stack(chunk), cfg.encdec_mode, counters)
        if not cfg.detection_only:
            mask_head_forward(model, fpn, raw)
            if counters is not None:
                counters.mask_head_calls += 1
        parts.append(raw)
    return postprocess(_concat_raw(parts), class_names, cfg)


_RUNNERS = {
    PipelineLevel.NAIVE: run_naive,
    PipelineLevel.SHARED_BACKBONE: run_shared,
    PipelineLevel.BATCHED_DET_ONLY: run_batched,
    PipelineLevel.BATCHED_DET_ONLY_FP16: run_batched,
}


def run_level(model, image, class_names, cfg: PipelineConfig, counters: RunCounters | None = None) -> list[Detection]:
    return _RUNNERS[cfg.level](model, image, class_names, cfg, counters)


# ---------------------------------------------------------------------------
# postprocessing
# ---------------------------------------------------------------------------


def box_iou(a, b) -> float:
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def _greedy_nms(entries: list[tuple], iou_threshold: float) -> list[tuple]:
    """Entries pre-sorted by priority; suppress IoU >= threshold."""
    kept: list[tuple] = []
    for e in entries:
        if all(box_iou(e[0], k[0]) < iou_threshold for k in kept):
            kept.append(e)
    return kept


def postprocess(raw: RawQueryOutputs, class_names: list[str], cfg: PipelineConfig) -> list[Detection]:
    """Presence gate, score gate, then greedy per-class NMS.

    Deterministic: candidates are ordered by (score desc, query index
    asc) before suppression.  Cross-class NMS is off by default and can
    be enabled on top of the per-class result.
    """
    if raw.batch != len(class_names):
        raise ValueError(f"raw batch {raw.batch} does not match {len(class_names)} class names")
    detections: list[Detection] = []
    for c, name in enumerate(class_names):
        presence = float(sigmoid(raw.presence_logits[c]))
        if presence < cfg.presence_threshold:
            continue
        scores = sigmoid(raw.score_logits[c])
        entries = [
            (tuple(float(v) for v in raw.boxes[c, q]), float(scores[q]), q)
            for q in range(scores.shape[0])
            if float(scores[q]) >= cfg.score_threshold
        ]
        entries.sort(key=lambda e: (-e[1], e[2]))
        for box, score, _q in _greedy_nms(entries, cfg.nms_iou_threshold):
            detections.append(Detection(c, name, box, score, presence))
    if cfg.cross_class_nms:
        order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
        kept = _greedy_nms([(detections[i].box, detections[i].score, i) for i in order], cfg.nms_iou_threshold)
        kept_ids = sorted(e[2] for e in kept)
        detections = [detections[i] for i in kept_ids]
    return detections


def detections_to_json(detections: list[Detection]) -> str:
    records = [
        {
            "class_id": d.class_id,
            "class_name": d.class_name,
            "box": list(d.box),
            "score": d.score,
            "presence": d.presence,
        }
        for d in detections
    ]
    return json.dumps(records, indent=2)


def detections_from_json(text: str) -> list[Detection]:
    return [
        Detection(r["class_id"], r["class_name"], tuple(r["box"]), r["score"], r["presence"])
        for r in json.loads(text)
    ]


# ---------------------------------------------------------------------------
# precision-degradation study
# ---------------------------------------------------------------------------

STUDY_MODES = (PrecisionMode.FP16_ACCUM_FP32, PrecisionMode.FP16_ACCUM_FP16)


@dataclass(frozen=True)
class PrecisionStudyReport:
    """Mean level-0 feature cosine vs the full-precision reference."""

    depths: tuple[int, ...]
    rows: tuple[tuple[int, str, float], ...]  # (depth, mode value, mean cosine)

    def cosine(self, depth: int, mode: PrecisionMode) -> float:
        for d, m, v in self.rows:
            if d == depth and m == mode.value:
                return v
        raise KeyError((depth, mode))

    def to_table(self) -> list[dict]:
        return [{"depth": d, "mode": m, "mean_cosine": v} for d, m, v in self.rows]


def precision_study(model: DetectorModel, images: list[np.ndarray], depth_schedule: list[int]) -> PrecisionStudyReport:
    """Half-precision feature degradation versus backbone depth.

    For each depth the backbone is truncated to its first blocks (always
    keeping a cross-window path) and level-0 features under each half
    mode are compared against the full-precision reference by cosine,
    averaged over the image set.
    """
    if len(images) < 5:
        raise ValueError("precision study needs at least 5 images")
    if len(depth_schedule) < 3:
        raise ValueError("precision study needs at least 3 depths")
    for d in depth_schedule:
        if d > model.config.num_blocks:
            raise ValueError(f"depth {d} exceeds num_blocks {model.config.num_blocks}")
    rows = []
    for depth in depth_schedule:
        truncated = truncate_model(model, depth)
        refs = [backbone_forward(truncated, img, PrecisionMode.FP32).levels[0] for img in images]
        for mode in STUDY_MODES:
            cos = [
                cosine_similarity(backbone_forward(truncated, img, mode).levels[0], ref)
                for img, ref in zip(images, refs)
            ]
            rows.append((depth, mode.value, float(np.mean(cos))))
    return PrecisionStudyReport(tuple(depth_schedule), tuple(rows))
