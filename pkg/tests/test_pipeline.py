import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dart.model import build_model, clear_text_cache, toy_config
from dart.pipeline import (
    Detection,
    EmptyClassSetError,
    PipelineConfig,
    PipelineLevel,
    RawQueryOutputs,
    RunCounters,
    box_iou,
    chunk_count,
    detections_from_json,
    detections_to_json,
    postprocess,
    precision_study,
    run_batched,
    run_level,
    run_naive,
    run_shared,
)
from dart.scenes import scene_images
from dart.tensors import PrecisionMode

FP32 = PrecisionMode.FP32
NAMES = ["car", "person", "dog"]


def det_cfg(**over):
    return PipelineConfig.for_level(PipelineLevel.BATCHED_DET_ONLY, **over)


class TestLevelEquivalence:
    def test_single_class_naive_equals_shared(self, toy_model, sample_image):
        cfg = det_cfg()
        assert run_naive(toy_model, sample_image, ["car"], cfg) == run_shared(
            toy_model, sample_image, ["car"], cfg
        )

    def test_three_ways_bitwise_equal(self, toy_model, sample_image):
        cfg = det_cfg()
        naive = run_naive(toy_model, sample_image, NAMES, cfg)
        shared = run_shared(toy_model, sample_image, NAMES, cfg)
        batched = run_batched(toy_model, sample_image, NAMES, cfg)
        assert naive == shared == batched

    def test_equivalence_with_mask_head_running(self, toy_model, sample_image):
        cfg = det_cfg(detection_only=False)
        naive = run_naive(toy_model, sample_image, NAMES, cfg)
        batched = run_batched(toy_model, sample_image, NAMES, cfg)
        assert naive == batched

    def test_equivalence_holds_under_emulated_half_precision(self, toy_model, sample_image):
        # the emulation rounds identically on every strategy's path, so
        # equality is preserved even in half modes
        cfg = PipelineConfig.for_level(PipelineLevel.BATCHED_DET_ONLY_FP16)
        naive = run_naive(toy_model, sample_image, NAMES, cfg)
        batched = run_batched(toy_model, sample_image, NAMES, cfg)
        assert naive == batched

    def test_nmax_does_not_change_outputs(self, toy_model, sample_image):
        reference = run_batched(toy_model, sample_image, NAMES, det_cfg())
        for n_max in (1, 2, 4):
            assert run_batched(toy_model, sample_image, NAMES, det_cfg(n_max=n_max)) == reference

    def test_empty_scene_is_total(self, toy_model, zero_image):
        dets = run_naive(toy_model, zero_image, NAMES, det_cfg())
        assert isinstance(dets, list)

    def test_empty_class_set_rejected(self, toy_model, sample_image):
        with pytest.raises(EmptyClassSetError):
            run_shared(toy_model, sample_image, [], det_cfg())


class TestCounters:
    def test_naive_runs_backbone_per_class(self, toy_model, sample_image):
        c = RunCounters()
        run_naive(toy_model, sample_image, NAMES, det_cfg(), c)
        assert c.backbone_passes == 3
        assert c.encdec_passes == 3

    def test_shared_runs_backbone_once(self, toy_model, sample_image):
        c = RunCounters()
        run_shared(toy_model, sample_image, NAMES, det_cfg(), c)
        assert c.backbone_passes == 1
        assert c.encdec_passes == 3

    def test_batched_chunking(self, toy_model, sample_image):
        names = [f"class{i:02d}" for i in range(10)]
        c = RunCounters()
        run_batched(toy_model, sample_image, names, det_cfg(n_max=4), c)
        assert c.backbone_passes == 1
        assert c.encdec_passes == 3
        assert c.encdec_classes == 10

    def test_chunk_count_arithmetic(self):
        assert chunk_count(80, 16) == 5
        assert chunk_count(10, 4) == 3
        assert chunk_count(1, 1) == 1
        assert chunk_count(7, None) == 1

    def test_detection_only_never_calls_mask_head(self, toy_model, sample_image):
        c = RunCounters()
        run_batched(toy_model, sample_image, NAMES, det_cfg(), c)
        assert c.mask_head_calls == 0

    def test_mask_head_counts_when_enabled(self, toy_model, sample_image):
        c = RunCounters()
        run_shared(toy_model, sample_image, NAMES, det_cfg(detection_only=False), c)
        assert c.mask_head_calls == 3

    def test_text_cache_hits(self, sample_image):
        model = build_model(toy_config(seed=3))
        c = RunCounters()
        run_batched(model, sample_image, ["car", "person"], det_cfg(), c)
        assert c.text_cache_misses == 2 and c.text_cache_hits == 0
        c2 = RunCounters()
        run_batched(model, sample_image, ["car", "person"], det_cfg(), c2)
        assert c2.text_cache_hits == 2 and c2.text_cache_misses == 0


class TestCacheNeutrality:
    def test_clearing_cache_never_changes_outputs(self, toy_model, sample_image):
        cfg = det_cfg()
        first = run_batched(toy_model, sample_image, NAMES, cfg)
        clear_text_cache(toy_model)
        second = run_batched(toy_model, sample_image, NAMES, cfg)
        assert first == second


class TestLevels:
    def test_levels_are_cumulative(self):
        ranked = sorted(PipelineLevel, key=lambda l: l.rank)
        for lo, hi in zip(ranked, ranked[1:]):
            assert lo.optimizations < hi.optimizations

    def test_for_level_defaults(self):
        cfg = PipelineConfig.for_level(PipelineLevel.BATCHED_DET_ONLY_FP16)
        assert cfg.detection_only
        assert cfg.backbone_mode is PrecisionMode.FP16_ACCUM_FP32
        naive = PipelineConfig.for_level(PipelineLevel.NAIVE)
        assert not naive.detection_only
        assert naive.backbone_mode is FP32

    def test_run_level_dispatch(self, toy_model, sample_image):
        cfg = det_cfg()
        assert run_level(toy_model, sample_image, NAMES, cfg) == run_batched(
            toy_model, sample_image, NAMES, cfg
        )

    def test_config_validation(self):
        with pytest.raises(ValueError):
            det_cfg(n_max=0)
        with pytest.raises(ValueError):
            det_cfg(score_threshold=1.5)


def _raw(boxes, scores, presence):
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n, q = scores.shape
    return RawQueryOutputs(
        query_features=np.zeros((n, q, 64)),
        boxes=boxes,
        presence_logits=np.asarray(presence, dtype=np.float64),
        score_logits=scores,
    )


def _logit(p):
    return float(np.log(p / (1.0 - p)))


class TestPostprocess:
    def test_identical_boxes_suppressed_to_best(self):
        box = [0.5, 0.5, 0.2, 0.2]
        raw = _raw([[box, box]], [[_logit(0.9), _logit(0.8)]], [10.0])
        dets = postprocess(raw, ["car"], det_cfg())
        assert len(dets) == 1
        assert abs(dets[0].score - 0.9) < 1e-12

    def test_presence_gate_blocks_class(self):
        box = [0.5, 0.5, 0.2, 0.2]
        raw = _raw([[box]], [[_logit(0.99)]], [-np.inf])
        assert postprocess(raw, ["car"], det_cfg()) == []

    def test_disjoint_boxes_all_survive(self):
        boxes = [[0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]]
        raw = _raw([boxes], [[_logit(0.9), _logit(0.8)]], [10.0])
        assert len(postprocess(raw, ["car"], det_cfg())) == 2

    def test_score_gate(self):
        box = [0.5, 0.5, 0.2, 0.2]
        raw = _raw([[box]], [[_logit(0.3)]], [10.0])
        assert postprocess(raw, ["car"], det_cfg()) == []

    def test_tie_break_by_query_index(self):
        box_a = [0.3, 0.3, 0.2, 0.2]
        box_b = [0.31, 0.3, 0.2, 0.2]  # heavy overlap with box_a
        raw = _raw([[box_b, box_a]], [[_logit(0.8), _logit(0.8)]], [10.0])
        dets = postprocess(raw, ["car"], det_cfg())
        assert len(dets) == 1
        assert dets[0].box == tuple(box_b)  # equal scores: lower query index wins

    def test_cross_class_nms_flag(self):
        box = [0.5, 0.5, 0.2, 0.2]
        raw = _raw([[box], [box]], [[_logit(0.9)], [_logit(0.8)]], [10.0, 10.0])
        keep_both = postprocess(raw, ["car", "person"], det_cfg())
        assert len(keep_both) == 2  # per-class only by default
        collapsed = postprocess(raw, ["car", "person"], det_cfg(cross_class_nms=True))
        assert len(collapsed) == 1 and collapsed[0].class_name == "car"

    def test_batch_size_mismatch_rejected(self):
        raw = _raw([[[0.5, 0.5, 0.2, 0.2]]], [[_logit(0.9)]], [10.0])
        with pytest.raises(ValueError):
            postprocess(raw, ["car", "person"], det_cfg())

    def test_iou_basics(self):
        a = (0.5, 0.5, 0.2, 0.2)
        assert box_iou(a, a) == pytest.approx(1.0)
        assert box_iou(a, (0.9, 0.9, 0.1, 0.1)) == 0.0

    @given(st.integers(min_value=0, max_value=10**6))
    @settings(deadline=None, max_examples=60)
    def test_nms_survivors_are_mutually_below_threshold(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 12))
        boxes = np.column_stack(
            [rng.uniform(0.2, 0.8, n), rng.uniform(0.2, 0.8, n), rng.uniform(0.05, 0.4, n), rng.uniform(0.05, 0.4, n)]
        )
        scores = rng.uniform(-3, 3, (1, n))
        raw = _raw(boxes[None], scores, [10.0])
        cfg = det_cfg(score_threshold=0.0)
        dets = postprocess(raw, ["car"], cfg)
        for i, d1 in enumerate(dets):
            for d2 in dets[i + 1 :]:
                assert box_iou(d1.box, d2.box) < cfg.nms_iou_threshold


class TestDetectionSerialization:
    def test_roundtrip(self, toy_model, sample_image):
        dets = run_batched(toy_model, sample_image, NAMES, det_cfg())
        text = detections_to_json(dets)
        assert detections_from_json(text) == dets

    def test_shortest_roundtrip_decimals(self):
        d = Detection(0, "car", (0.1, 0.2, 0.3, 0.4), 0.55, 0.66)
        text = detections_to_json([d])
        assert "0.55" in text
        assert detections_from_json(text)[0].score == 0.55


@pytest.fixture(scope="module")
def images():
    return scene_images(5, seed=9000, num_classes=4)


class TestPrecisionStudy:

    def test_input_validation(self, toy_model, images):
        with pytest.raises(ValueError):
            precision_study(toy_model, images[:4], [0, 1, 2])
        with pytest.raises(ValueError):
            precision_study(toy_model, images, [0, 1])
        with pytest.raises(ValueError):
            precision_study(toy_model, images, [0, 1, 9])

    def test_zero_depth_barely_degrades(self, toy_model, images):
        report = precision_study(toy_model, images, [0, 1, 2])
        for mode in (PrecisionMode.FP16_ACCUM_FP32, PrecisionMode.FP16_ACCUM_FP16):
            assert report.cosine(0, mode) >= 0.999

    def test_modes_ordered_at_depth(self, toy_model, images):
        report = precision_study(toy_model, images, [2, 4, 8])
        assert report.cosine(8, PrecisionMode.FP16_ACCUM_FP16) < report.cosine(
            8, PrecisionMode.FP16_ACCUM_FP32
        )

    def test_table_shape(self, toy_model, images):
        report = precision_study(toy_model, images, [0, 1, 2])
        table = report.to_table()
        assert len(table) == 6
        assert {row["mode"] for row in table} == {"fp16-accum-fp32", "fp16-accum-fp16"}
