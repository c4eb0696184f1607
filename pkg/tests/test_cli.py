import json
import os

import pytest

from dart.cli import main
from dart.pipeline import detections_from_json


def read_report(out_dir):
    with open(os.path.join(out_dir, "report.json")) as f:
        return json.load(f)


def payload(report):
    return {k: v for k, v in report.items() if k != "wall_clock"}


class TestDetect:
    def test_verify_batched_equals_naive(self, tmp_path):
        out = tmp_path / "run"
        code = main(["detect", "--classes", "car,person", "--level", "batched", "--verify", "--out", str(out)])
        assert code == 0
        report = read_report(out)
        verdicts = {v["name"]: v for v in report["verifications"]}
        assert verdicts["bitwise-equal-vs-naive"]["passed"]
        assert "bitwise-equal: true" in verdicts["bitwise-equal-vs-naive"]["detail"]
        dets = detections_from_json((out / "detections.json").read_text())
        assert isinstance(dets, list)

    def test_empty_classes_is_usage_error(self, tmp_path):
        code = main(["detect", "--classes", "", "--out", str(tmp_path / "x")])
        assert code == 2

    def test_unknown_level_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["detect", "--level", "warp", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2

    def test_chunk_report(self, tmp_path):
        out = tmp_path / "run"
        names = ",".join(f"c{i}" for i in range(10))
        code = main(["detect", "--classes", names, "--level", "batched", "--nmax", "4", "--out", str(out)])
        assert code == 0
        report = read_report(out)
        assert report["tables"]["encdec_passes_expected"] == 3
        assert report["tables"]["counters"]["encdec_passes"] == 3

    def test_fp16_level_still_verifies_against_naive(self, tmp_path):
        out = tmp_path / "run"
        code = main(["detect", "--classes", "car", "--level", "batched-fp16", "--verify", "--out", str(out)])
        assert code == 0


class TestBench:
    def test_eager_preset_level_naive(self, tmp_path):
        out = tmp_path / "b"
        code = main(["bench", "--preset", "paper-pytorch-1008", "--classes", "3", "--level", "naive", "--out", str(out)])
        assert code == 0
        assert read_report(out)["tables"]["latency_ms"] == 336.0

    def test_compiled_preset_row(self, tmp_path):
        out = tmp_path / "b"
        code = main(["bench", "--preset", "paper-trt-1008", "--classes", "4", "--out", str(out)])
        assert code == 0
        row = read_report(out)["tables"]["row"]
        assert row["sum_ms"] == pytest.approx(72.4)
        assert round(row["seq_fps"], 1) == 13.8

    def test_unknown_preset_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--preset", "nope", "--out", str(tmp_path / "b")])
        assert exc.value.code == 2

    def test_no_mode_is_error(self, tmp_path):
        assert main(["bench", "--out", str(tmp_path / "b")]) == 2

    def test_measure_mode_structure(self, tmp_path):
        out = tmp_path / "m"
        code = main([
            "bench", "--measure", "--classes", "1", "--frames", "3", "--warmup", "1",
            "--runs", "5", "--out", str(out),
        ])
        assert code == 0
        report = read_report(out)
        assert report["tables"]["protocol"]["runs"] == 5
        assert len(report["wall_clock"]["run_mean_ms"]) == 5
        assert report["wall_clock"]["stddev_ms"] >= 0.0


class TestPrune:
    def test_plan_file_written(self, tmp_path):
        out = tmp_path / "p"
        code = main(["prune", "--k", "2", "--calib", "3", "--out", str(out)])
        assert code == 0
        plan = json.loads((out / "plan.json").read_text())
        assert len(plan["steps"]) == 2
        protected_blocks = {b for b, _ in plan["protected"]}
        assert all(s["block"] not in protected_blocks for s in plan["steps"])


class TestSchedule:
    def test_reference_preset(self, tmp_path):
        out = tmp_path / "s"
        code = main(["schedule", "--preset", "paper-trt-1008", "--classes", "4", "--frames", "100", "--out", str(out)])
        assert code == 0
        result = read_report(out)["tables"]["result"]
        assert round(result["pipe_bound_fps"], 1) == 18.8
        assert result["observed_pipe_fps"] == 15.8
        assert result["simulated_pipe_fps"] <= result["pipe_bound_fps"]

    def test_profile_file_input(self, tmp_path):
        from dart.scheduler import TimingProfile, profile_to_json

        profile_path = tmp_path / "custom.json"
        profile_path.write_text(profile_to_json(TimingProfile(t_bb=40.0, t_ed=((2, 10.0),), overhead=1.0)))
        out = tmp_path / "s"
        code = main(["schedule", "--profile", str(profile_path), "--classes", "2", "--out", str(out)])
        assert code == 0
        result = read_report(out)["tables"]["result"]
        assert result["pipe_bound_fps"] == pytest.approx(25.0)
        assert result["steady_state_ms"] == pytest.approx(41.0)
        assert result["observed_pipe_fps"] is None


class TestDistillCommand:
    def test_plant_mode(self, tmp_path):
        out = tmp_path / "d"
        code = main(["distill", "--plant", "--images", "16", "--steps", "60", "--out", str(out)])
        assert code == 0
        planted = read_report(out)["tables"]["planted"]
        assert planted["closed_form_max_err"] < 1e-3

    def test_full_mode(self, tmp_path):
        out = tmp_path / "d"
        code = main(["distill", "--images", "16", "--eval-images", "3", "--steps", "30", "--out", str(out)])
        assert code == 0
        report = read_report(out)
        assert (out / "adapter.bin").exists()
        names = {v["name"] for v in report["verifications"]}
        assert "frozen-decoder" in names and "trained-not-worse-than-random" in names


class TestOptionPlumbing:
    def test_config_file_supplies_flags_and_flags_win(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"classes": "car,person,dog", "nmax": 1}))
        out = tmp_path / "r"
        code = main(["detect", "--config", str(cfg_path), "--nmax", "3", "--out", str(out)])
        assert code == 0
        report = read_report(out)
        assert report["config"]["classes"] == "car,person,dog"  # from file
        assert report["config"]["nmax"] == 3  # flag wins
        assert report["tables"]["encdec_passes_expected"] == 1

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"classss": 1}))
        assert main(["detect", "--config", str(cfg_path), "--out", str(tmp_path / "r")]) == 2

    def test_env_seed_is_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DART_SEED", "7")
        out = tmp_path / "r"
        assert main(["detect", "--classes", "car", "--out", str(out)]) == 0
        assert read_report(out)["config"]["seed"] == 7

    def test_flag_overrides_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DART_SEED", "7")
        out = tmp_path / "r"
        assert main(["detect", "--classes", "car", "--seed", "3", "--out", str(out)]) == 0
        assert read_report(out)["config"]["seed"] == 3

    def test_report_embeds_effective_config(self, tmp_path):
        out = tmp_path / "r"
        main(["detect", "--classes", "car", "--out", str(out)])
        config = read_report(out)["config"]
        assert {"classes", "level", "nmax", "seed", "out"} <= set(config)


class TestDeterminism:
    @pytest.mark.parametrize(
        "argv",
        [
            ["detect", "--classes", "car,person", "--level", "batched", "--verify"],
            ["bench", "--preset", "paper-trt-1008", "--classes", "4"],
            ["prune", "--k", "2", "--calib", "3"],
            ["schedule", "--preset", "paper-trt-1008", "--classes", "4"],
            ["distill", "--plant", "--images", "16", "--steps", "40"],
        ],
        ids=lambda a: a[0],
    )
    def test_rerun_payloads_byte_identical(self, tmp_path, argv):
        out = tmp_path / "run"
        assert main(argv + ["--out", str(out)]) == 0
        first = json.dumps(payload(read_report(out)), sort_keys=True)
        assert main(argv + ["--out", str(out)]) == 0
        second = json.dumps(payload(read_report(out)), sort_keys=True)
        assert first == second
