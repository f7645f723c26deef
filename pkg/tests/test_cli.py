import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from echograph.cli import main
from echograph.model import ModelConfig, build_model, load_checkpoint, save_checkpoint

MODEL_OVERRIDES = {
    "spiral_len": 3,
    "feature_width": 8,
    "decoder_width": 4,
    "encoder_channels": [2, 3, 4, 5],
    "ef_hidden": [4, 4, 4],
    "classifier_hidden": [4, 4, 4],
}


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    report = json.loads(captured.out) if captured.out.strip() else None
    return code, report, captured.err


def tree_bytes(root):
    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def tiny_checkpoint(path, mode, image=(32, 32), clip=8):
    cfg = ModelConfig(
        mode=mode, spiral_len=3, feature_width=8, decoder_width=4,
        clip_len=clip, image_size=image, encoder_channels=(2, 3, 4, 5),
        ef_hidden=(4, 4, 4), classifier_hidden=(4, 4, 4),
    )
    model = build_model(cfg, seed=1)
    save_checkpoint(model, path)
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    code = main([
        "gen-data", "--count", "4", "--seed", "3", "--image-size", "32",
        "--cycle-len", "16", "--noise-level", "0.2", "--ratios", "2,1,1",
        "--out", str(out),
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    model_cfg = tmp_path_factory.mktemp("cfg") / "model.json"
    model_cfg.write_text(json.dumps(MODEL_OVERRIDES))
    code = main([
        "train", "--config", str(model_cfg), "--data", str(dataset),
        "--mode", "single_frame", "--epochs", "2", "--batch", "4",
        "--limit", "4", "--lr", "0.001", "--out", str(out),
    ])
    assert code == 0
    return out


class TestGenData:
    def test_reruns_are_byte_identical(self, tmp_path, capsys):
        argv = ["gen-data", "--count", "3", "--seed", "7", "--image-size", "32",
                "--cycle-len", "16"]
        a, b = tmp_path / "a", tmp_path / "b"
        code1, rep1, _ = run(capsys, *argv, "--out", str(a))
        code2, _, _ = run(capsys, *argv, "--out", str(b))
        assert code1 == code2 == 0
        assert rep1["cases"] == 3
        assert tree_bytes(a) == tree_bytes(b)

    def test_zero_cases_writes_header_only(self, tmp_path, capsys):
        code, rep, _ = run(capsys, "gen-data", "--count", "0",
                           "--out", str(tmp_path / "d"))
        assert code == 0 and rep["frames"] == 0
        text = (tmp_path / "d" / "annotations.csv").read_text()
        assert text.startswith("case_id,") and text.count("\n") == 1

    def test_split_counts_reported(self, dataset, capsys):
        code, rep, _ = run(capsys, "gen-data", "--count", "4", "--seed", "3",
                           "--image-size", "32", "--cycle-len", "16",
                           "--ratios", "2,1,1", "--out", str(dataset))
        assert code == 0
        assert rep["splits"] == {"train": 2, "val": 1, "test": 1}

    def test_negative_count_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--count", "-1",
                           "--out", str(tmp_path))
        assert code == 1 and "count" in err


class TestConfigMerging:
    def test_flags_beat_config_file_beat_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"count": 2, "seed": 5, "image_size": 32}))
        code, rep, _ = run(capsys, "gen-data", "--config", str(cfg),
                           "--count", "1", "--out", str(tmp_path / "d"))
        assert code == 0
        assert rep["config"]["count"] == 1  # flag wins
        assert rep["config"]["seed"] == 5  # file beats default 0
        assert rep["config"]["noise_level"] == 0.3  # untouched default

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochz": 3}))
        code, _, err = run(capsys, "gen-data", "--config", str(cfg),
                           "--out", str(tmp_path / "d"))
        assert code == 1 and "unknown config keys" in err

    def test_malformed_config_file_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        code, _, err = run(capsys, "gen-data", "--config", str(cfg),
                           "--out", str(tmp_path / "d"))
        assert code == 1 and "config file" in err

    def test_float_epochs_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 2.5}))
        code, _, err = run(capsys, "gen-data", "--config", str(cfg),
                           "--out", str(tmp_path / "d"))
        assert code == 1 and "epochs" in err

    def test_thread_cap_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("ECHOGRAPH_THREADS", "2")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        code, rep, _ = run(capsys, "gen-data", "--count", "0",
                           "--out", str(tmp_path / "d"))
        assert code == 0 and rep["config"]["threads"] == 2

    def test_bad_thread_cap_env(self, tmp_path, capsys, monkeypatch):
        for bad in ("zero?", "0"):
            monkeypatch.setenv("ECHOGRAPH_THREADS", bad)
            code, _, err = run(capsys, "gen-data", "--count", "0",
                               "--out", str(tmp_path / "d"))
            assert code == 1 and "ECHOGRAPH_THREADS" in err


class TestTrain:
    def test_outputs_exist(self, trained, capsys):
        assert (trained / "model.egrf").exists()
        assert (trained / "train_report.json").exists()
        losses = (trained / "losses.csv").read_text().splitlines()
        assert losses[0].startswith("epoch,train_loss")
        assert len(losses) == 3  # header + 2 epochs
        report = json.loads((trained / "train_report.json").read_text())
        assert report["command"] == "train"
        assert report["config"]["mode"] == "single_frame"
        assert report["val_samples"] is not None

    def test_same_seed_same_curve(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "m.json"
        cfg.write_text(json.dumps(MODEL_OVERRIDES))
        argv = ["train", "--config", str(cfg), "--data", str(dataset),
                "--mode", "single_frame", "--epochs", "2", "--batch", "4",
                "--limit", "4"]
        code1, _, _ = run(capsys, *argv, "--out", str(tmp_path / "r1"))
        code2, _, _ = run(capsys, *argv, "--out", str(tmp_path / "r2"))
        assert code1 == code2 == 0
        assert (tmp_path / "r1" / "losses.csv").read_bytes() == (
            tmp_path / "r2" / "losses.csv"
        ).read_bytes()

    def test_resume_continues_step_counter(self, dataset, trained, tmp_path, capsys):
        before = load_checkpoint(trained / "model.egrf").step_counter
        code, rep, _ = run(
            capsys, "train", "--data", str(dataset), "--mode", "single_frame",
            "--ckpt", str(trained / "model.egrf"), "--epochs", "1",
            "--batch", "4", "--limit", "4", "--out", str(tmp_path / "r"),
        )
        assert code == 0
        after = load_checkpoint(tmp_path / "r" / "model.egrf").step_counter
        assert after == before + 1

    def test_missing_mode_rejected(self, dataset, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", str(dataset),
                           "--out", str(tmp_path / "r"))
        assert code == 1 and "--mode" in err

    def test_mode_mismatch_on_resume(self, dataset, trained, tmp_path, capsys):
        code, _, err = run(
            capsys, "train", "--data", str(dataset),
            "--mode", "multi_frame_known", "--ckpt", str(trained / "model.egrf"),
            "--epochs", "1", "--window", "8", "--out", str(tmp_path / "r"),
        )
        assert code == 1 and "checkpoint" in err

    def test_descent_guard_flag_reaches_report(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "m.json"
        cfg.write_text(json.dumps(MODEL_OVERRIDES))
        code, rep, _ = run(
            capsys, "train", "--config", str(cfg), "--data", str(dataset),
            "--mode", "single_frame", "--epochs", "2", "--batch", "4",
            "--limit", "4", "--descent-guard", "--out", str(tmp_path / "r"),
        )
        assert code == 0
        assert rep["config"]["descent_guard"] is True
        assert rep["rejected_epochs"] >= 0


class TestInferFrame:
    def test_keypoints_csv(self, dataset, trained, tmp_path, capsys):
        video = dataset / "videos" / "case000000.egvd"
        code, rep, _ = run(capsys, "infer-frame", "--data", str(video),
                           "--ckpt", str(trained / "model.egrf"),
                           "--out", str(tmp_path / "o"))
        assert code == 0 and rep["frames"] == 16
        lines = (tmp_path / "o" / "keypoints.csv").read_text().splitlines()
        assert lines[0].startswith("case_id,frame_idx,x0,y0")
        assert len(lines) == 17
        first = lines[1].split(",")
        assert first[0] == "case000000" and first[1] == "0"
        assert len(first) == 2 + 2 * 42
        coords = np.array(first[2:], dtype=np.float64)
        assert np.isfinite(coords).all()

    def test_multi_frame_checkpoint_rejected(self, dataset, tmp_path, capsys):
        ckpt = tiny_checkpoint(tmp_path / "m.egrf", "multi_frame_known")
        video = dataset / "videos" / "case000000.egvd"
        code, _, err = run(capsys, "infer-frame", "--data", str(video),
                           "--ckpt", str(ckpt), "--out", str(tmp_path / "o"))
        assert code == 1 and "single_frame" in err

    def test_missing_checkpoint_file(self, dataset, tmp_path, capsys):
        video = dataset / "videos" / "case000000.egvd"
        code, _, err = run(capsys, "infer-frame", "--data", str(video),
                           "--ckpt", str(tmp_path / "nope.egrf"),
                           "--out", str(tmp_path / "o"))
        assert code == 1 and err.startswith("error:")


class TestInferVideo:
    def test_classifier_windows(self, dataset, tmp_path, capsys):
        ckpt = tiny_checkpoint(tmp_path / "c.egrf", "multi_frame_classifier")
        video = dataset / "videos" / "case000001.egvd"
        code, rep, _ = run(capsys, "infer-video", "--mode", "classifier",
                           "--data", str(video), "--ckpt", str(ckpt),
                           "--out", str(tmp_path / "o"))
        assert code == 0 and rep["status"] == "ok"
        assert [w["start"] for w in rep["windows"]] == [0, 4, 8]
        for w in rep["windows"]:
            assert w["start"] <= w["ed_index"] < w["start"] + 8
            assert w["status"] in ("ok", "swapped_order")
        assert isinstance(rep["mean_ef"], float)
        on_disk = json.loads((tmp_path / "o" / "ef_report.json").read_text())
        assert on_disk == rep

    def test_classifier_stride_flag(self, dataset, tmp_path, capsys):
        ckpt = tiny_checkpoint(tmp_path / "c.egrf", "multi_frame_classifier")
        video = dataset / "videos" / "case000001.egvd"
        code, rep, _ = run(capsys, "infer-video", "--mode", "classifier",
                           "--stride", "8", "--data", str(video),
                           "--ckpt", str(ckpt))
        assert code == 0
        assert [w["start"] for w in rep["windows"]] == [0, 8]

    def test_two_stage_untrained_frame_model_errors(self, dataset, tmp_path, capsys):
        # An untrained frame model collapses every contour to one point,
        # which cannot support a volume curve.
        frame = tiny_checkpoint(tmp_path / "f.egrf", "single_frame")
        clip = tiny_checkpoint(tmp_path / "k.egrf", "multi_frame_known")
        video = dataset / "videos" / "case000001.egvd"
        code, _, err = run(capsys, "infer-video", "--mode", "two-stage",
                           "--data", str(video), "--ckpt", str(clip),
                           "--frame-ckpt", str(frame),
                           "--out", str(tmp_path / "o"))
        assert code == 1 and "frame 0" in err

    def test_two_stage_requires_frame_ckpt(self, dataset, tmp_path, capsys):
        clip = tiny_checkpoint(tmp_path / "k.egrf", "multi_frame_known")
        video = dataset / "videos" / "case000001.egvd"
        code, _, err = run(capsys, "infer-video", "--mode", "two-stage",
                           "--data", str(video), "--ckpt", str(clip))
        assert code == 1 and "--frame-ckpt" in err

    def test_mode_is_required(self, dataset, tmp_path, capsys):
        clip = tiny_checkpoint(tmp_path / "k.egrf", "multi_frame_known")
        video = dataset / "videos" / "case000001.egvd"
        code, _, err = run(capsys, "infer-video", "--data", str(video),
                           "--ckpt", str(clip))
        assert code == 1 and "--mode" in err


class TestEval:
    def test_single_frame_eval(self, dataset, trained, tmp_path, capsys):
        code, rep, _ = run(capsys, "eval", "--data", str(dataset),
                           "--ckpt", str(trained / "model.egrf"),
                           "--split", "train", "--out", str(tmp_path / "o"))
        assert code == 0
        assert rep["cases"] == 2 and rep["model_mode"] == "single_frame"
        assert 0.0 <= rep["dice"]["mean"] <= 1.0
        assert rep["mke_pct"]["mean"] >= 0.0
        lines = (tmp_path / "o" / "cases.csv").read_text().splitlines()
        assert lines[0] == "case_id,frame_idx,phase,dice,mke_pct,hausdorff_px"
        ids = [line.split(",")[0] for line in lines[1:]]
        assert ids == sorted(ids)

    def test_known_mode_eval(self, dataset, tmp_path, capsys):
        ckpt = tiny_checkpoint(tmp_path / "k.egrf", "multi_frame_known")
        code, rep, _ = run(capsys, "eval", "--data", str(dataset),
                           "--ckpt", str(ckpt), "--split", "train",
                           "--out", str(tmp_path / "o"))
        assert code == 0
        assert rep["ef_regressed"]["n"] == 2
        assert rep["degenerate_ef_cases"] == 2  # untrained contours
        assert rep["ef_from_keypoints"] is None

    def test_classifier_eval(self, dataset, tmp_path, capsys):
        ckpt = tiny_checkpoint(tmp_path / "c.egrf", "multi_frame_classifier")
        code, rep, _ = run(capsys, "eval", "--data", str(dataset),
                           "--ckpt", str(ckpt), "--split", "train",
                           "--out", str(tmp_path / "o"))
        assert code == 0
        assert rep["windows"] > 0
        assert rep["ef_regressed"]["n"] == 2

    def test_empty_split_rejected(self, dataset, trained, tmp_path, capsys):
        empty = tmp_path / "empty"
        code = main(["gen-data", "--count", "2", "--image-size", "32",
                     "--cycle-len", "16", "--ratios", "1,0,0",
                     "--out", str(empty)])
        capsys.readouterr()
        assert code == 0
        code, _, err = run(capsys, "eval", "--data", str(empty),
                           "--ckpt", str(trained / "model.egrf"),
                           "--split", "test", "--out", str(tmp_path / "o"))
        assert code == 1 and "empty" in err


class TestBench:
    def test_report_fields(self, tmp_path, capsys):
        ckpt = tiny_checkpoint(tmp_path / "s.egrf", "single_frame")
        code, rep, _ = run(capsys, "bench", "--ckpt", str(ckpt),
                           "--reps", "5", "--out", str(tmp_path / "o"))
        assert code == 0
        timing = rep["per_frame_ms"]
        assert 0 < timing["p5"] <= timing["median"] <= timing["p95"]
        assert rep["parameter_count"] == rep["parameter_count_formula"] > 0
        assert rep["frames_per_pass"] == 1 and rep["reps"] == 5
        assert (tmp_path / "o" / "bench_report.json").exists()

    def test_multi_frame_per_frame_latency(self, tmp_path, capsys):
        ckpt = tiny_checkpoint(tmp_path / "k.egrf", "multi_frame_known", clip=8)
        code, rep, _ = run(capsys, "bench", "--ckpt", str(ckpt), "--reps", "3")
        assert code == 0 and rep["frames_per_pass"] == 8


def test_console_module_entry(tmp_path):
    out = tmp_path / "d"
    proc = subprocess.run(
        [sys.executable, "-m", "echograph.cli", "gen-data", "--count", "1",
         "--image-size", "32", "--cycle-len", "16", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["cases"] == 1 and (out / "annotations.csv").exists()
