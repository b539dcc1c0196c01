import json

import pandas as pd
import pytest

from utils.cli import EXIT_ANALYSIS, EXIT_OK, EXIT_USAGE, main


def _run_chain(out):
    out = str(out)
    assert main(["--out", out, "simulate", "--rallies", "2"]) == EXIT_OK
    assert main(["--out", out, "track", "--calibration", f"{out}/rig.json"]) == EXIT_OK
    assert main(["--out", out, "segment", f"{out}/tracks.jsonl", "--windows"]) == EXIT_OK
    assert main(["--out", out, "spin", f"{out}/trajectory.jsonl"]) == EXIT_OK


def test_pipeline_chain(tmp_path):
    _run_chain(tmp_path)
    for name in ("scripts.json", "rig.json", "truth.jsonl", "detections_left.jsonl", "detections_right.jsonl",
                 "corpus.csv", "tracks.jsonl", "trajectory.jsonl", "windows.jsonl", "spin.jsonl",
                 "scatter.csv", "class_counts.csv"):
        assert (tmp_path / name).is_file(), name

    scatter = pd.read_csv(tmp_path / "scatter.csv")
    assert set(scatter["rally_id"]) <= {0, 1}
    assert len(scatter) > 0

    assert main(["--out", str(tmp_path), "plot", str(tmp_path / "scatter.csv"), "--html"]) == EXIT_OK
    svg = (tmp_path / "spin_scatter.svg").read_text()
    assert "Top Cluster" in svg
    assert (tmp_path / "spin_scatter.html").is_file()

    plot_dir = tmp_path / "from_jsonl"
    assert main(["--out", str(plot_dir), "plot", str(tmp_path / "spin.jsonl"), "--facet-level", "--html"]) == EXIT_OK
    assert (plot_dir / "spin_scatter.svg").read_text().count("<path") == 3


def test_reruns_are_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    _run_chain(first)
    _run_chain(second)
    for name in ("truth.jsonl", "detections_left.jsonl", "tracks.jsonl", "trajectory.jsonl", "spin.jsonl",
                 "scatter.csv", "class_counts.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_malformed_detections_exit_with_usage_error(tmp_path):
    bad = tmp_path / "detections_left.jsonl"
    bad.write_text('{"kind": "detection", "schema": 1}\n')
    assert main(["--out", str(tmp_path), "track", str(bad)]) == EXIT_USAGE


def test_segmenting_detections_is_rejected(tmp_path):
    assert main(["--out", str(tmp_path), "simulate", "--rallies", "1"]) == EXIT_OK
    assert main(["--out", str(tmp_path), "segment", str(tmp_path / "detections_left.jsonl")]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "absent.json"), "calibrate"]) == EXIT_USAGE


def test_empty_benchmark_is_a_usage_error(tmp_path):
    assert main(["--out", str(tmp_path), "bench", "--frames", "0"]) == EXIT_USAGE


def test_benchmark_over_budget_exits_with_analysis_error(tmp_path):
    code = main(["--out", str(tmp_path), "bench", "--frames", "300", "--budget-ms", "0.0001", "--html"])
    assert code == EXIT_ANALYSIS
    summary = json.loads((tmp_path / "bench.json").read_text())
    assert summary["passed"] is False
    assert (tmp_path / "bench.csv").is_file()
    assert (tmp_path / "bench.html").is_file()


def test_calibrate_writes_one_template_per_class(tmp_path):
    assert main(["--out", str(tmp_path), "calibrate"]) == EXIT_OK
    templates = json.loads((tmp_path / "templates.json").read_text())["templates"]
    assert [t["label"] for t in templates] == ["NoSpin", "LightTopspin", "HeavyTopspin"]
    for t in templates:
        assert t["z_accel"] == pytest.approx(t["target_z_accel"], abs=0.2 * 14.5)


def test_train_toy_with_a_small_config(tmp_path):
    config = tmp_path / "toy.json"
    config.write_text(json.dumps({"toy": {"width": 16, "height": 12, "channels": 3, "seq_len": 6,
                                          "n_sequences": 6, "batch_size": 3, "occlusion_frames": 2,
                                          "smoothing": 2}}))
    code = main(["--config", str(config), "--out", str(tmp_path), "train-toy", "--steps", "2", "--html"])
    assert code == EXIT_OK
    toy = tmp_path / "toy"
    history = pd.read_csv(toy / "loss_gated.csv")
    assert len(history) == 2
    assert (toy / "auc_gated.csv").is_file()
    assert (toy / "params_gated.bin").is_file()
    assert (toy / "loss.html").is_file()


def test_report_single_rally(tmp_path):
    assert main(["--out", str(tmp_path), "report", "--rallies", "1"]) == EXIT_OK
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["rallies"] == 1
    assert set(summary["events"]) == {"bounce", "hit"}
    confusion = pd.read_csv(tmp_path / "confusion.csv", index_col=0)
    assert confusion.shape == (3, 4)
