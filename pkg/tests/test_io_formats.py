import json

import numpy as np
import pytest

from utils.datatypes import SpinLabel, Trajectory3D
from utils.errors import SchemaError
from utils.geometry import Detection2D
from utils.io_formats import (SCHEMA_VERSION, read_detections, read_spin_results, read_tracks, read_trajectories,
                              record_kind, write_detections, write_spin_results, write_tracks, write_trajectories)
from utils.simulator import render_detections, simulate_rally
from utils.spin import analyze_rally
from utils.tracker import StereoTracker, TrackStatus


def _detections():
    return {0: [Detection2D("left", 0, (10.5, 20.25)), Detection2D("left", 1, (11.0, 21.0), confidence=0.0)],
            3: [Detection2D("right", 7, (1.0, 2.0), confidence=0.5)]}


def test_detections_round_trip(tmp_path):
    path = tmp_path / "detections.jsonl"
    assert write_detections(str(path), _detections()) == 3
    loaded = read_detections(str(path))
    assert loaded[0]["left"] == _detections()[0]
    assert loaded[3]["right"][0].confidence == 0.5
    assert record_kind(str(path)) == "detection"


def test_every_record_carries_kind_and_version(tmp_path):
    path = tmp_path / "detections.jsonl"
    write_detections(str(path), _detections())
    for text in path.read_text().splitlines():
        record = json.loads(text)
        assert record["kind"] == "detection"
        assert record["schema"] == SCHEMA_VERSION


def test_unknown_fields_are_ignored(tmp_path):
    path = tmp_path / "detections.jsonl"
    record = {"kind": "detection", "schema": 1, "rally_id": 0, "camera_id": "left", "frame_index": 2,
              "pixel": [1.0, 2.0], "shutter": "global"}
    path.write_text(json.dumps(record) + "\n")
    (det,) = read_detections(str(path))[0]["left"]
    assert det.frame_index == 2
    assert det.confidence == 1.0


@pytest.mark.parametrize("bad, message", [
    ("{broken", "invalid JSON"),
    ('[1, 2]', "JSON object"),
    ('{"kind": "track", "schema": 1}', "expected a 'detection' record"),
    ('{"kind": "detection", "schema": 2}', "schema version"),
    ('{"kind": "detection", "schema": 1, "rally_id": 0, "camera_id": "left", "frame_index": 1}', "pixel"),
    ('{"kind": "detection", "schema": 1, "rally_id": 0, "camera_id": "left", "frame_index": 1.5, '
     '"pixel": [1, 2]}', "frame_index"),
])
def test_bad_lines_name_path_and_line(tmp_path, bad, message):
    path = tmp_path / "detections.jsonl"
    good = json.dumps({"kind": "detection", "schema": 1, "rally_id": 0, "camera_id": "left",
                       "frame_index": 0, "pixel": [1.0, 2.0]})
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(SchemaError, match=message) as info:
        read_detections(str(path))
    assert info.value.line == 2
    assert str(info.value).startswith(f"{path}:2:")


def test_missing_file(tmp_path):
    with pytest.raises(SchemaError, match="file not found"):
        read_detections(str(tmp_path / "absent.jsonl"))


def test_trajectory_round_trip_keeps_events(generator, table, tmp_path):
    truth = simulate_rally(generator.generate_rally(rally_id=5, n_hits=2), table)
    path = tmp_path / "truth.jsonl"
    write_trajectories(str(path), [truth])
    (loaded,) = read_trajectories(str(path))
    assert loaded.rally_id == 5
    assert loaded.source == "simulated"
    np.testing.assert_array_equal(loaded.frame_index, truth.frame_index)
    np.testing.assert_array_equal(loaded.positions, truth.positions)
    assert [(e.kind, e.frame_index) for e in loaded.events] == [(e.kind, e.frame_index) for e in truth.events]
    assert [h.label for h in loaded.hits] == [h.label for h in truth.hits]


def test_trajectory_output_is_byte_stable(generator, table, tmp_path):
    truth = simulate_rally(generator.serve(), table)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_trajectories(str(a), [truth])
    write_trajectories(str(b), [truth])
    assert a.read_bytes() == b.read_bytes()


def test_non_finite_sample_leaves_no_file(tmp_path):
    bad = Trajectory3D(frame_index=np.arange(3), positions=[[0, 0, 1], [0, np.nan, 1], [0, 0, 1]])
    path = tmp_path / "bad.jsonl"
    with pytest.raises(ValueError):
        write_trajectories(str(path), [bad])
    assert not path.exists()


def test_frames_must_increase_within_a_rally(tmp_path):
    path = tmp_path / "samples.jsonl"
    lines = [{"kind": "sample", "schema": 1, "rally_id": 0, "source": "tracked", "frame_index": f,
              "position": [0.0, 0.0, 1.0]} for f in (0, 1, 1)]
    path.write_text("".join(json.dumps(r) + "\n" for r in lines))
    with pytest.raises(SchemaError) as info:
        read_trajectories(str(path))
    assert info.value.line == 3


def test_tracks_round_trip(generator, rig, table, tmp_path):
    script = generator.serve()
    truth = simulate_rally(script, table)
    tracks = StereoTracker(*rig).run(render_detections(truth, rig, 0.5, 0.0, script.rng_seed))
    path = tmp_path / "tracks.jsonl"
    write_tracks(str(path), {0: tracks})
    loaded = read_tracks(str(path))[0]
    assert [t.track_id for t in loaded] == [t.track_id for t in tracks]
    assert all(t.status is TrackStatus.DEAD for t in loaded)
    np.testing.assert_allclose(loaded[0].to_trajectory().positions, tracks[0].to_trajectory().positions)


def test_spin_results_round_trip(generator, table, tmp_path):
    truth = simulate_rally(generator.generate_rally(n_hits=2), table)
    analyses = analyze_rally(truth)
    path = tmp_path / "spin.jsonl"
    write_spin_results(str(path), analyses)
    rows = read_spin_results(str(path))
    assert [r["frame_index"] for r in rows] == [a.hit.frame_index for a in analyses]
    assert all(r["label"] in {l.value for l in SpinLabel} for r in rows)
    assert rows[0]["player_level"] == "professional"
