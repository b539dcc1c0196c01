import pytest

from utils.datatypes import SpinLabel
from utils.report import EventScore, match_frames, pipeline_report


def test_match_frames_is_one_to_one():
    pairs = match_frames([10, 12, 50], [11, 13, 80])
    assert pairs == [(0, 0), (1, 1)]
    assert {j for _, j in pairs} == {0, 1}


def test_match_frames_prefers_the_closest_detection():
    assert match_frames([10], [8, 10, 12]) == [(0, 1)]


def test_match_frames_respects_the_tolerance():
    assert match_frames([10], [13]) == []
    assert match_frames([10], [13], tolerance=3) == [(0, 0)]


def test_event_score_rates():
    score = EventScore("bounce", true_positives=8, false_positives=2, false_negatives=0, frame_errors=[0, 1, 2])
    assert score.precision == pytest.approx(0.8)
    assert score.recall == 1.0
    assert score.max_frame_error == 2
    empty = EventScore("hit")
    assert empty.precision == 1.0 and empty.recall == 1.0


def test_event_score_add():
    total = EventScore("hit")
    total.add(EventScore("hit", true_positives=3, false_negatives=1, frame_errors=[1]))
    total.add(EventScore("hit", true_positives=2, false_positives=1, frame_errors=[0]))
    assert (total.true_positives, total.false_positives, total.false_negatives) == (5, 1, 1)
    assert total.to_dict()["recall"] == pytest.approx(5 / 6, abs=1e-6)


def test_small_pipeline_report(generator):
    scripts = generator.generate_corpus(3, 4)
    report = pipeline_report(scripts)
    summary = report.summary()
    assert summary["rallies"] == 3
    assert set(summary["events"]) == {"bounce", "hit"}
    assert report.events["bounce"].recall > 0.8
    assert report.confusion.shape == (3, 4)
    assert list(report.confusion.columns) == [label.value for label in SpinLabel]
    assert report.rmse_tracked > 0
    assert report.rmse_smoothed < report.rmse_tracked


@pytest.mark.slow
def test_event_detection_over_a_hundred_rallies(generator):
    report = pipeline_report(generator.generate_corpus(100, 6))
    for kind in ("bounce", "hit"):
        assert report.events[kind].precision >= 0.95
        assert report.events[kind].recall >= 0.95
        assert report.events[kind].max_frame_error <= 2
