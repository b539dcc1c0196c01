import pandas as pd
import pytest

from utils.bench import STAGES, BenchReport, bench_corpus, run_benchmark
from utils.config import BenchConfig, PipelineConfig
from utils.errors import BudgetExceeded, ConfigError


def _report(p99_total, budget):
    stages = pd.DataFrame({"stage": list(STAGES), "mean_ms": [0.1] * 4, "p50_ms": [0.1] * 4,
                           "p99_ms": [0.2, 0.3, 0.4, p99_total]})
    return BenchReport(stages=stages, frames=100, balls=2, fps=2000.0, budget_ms=budget)


def test_report_passes_inside_budget():
    report = _report(5.0, 6.6)
    assert report.passed
    report.check()
    assert report.summary()["p99_ms"] == 5.0


def test_report_over_budget_raises():
    report = _report(7.0, 6.6)
    assert not report.passed
    with pytest.raises(BudgetExceeded):
        report.check()


def test_empty_corpus_is_a_config_error():
    with pytest.raises(ConfigError, match="bench.frames"):
        bench_corpus(BenchConfig(frames=0))


def test_corpus_stays_inside_the_frame_range():
    streams = bench_corpus(BenchConfig(frames=200, balls=2), seed=3)
    assert set(streams) == {"left", "right"}
    assert all(d.frame_index < 200 for dets in streams.values() for d in dets)
    assert len(streams["left"]) > 100


def test_small_benchmark_times_every_stage():
    config = PipelineConfig(bench=BenchConfig(frames=300, balls=1, segment_every=150, budget_ms=1e5))
    report = run_benchmark(config)
    assert list(report.stages["stage"]) == list(STAGES)
    assert report.frames <= 300
    assert (report.stages[["mean_ms", "p50_ms", "p99_ms"]].to_numpy() >= 0).all()
    total = report.stages.set_index("stage").loc["total", "p99_ms"]
    assert total >= report.stages.set_index("stage").loc["tracking", "p50_ms"]
    report.check()
