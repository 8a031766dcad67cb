"""Traces, the synthetic generator, mix splitting and the replayer."""

import csv
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stageqos.requests import OpType
from stageqos.sinks import NullSink, RecordingSink
from stageqos.stage import Stage, StageInfo
from stageqos.workload import (
    DEFAULT_MIX,
    BurstProfile,
    RateCurveTrace,
    ReplayerConfig,
    ReplayReport,
    SinkTarget,
    generate_synthetic_trace,
    load_traces,
    mix_report,
    replay,
    scaled_counts,
    schedule_for_sample,
    split_by_mix,
)


@given(st.sampled_from(list(OpType)), st.lists(st.integers(0, 10**6), min_size=1, max_size=50))
def test_trace_save_load_round_trip(tmp_path_factory, op, samples):
    d = tmp_path_factory.mktemp("traces")
    trace = RateCurveTrace(op, tuple(samples))
    path = trace.save(d)
    assert path.name == f"{op.value}_log.txt"
    assert RateCurveTrace.load(path) == trace


def test_load_traces_reads_directory(tmp_path):
    RateCurveTrace("open", (1, 2)).save(tmp_path)
    RateCurveTrace("getattr", (3,)).save(tmp_path)
    (tmp_path / "notes.txt").write_text("ignored")
    assert [t.op_type for t in load_traces(tmp_path)] == [OpType.GETATTR, OpType.OPEN]


@pytest.mark.parametrize("name, body", [
    ("open_log.txt", "1\nx\n"),
    ("open.txt", "1\n"),
    ("bogus_log.txt", "1\n"),
    ("open_log.txt", "\n"),
    ("open_log.txt", "-3\n"),
])
def test_bad_trace_files(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body)
    with pytest.raises(ValueError):
        RateCurveTrace.load(path)


def test_generator_is_deterministic():
    a = generate_synthetic_trace(7, 200, 1000)
    assert a == generate_synthetic_trace(7, 200, 1000)
    assert a != generate_synthetic_trace(8, 200, 1000)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("mean", [500, 5000])
def test_generator_shape(seed, mean):
    """Realised mean on target; bursts reach the multiplier; quiet seconds exist."""
    profile = BurstProfile(burst_prob=0.05, burst_multiplier=5.0, quiet_prob=0.2)
    s = np.array(generate_synthetic_trace(seed, 600, mean, profile).samples)
    assert s.mean() == pytest.approx(mean, rel=0.01)
    assert s.max() >= 5 * mean * 0.99
    assert s.max() <= 7.5 * mean + 1
    assert (s <= 0.25 * mean).mean() >= 0.1


def test_generator_rejects_infeasible_bursts():
    with pytest.raises(ValueError):
        generate_synthetic_trace(0, 100, 1000, BurstProfile(burst_prob=0.5, burst_multiplier=10, quiet_prob=0.2))


@pytest.mark.parametrize("kw", [dict(burst_prob=1.5), dict(burst_prob=0.6, quiet_prob=0.6),
                                dict(burst_multiplier=0.5)])
def test_burst_profile_validation(kw):
    with pytest.raises(ValueError):
        BurstProfile(**kw)


@settings(max_examples=100)
@given(st.lists(st.integers(0, 100_000), min_size=1, max_size=40))
def test_split_by_mix_preserves_totals(curve):
    parts = split_by_mix(curve)
    for s, total in enumerate(curve):
        assert sum(p.samples[s] for p in parts) == total


def test_split_by_mix_follows_default_mix():
    curve = generate_synthetic_trace(3, 300, 4000).samples
    report = mix_report(split_by_mix(curve))
    names = {"getattr": "getattr", "close": "close", "open": "open", "rename": "rename", "other": "unlink"}
    for name, share in DEFAULT_MIX.items():
        assert report[names[name]] == pytest.approx(share, abs=0.02)


def test_mix_report_of_silence():
    assert mix_report([RateCurveTrace("open", (0, 0))]) == {"open": 0.0}


@given(st.lists(st.integers(0, 1000), max_size=50), st.sampled_from([0.1, 0.37, 1.0, 2.5]))
def test_scaled_counts_keep_total(samples, scale):
    out = scaled_counts(samples, scale)
    assert len(out) == len(samples)
    assert abs(sum(out) - sum(samples) * scale) < 1 + 1e-6


def test_schedule_interleaves_evenly():
    sched = schedule_for_sample({OpType.OPEN: 2, OpType.GETATTR: 4, OpType.CLOSE: 0})
    assert [round(f, 3) for f, _ in sched] == [0.125, 0.25, 0.375, 0.625, 0.75, 0.875]
    assert sum(op is OpType.OPEN for _, op in sched) == 2


def fast(traces, **kw):
    """Replay config where one sample lasts 0.1 s."""
    kw.setdefault("time_compression", 600.0)
    return ReplayerConfig(traces, **kw)


@pytest.mark.parametrize("threads", [1, 3])
def test_replay_against_sink_completes_everything(threads):
    traces = [RateCurveTrace("open", (20, 0, 30)), RateCurveTrace("close", (10, 5, 30))]
    report = replay(fast(traces, threads=threads, time_compression=60.0), SinkTarget(NullSink()))
    assert report.total_submitted == report.total_completed == 95
    assert report.drained and report.errors == 0 and report.aborted is None
    assert report.per_second("submitted")[:3] == [30, 5, 60]


@pytest.mark.parametrize("threads", [1, 2, 4])
def test_replay_thread_count_does_not_change_the_mix(threads):
    traces = [RateCurveTrace("getattr", (40, 12)), RateCurveTrace("rename", (7, 3))]
    sink = RecordingSink()
    report = replay(fast(traces, threads=threads), SinkTarget(sink))
    assert Counter(r.op_type.value for r in sink.log) == {"getattr": 52, "rename": 10}
    assert report.total_completed == 62


def test_replay_scale_and_identity():
    sink = RecordingSink()
    report = replay(fast([RateCurveTrace("mkdir", (10, 10))], rate_scale=0.5, job_id="jx", user_id="u"),
                    SinkTarget(sink))
    assert report.total_submitted == 10
    assert {(r.job_id, r.user_id) for r in sink.log} == {("jx", "u")}
    assert all(str(r.target).startswith("/scratch/jx/") for r in sink.log)


def test_closes_reuse_opened_descriptors():
    sink = RecordingSink()
    replay(fast([RateCurveTrace("open", (5, 0)), RateCurveTrace("close", (0, 5))]), SinkTarget(sink))
    closes = [r for r in sink.log if r.op_type is OpType.CLOSE]
    assert closes and all(isinstance(r.target, int) for r in closes)


def test_throttled_replay_shows_backlog():
    """A stage slower than the input keeps completing after the input stops."""
    stage = Stage(StageInfo("s", "j", os.getpid(), "h"), NullSink(), ["/scratch"])
    stage.create_channel(1, "job", "j", 150)
    report = replay(ReplayerConfig([RateCurveTrace("getattr", (300,))], job_id="j"), stage)
    stage.close()
    assert report.drained and report.total_completed == 300
    completed = report.per_second()
    assert len(completed) >= 2 and sum(completed[1:]) >= 100


def test_report_rows_and_csv(tmp_path):
    report = ReplayReport(("open", "close"), {"open": [1, 2], "close": [0]}, {"open": [1], "close": [0, 3]})
    assert report.rows() == [(0, "open", 1, 1), (0, "close", 0, 0), (1, "open", 2, 0), (1, "close", 0, 3)]
    report.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["second", "op_type", "submitted", "completed"] and len(rows) == 5


@pytest.mark.parametrize("kw", [dict(threads=0), dict(time_compression=0), dict(rate_scale=-1)])
def test_replayer_config_validation(kw):
    with pytest.raises(ValueError):
        ReplayerConfig([], **kw)


def test_sample_period():
    assert ReplayerConfig([], time_compression=60).sample_period == 1.0
    assert ReplayerConfig([], time_compression=1).sample_period == 60.0
