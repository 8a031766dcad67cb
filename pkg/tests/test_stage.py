"""Stage data path: mountpoints, FD tracking, channels, stats and sinks."""

import os
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FdReference
from stageqos.requests import Request
from stageqos.sinks import DirectorySink, NullSink, RecordingSink, make_sink
from stageqos.stage import (
    CreateChannel,
    DuplicateChannel,
    MountpointRegistry,
    SetChannelRate,
    Stage,
    StageClosed,
    StageInfo,
    UnknownChannel,
)


def new_stage(sink=None, mounts=("/scratch",), job="j1", **kw):
    return Stage(StageInfo("s1", job, os.getpid(), "host", "alice"), sink or NullSink(), mounts, **kw)


def req(op, target, **kw):
    kw.setdefault("job_id", "j1")
    kw.setdefault("user_id", "alice")
    return Request(op, target, **kw)


@pytest.mark.parametrize("path, managed", [
    ("/scratch", True),
    ("/scratch/a/b", True),
    ("/scratch/", True),
    ("/scratch/./a", True),
    ("/scratchy/a", False),
    ("/scratchy", False),
    ("/tmp/scratch", False),
    ("/scratch/../etc", False),
    ("/", False),
])
def test_mountpoint_component_prefix(path, managed):
    """A mountpoint captures itself and what lies below it, nothing else."""
    assert MountpointRegistry(["/scratch"]).is_managed(path) is managed


def test_register_idempotent_and_normalized():
    reg = MountpointRegistry(["/scratch/", "/scratch", "/data//x"])
    assert list(reg) == ["/scratch", "/data/x"]


def test_register_relative_rejected():
    with pytest.raises(ValueError):
        MountpointRegistry(["scratch"])


def test_root_mountpoint_manages_everything():
    assert MountpointRegistry(["/"]).is_managed("/anything/at/all")


def test_stage_info_needs_job():
    with pytest.raises(ValueError):
        Stage(StageInfo("s", "", 1, "h"), NullSink())


def test_no_rules_fails_open():
    """Managed requests bypass until a channel exists."""
    stage = new_stage()
    rec = stage.submit(req("open", "/scratch/f"))
    assert rec.channel_id is None and rec.error is None
    assert stage.fds.is_managed(rec.result)


def test_open_records_fd_and_close_removes_it():
    stage = new_stage()
    stage.create_channel(1, "job", "j1", 1e9)
    fd = stage.submit(req("open", "/scratch/f")).result
    assert stage.fds.is_managed(fd)
    assert stage.submit(req("read", fd, size=10)).channel_id == 1
    stage.submit(req("close", fd))
    assert fd not in stage.fds
    assert stage.submit(req("read", fd, size=10)).channel_id is None


def test_unmanaged_fd_bypasses_without_counting():
    stage = new_stage()
    stage.create_channel(1, "job", "j1", 1e9)
    fd = stage.submit(req("open", "/tmp/x")).result
    assert not stage.fds.is_managed(fd)
    stage.collect_stats()
    assert stage.submit(req("read", fd, size=100)).channel_id is None
    (ch,) = stage.collect_stats().channels
    assert ch.ops == 0 and ch.bytes == 0


def test_unknown_fd_bypasses():
    stage = new_stage()
    stage.create_channel(1, "job", "j1", 1e9)
    assert stage.submit(req("read", 999, size=1)).channel_id is None


def test_op_class_channel_routes_all_metadata_ops():
    stage = new_stage()
    stage.create_channel(1, "op_class", "metadata", 1e9)
    assert stage.submit(req("open", "/scratch/a")).channel_id == 1
    assert stage.submit(req("rename", "/scratch/a", dest="/scratch/b")).channel_id == 1
    assert stage.submit(req("getattr", "/scratch/a")).channel_id is None


@pytest.mark.parametrize("gran, value, hit, miss", [
    ("op_type", "getattr", req("getattr", "/scratch/a"), req("open", "/scratch/a")),
    ("op_class", "extended_attributes", req("setattr", "/scratch/a"), req("mkdir", "/scratch/d")),
    ("job", "j1", req("mkdir", "/scratch/d"), req("open", "/scratch/a", job_id="j2")),
    ("user", "alice", req("open", "/scratch/a"), req("open", "/scratch/a", user_id="bob")),
])
def test_channel_granularities(gran, value, hit, miss):
    stage = new_stage()
    stage.create_channel(7, gran, value, 1e9)
    assert stage.route(hit).channel_id == 7
    assert stage.route(miss) is None
    assert stage.submit(hit).channel_id == 7
    assert stage.submit(miss).channel_id is None


def test_unmanaged_path_never_routed():
    stage = new_stage()
    stage.create_channel(1, "op_type", "open", 1e9)
    assert stage.submit(req("open", "/scratchy/a")).channel_id is None


def test_two_granularities_coexist():
    stage = new_stage()
    stage.create_channel(1, "op_type", "getattr", 1e9)
    stage.create_channel(2, "user", "alice", 1e9)
    assert stage.submit(req("getattr", "/scratch/a")).channel_id == 1
    assert stage.submit(req("open", "/scratch/a")).channel_id == 2


def test_duplicate_channel_id_and_matcher():
    stage = new_stage()
    stage.create_channel(1, "job", "j1", 10)
    with pytest.raises(DuplicateChannel):
        stage.create_channel(1, "job", "j2", 10)
    with pytest.raises(DuplicateChannel):
        stage.create_channel(2, "job", "j1", 10)


def test_unknown_channel_rate():
    stage = new_stage()
    with pytest.raises(UnknownChannel, match="unknown channel"):
        stage.apply_housekeeping_rule(SetChannelRate(99, 5))


def test_housekeeping_rules_apply():
    stage = new_stage()
    stage.apply_housekeeping_rule(CreateChannel(3, "op_type", "open", 10))
    stage.apply_housekeeping_rule(SetChannelRate(3, 20))
    assert stage.channels[3].bucket.rate == 20
    assert stage.wait_ready(0)


def test_one_op_per_second_paces_second_open():
    """At 1 op/s the second back-to-back open waits about a second."""
    stage = new_stage()
    stage.create_channel(1, "op_class", "metadata", 1)
    first = stage.submit(req("open", "/scratch/a"))
    second = stage.submit(req("open", "/scratch/b"))
    assert (second.granted_at - first.granted_at) / 1e9 >= 0.95


def test_rate_change_drains_queue():
    """1000 queued ops drain in about two seconds at 500 ops/s."""
    stage = new_stage()
    stage.create_channel(1, "job", "j1", 0)
    done = threading.Semaphore(0)
    for i in range(1000):
        stage.submit_nowait(req("open", f"/scratch/{i}"), lambda rec: done.release())
    t0 = time.monotonic()
    stage.set_channel_rate(1, 500)
    for _ in range(1000):
        assert done.acquire(timeout=10)
    assert 1.6 <= time.monotonic() - t0 <= 3.0


def test_fifo_within_channel():
    sink = RecordingSink()
    stage = new_stage(sink)
    stage.create_channel(1, "job", "j1", 2000)
    left = threading.Semaphore(0)
    names = [f"/scratch/{i}" for i in range(500)]
    for name in names:
        stage.submit_nowait(req("getattr", name), lambda rec: left.release())
    for _ in names:
        assert left.acquire(timeout=10)
    assert [r.target for r in sink.log] == names


def test_oversized_data_request_is_split():
    """A read larger than the bucket completes after enough draws."""
    stage = new_stage()
    stage.create_channel(1, "op_class", "data", 10_000)
    fd = stage.submit(req("open", "/scratch/f")).result
    t0 = time.monotonic()
    rec = stage.submit(req("read", fd, size=3000))
    assert rec.error is None and rec.channel_id == 1
    assert time.monotonic() - t0 >= 0.15
    (ch,) = stage.collect_stats().channels
    assert ch.bytes == 3000 and ch.ops == 1


def test_collect_stats_delta():
    stage = new_stage()
    stage.create_channel(1, "job", "j1", 1e9)
    (idle,) = stage.collect_stats().channels
    assert idle.ops == 0 and idle.bytes == 0
    for i in range(100):
        stage.submit(req("getattr", f"/scratch/{i}"))
    time.sleep(0.05)
    (busy,) = stage.collect_stats().channels
    assert busy.ops == 100
    assert busy.ops_per_s == pytest.approx(100 * 1e9 / busy.window_ns)
    (again,) = stage.collect_stats().channels
    assert again.ops == 0


def test_stats_without_channels():
    assert new_stage().collect_stats().channels == ()


def test_close_fails_pending():
    stage = new_stage()
    stage.create_channel(1, "job", "j1", 0)
    records = []
    got = threading.Event()
    stage.submit_nowait(req("open", "/scratch/a"), lambda r: None)  # takes the one token
    stage.submit_nowait(req("open", "/scratch/b"), lambda r: (records.append(r), got.set()))
    stage.close()
    assert got.wait(2)
    assert isinstance(records[0].error, StageClosed)
    with pytest.raises(StageClosed):
        stage.submit(req("open", "/scratch/c"))


def test_sink_errors_travel_in_record(tmp_path):
    stage = new_stage(DirectorySink(tmp_path))
    rec = stage.submit(req("unlink", "/scratch/missing"))
    assert isinstance(rec.error, FileNotFoundError)


def test_directory_sink_applies_and_confines(tmp_path):
    sink = DirectorySink(tmp_path)
    stage = new_stage(sink)
    stage.submit(req("mkdir", "/scratch"))
    fd = stage.submit(req("open", "/scratch/f")).result
    assert stage.submit(req("write", fd, size=5)).result == 5
    stage.submit(req("close", fd))
    assert (tmp_path / "scratch" / "f").stat().st_size == 5
    with pytest.raises(PermissionError):
        sink.resolve("/scratch/../../outside")


def test_make_sink():
    assert isinstance(make_sink("recording"), RecordingSink)
    with pytest.raises(ValueError):
        make_sink("directory")
    with pytest.raises(ValueError):
        make_sink("tape")


actions = st.lists(
    st.one_of(
        st.tuples(st.just("open"), st.sampled_from(["/scratch/a", "/scratch/d/b", "/scratchy/c", "/tmp/e"])),
        st.tuples(st.sampled_from(["close", "read"]), st.integers(0, 30)),
    ),
    max_size=60,
)


@settings(max_examples=100, deadline=None)
@given(actions=actions, with_channel=st.booleans())
def test_fd_lifecycle_matches_reference(actions, with_channel):
    """FDs are managed exactly between an open on a managed path and its close."""
    stage = new_stage()
    if with_channel:
        stage.create_channel(1, "job", "j1", 1e9)
    ref = FdReference(["/scratch"])
    fds = []
    for op, arg in actions:
        if op == "open":
            fd = stage.submit(req("open", arg)).result
            ref.opened(fd, arg)
            fds.append(fd)
            continue
        fd = fds[arg % len(fds)] if fds else 3 + arg
        if op == "close":
            stage.submit(req("close", fd))
            ref.closed(fd)
        else:
            rec = stage.submit(req("read", fd, size=1))
            expected = 1 if (with_channel and ref.fd_managed(fd)) else None
            assert rec.channel_id == expected
        for known in fds:
            assert stage.fds.is_managed(known) == ref.fd_managed(known)
