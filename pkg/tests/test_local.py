"""Local controller: registration, stats proxying and rule fan-out."""

import os
import time

import pytest

from stageqos import protocol as proto
from stageqos.local import (
    LocalController,
    RegistrationError,
    StageConfig,
    StageLink,
    node_stats,
)
from stageqos.protocol import CollectReq, CollectResp, Rule, StatsEntry
from stageqos.requests import Request
from stageqos.sinks import NullSink
from stageqos.stage import CreateChannel, SetChannelRate, Stage, StageInfo

S = 1_000_000_000


def make_stage(job="j1", pid=None, user=""):
    return Stage(StageInfo("", job, os.getpid() if pid is None else pid, "host", user), NullSink(), ["/scratch"])


@pytest.fixture
def lc():
    ctl = LocalController("n0", "127.0.0.1:0", stats_timeout=0.2)
    yield ctl
    ctl.close()


def wait_until(pred, timeout=2.0):
    deadline = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > deadline:
            return False
        time.sleep(0.01)
    return True


def test_registration_assigns_ids(lc):
    a = lc.attach_stage(make_stage(pid=1))
    b = lc.attach_stage(make_stage(pid=2))
    assert a != b and a.startswith("n0/")
    assert {s.info.job_id for s in lc.sessions.values()} == {"j1"}


def test_duplicate_job_pid_rejected(lc):
    lc.attach_stage(make_stage(pid=7))
    with pytest.raises(RegistrationError):
        lc.attach_stage(make_stage(pid=7))


def test_empty_job_rejected(lc):
    with pytest.raises(RegistrationError):
        lc.register_stage(StageInfo("", "", 1, "h"), make_stage())


def test_socket_registration_rejects_empty_job(lc):
    stage = make_stage()
    stage.info = StageInfo("", "", 1, "h")
    with pytest.raises(RegistrationError):
        StageLink(stage, lc.address)


@pytest.mark.parametrize("entries, expected", [
    ([StatsEntry("a", "j1", 1, 3000, 0, S), StatsEntry("b", "j1", 1, 4000, 0, S)], {"j1": 7000.0}),
    ([StatsEntry("a", "j1", 1, 500, 0, S // 2), StatsEntry("b", "j2", 1, 10, 0, S)], {"j1": 1000.0, "j2": 10.0}),
    ([], {}),
])
def test_node_stats_sums_per_job(entries, expected):
    assert node_stats(entries).ops_per_s == expected


def test_no_stages_reports_nothing(lc):
    assert lc.collect_entries() == []
    assert lc.aggregate_and_report().ops_per_s == {}


def test_stats_pass_through_unchanged(lc):
    """Upstream sees exactly the counters the stages produced."""
    stages = [make_stage(pid=1), make_stage(pid=2)]
    link = StageLink(stages[1], lc.address)
    lc.attach_stage(stages[0])
    for s in stages:
        s.create_channel(1, "job", "j1", 1e9)
    for i in range(30):
        stages[0].submit(Request("open", f"/scratch/{i}", job_id="j1"))
    for i in range(12):
        stages[1].submit(Request("open", f"/scratch/{i}", job_id="j1"))
    resp = lc.handle_upstream(CollectReq())
    by_stage = {e.stage_id: e.ops for e in resp.entries}
    assert sorted(by_stage.values()) == [12, 30]
    assert by_stage[link.stage_id] == 12
    link.close()


def test_stage_without_channels_still_listed(lc):
    sid = lc.attach_stage(make_stage())
    (entry,) = lc.collect_entries()
    assert (entry.stage_id, entry.channel_id, entry.window_ns, entry.flags) == (sid, 0, 0, 0)


def test_slow_stage_reported_stale(lc):
    stage = make_stage()
    stage.create_channel(1, "job", "j1", 1e9)
    real = stage.collect_stats
    stage.collect_stats = lambda: (time.sleep(0.6), real())[1]
    link = StageLink(stage, lc.address)
    t0 = time.monotonic()
    (entry,) = lc.collect_entries()
    assert time.monotonic() - t0 < 0.5
    assert entry.stale and entry.ops == 0 and entry.window_ns == 0
    assert node_stats([entry]).stale == (link.stage_id,)
    link.close()


def test_dead_stage_flagged_gone_once(lc):
    link = StageLink(make_stage(), lc.address)
    sid = link.stage_id
    link.close()
    assert wait_until(lambda: sid not in lc.sessions)
    (entry,) = lc.collect_entries()
    assert entry.gone and entry.stage_id == sid
    assert lc.collect_entries() == []


def test_detached_stage_flagged_gone(lc):
    sid = lc.attach_stage(make_stage())
    lc.detach_stage(sid)
    (entry,) = lc.collect_entries()
    assert entry.gone


def test_rules_reach_remote_and_local_stages(lc):
    remote, local = make_stage(pid=1), make_stage(pid=2)
    link = StageLink(remote, lc.address)
    sid = lc.attach_stage(local)
    acks = lc.apply_rules([
        Rule(link.stage_id, CreateChannel(1, "job", "j1", 100.0)),
        Rule(sid, CreateChannel(1, "job", "j1", 50.0)),
        Rule(link.stage_id, SetChannelRate(1, 250.0)),
    ])
    assert [a.status for a in acks] == [proto.STATUS_OK] * 3
    assert remote.channels[1].bucket.rate == 250.0
    assert local.channels[1].bucket.rate == 50.0
    link.close()


def test_rule_for_unknown_stage(lc):
    (ack,) = lc.apply_rules([Rule("nope", SetChannelRate(1, 1.0))])
    assert ack.status == proto.STATUS_ERROR and "unknown stage" in ack.detail


def test_stage_rule_error_is_negative_ack(lc):
    sid = lc.attach_stage(make_stage())
    ack = lc.apply_rule(Rule(sid, SetChannelRate(9, 1.0)))
    assert ack.status == proto.STATUS_ERROR and "unknown channel" in ack.detail


def test_empty_rule_list(lc):
    assert lc.apply_rules([]) == []


def test_upstream_handler_shapes(lc):
    assert lc.handle_upstream(CollectReq()) == CollectResp(())
    with pytest.raises(proto.ProtocolError):
        lc.handle_upstream(proto.SetPolicy("{}"))


def test_stage_config_file(tmp_path, lc):
    path = tmp_path / "stage.conf"
    path.write_text(f"job_id = j9\nuser_id = bob\nmountpoints = /scratch, /proj\ncontroller = {lc.address}\n")
    cfg = StageConfig.load(path)
    assert cfg.mountpoints == ("/scratch", "/proj")
    link = cfg.connect()
    assert link.stage.info.job_id == "j9" and link.stage_id in lc.sessions
    assert link.stage.registry.is_managed("/proj/x")
    link.close()


@pytest.mark.parametrize("text", ["user_id = x\n", "job_id = j\ncolour = red\n"])
def test_stage_config_rejects_bad_files(text):
    with pytest.raises(ValueError):
        StageConfig.from_text(text)
