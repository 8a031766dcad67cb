"""Scenario specs and runs, benchmark edge cases and the CLI."""

import csv
import json

import pytest

from stageqos.harness.bench import bench_control, bench_overhead, bench_stage, percentile
from stageqos.harness.cli import main
from stageqos.harness.scenario import ScenarioError, ScenarioSpec, run_scenario, run_scenarios


def small_spec(**kw):
    data = dict(
        name="small", max_rate=1000, algorithm="psfa", total_load=400, seed=3,
        jobs=[
            dict(job_id="a", demand=300, load_share=0.5, trace=dict(seconds=3, op_type="getattr")),
            dict(job_id="b", demand=300, load_share=0.5, start_offset_s=1, trace=dict(seconds=2)),
        ],
    )
    data.update(kw)
    return data


@pytest.mark.parametrize("patch, match", [
    (dict(mode="cluster"), "mode"),
    (dict(jobs=[dict(job_id="a"), dict(job_id="a")]), "unique"),
    (dict(jobs=[dict(job_id="a", load_share=0.3)]), "sum"),
    (dict(jobs=[dict(job_id="a", load_share=1.0), dict(job_id="b")]), "all jobs or none"),
    (dict(jobs=[dict(job_id="a", start_offset_s=-1)]), "start_offset"),
    (dict(burst_seconds=0), "burst_seconds"),
    (dict(algorithm="fastest"), "policy"),
    (dict(colour="red"), "colour"),
    (dict(total_load=None, jobs=[dict(job_id="a")]), "no mean_rate"),
])
def test_spec_validation(patch, match):
    with pytest.raises(ScenarioError, match=match):
        ScenarioSpec.from_dict(small_spec(**patch))


def test_spec_round_trips_through_dict():
    spec = ScenarioSpec.from_dict(small_spec())
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec


def test_load_share_sets_mean_rate():
    spec = ScenarioSpec.from_dict(small_spec())
    assert [spec.mean_rate_for(j) for j in spec.jobs] == [200, 200]


def test_empty_job_list_runs_to_nothing(tmp_path):
    result = run_scenario(ScenarioSpec.from_dict(small_spec(jobs=[], total_load=None)), tmp_path, plots=False)
    assert not result.failed and result.seconds == 0 and result.makespan is None
    assert (tmp_path / "jobs.csv").read_text().strip() == "second,job_id,submitted,completed"


@pytest.mark.parametrize("algorithm", ["psfa", "baseline"])
def test_thread_run_writes_artifacts(tmp_path, algorithm):
    result = run_scenario(ScenarioSpec.from_dict(small_spec(algorithm=algorithm)), tmp_path, plots=False)
    assert not result.failed, result.failure
    summary = json.loads((tmp_path / "summary.json").read_text())
    for job in ("a", "b"):
        assert summary["jobs"][job]["submitted"] == summary["jobs"][job]["completed"] > 0
    rows = list(csv.DictReader(open(tmp_path / "jobs.csv")))
    assert len(rows) == result.seconds * 2
    assert (tmp_path / "controller.csv").exists() == (algorithm != "baseline")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok" and "jobs.csv" in manifest["files"]


def test_completion_time_counts_from_start_offset(tmp_path):
    result = run_scenario(ScenarioSpec.from_dict(small_spec()), None, plots=False)
    b = result.outcomes["b"]
    assert b.completion_time == b.finished - 1


def test_process_mode_run(tmp_path):
    spec = small_spec(mode="process", startup_grace_s=8.0,
                      jobs=[dict(job_id="a", demand=300, load_share=1.0, trace=dict(seconds=2))])
    result = run_scenario(ScenarioSpec.from_dict(spec), tmp_path, plots=False)
    assert not result.failed, result.failure
    a = result.summary()["jobs"]["a"]
    assert a["submitted"] == a["completed"] > 0


def test_run_scenarios_in_order(tmp_path):
    specs = [ScenarioSpec.from_dict(small_spec(name=n, algorithm=alg))
             for n, alg in (("one", "uniform"), ("two", "psharing"))]
    summaries = run_scenarios(specs, tmp_path, plots=False)
    assert [s["name"] for s in summaries] == ["one", "two"]
    assert (tmp_path / "two" / "summary.json").exists()


def test_run_scenarios_rejects_duplicate_names(tmp_path):
    spec = ScenarioSpec.from_dict(small_spec())
    with pytest.raises(ScenarioError):
        run_scenarios([spec, spec], tmp_path)


@pytest.mark.parametrize("values, q, expected", [
    ([], 50, None),
    ([5], 99, 5),
    ([1, 2, 3, 4], 50, 2),
    (list(range(1, 101)), 99, 99),
    (list(range(1, 101)), 100, 100),
])
def test_percentile(values, q, expected):
    assert percentile(values, q) == expected


def test_bench_zero_cases():
    assert bench_stage((1,), 0) == []
    (row,) = bench_control((1,), 0)
    assert row.p50_us is None and row.p99_us is None
    res = bench_overhead(0)
    assert res.overhead is None and res.overhead_pct == "N/A"


def test_bench_stage_small():
    (row,) = bench_stage((2,), 2000)
    assert row.requests == 4000 and row.ops_per_s > 0


def test_cli_gen_trace(tmp_path, capsys):
    assert main(["gen-trace", str(tmp_path), "--seconds", "30", "--mean-rate", "100"]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["close_log.txt", "getattr_log.txt", "open_log.txt", "rename_log.txt", "unlink_log.txt"]
    assert "getattr" in capsys.readouterr().out


def test_cli_run_scenario(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(small_spec()))
    assert main(["run-scenario", str(spec), "--out", str(tmp_path / "run"), "--no-plots"]) == 0
    first = json.loads(capsys.readouterr().out.splitlines()[0])
    assert first["name"] == "small" and first["failed"] is False


def test_cli_bench_stage_and_overhead(tmp_path):
    assert main(["bench-stage", "--threads", "1", "--requests", "500", "--out", str(tmp_path / "s"),
                 "--no-plots"]) == 0
    assert (tmp_path / "s" / "bench_stage.csv").exists()
    assert main(["bench-overhead", "--seconds", "1", "--rate", "200", "--out", str(tmp_path / "o")]) == 0
    row = next(csv.DictReader(open(tmp_path / "o" / "bench_overhead.csv")))
    assert row["overhead"].endswith("%")


def test_cli_reports_bad_spec(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps(small_spec(mode="cluster")))
    assert main(["run-scenario", str(spec), "--out", str(tmp_path / "r")]) == 2
    assert "error" in capsys.readouterr().err
