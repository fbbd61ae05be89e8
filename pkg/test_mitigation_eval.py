import pytest

from dram_core import DramConfig, RowPolicy
from mitigation_eval import (AccessTrace, WorkloadProfile, default_profiles, gen_trace, overhead_report, report_rows,
                             run_trace)


@pytest.fixture(scope="module")
def report():
    return overhead_report(default_profiles(), DramConfig())


def test_single_stream_replay_per_policy():
    trace = AccessTrace([[(0, 1), (0, 1)]])
    assert run_trace(trace, DramConfig(), RowPolicy.OPEN_TIMEOUT) == 112 + 76
    assert run_trace(trace, DramConfig(), RowPolicy.CLOSED_ROW) == 112 + 112
    assert run_trace(trace, DramConfig(), RowPolicy.CONSTANT_TIME) == 148 + 148


def test_think_time_is_added_between_accesses():
    trace = AccessTrace([[(0, 1), (0, 1)]], think_cycles=50)
    assert run_trace(trace, DramConfig(), RowPolicy.OPEN_TIMEOUT) == 112 + 50 + 76


def test_streams_interleave():
    trace = AccessTrace([[(0, 1)], [(1, 1)]])
    assert run_trace(trace, DramConfig(), RowPolicy.OPEN_TIMEOUT) == 112
    assert len(trace) == 2


def test_full_reuse_trace_stays_on_one_row():
    profile = WorkloadProfile(name="x", llc_mpki=0.1, row_reuse_prob=1.0, accesses=50, streams=1)
    trace = gen_trace(profile, DramConfig())
    assert len(set(trace.streams[0])) == 1


def test_trace_is_seeded():
    profile = WorkloadProfile(name="x", llc_mpki=1.0, row_reuse_prob=0.5, accesses=200, seed=4)
    assert gen_trace(profile, DramConfig()).streams == gen_trace(profile, DramConfig()).streams
    other = profile.model_copy(update={"seed": 5})
    assert gen_trace(profile, DramConfig()).streams != gen_trace(other, DramConfig()).streams


def test_overhead_ordering(report):
    assert report.mean_ctd_overhead_pct > report.mean_crp_overhead_pct > 0
    assert all(p.ctd_overhead_pct > 0 for p in report.profiles)


def test_high_reuse_profiles_pay_most_for_constant_time(report):
    ranked = sorted(report.profiles, key=lambda p: p.ctd_overhead_pct, reverse=True)
    assert {p.profile for p in ranked[:2]} == {"bc", "pr"}
    by_name = {p.profile: p for p in report.profiles}
    assert by_name["bc"].baseline_hit_rate > by_name["cc"].baseline_hit_rate


def test_overhead_calibration_ranges(report):
    assert 20.0 <= report.mean_ctd_overhead_pct <= 35.0
    assert 10.0 <= report.mean_crp_overhead_pct <= 22.0


def test_report_rows(report):
    rows = report_rows(report)
    assert len(rows) == 3 * len(report.profiles)
    assert [r["policy"] for r in rows[:3]] == ["open", "closed", "constant"]
    assert rows[0]["overhead_pct"] == 0.0


def test_overhead_report_needs_profiles():
    with pytest.raises(ValueError):
        overhead_report([], DramConfig())


def test_default_profiles():
    profiles = default_profiles(accesses=10, seed=100)
    assert [p.name for p in profiles] == ["bc", "pr", "tc", "bfs", "cc"]
    assert [p.seed for p in profiles] == [100, 101, 102, 103, 104]


def test_constant_time_total_is_n_times_worst_case():
    profile = WorkloadProfile(name="x", llc_mpki=1.0, row_reuse_prob=0.5, accesses=300, streams=1, think_cycles=0)
    trace = gen_trace(profile, DramConfig())
    assert run_trace(trace, DramConfig(), RowPolicy.CONSTANT_TIME) == 300 * 148


def test_full_reuse_pays_for_closed_rows():
    profile = WorkloadProfile(name="x", llc_mpki=0.1, row_reuse_prob=1.0, accesses=300, streams=1)
    trace = gen_trace(profile, DramConfig())
    baseline = run_trace(trace, DramConfig(), RowPolicy.OPEN_TIMEOUT)
    assert run_trace(trace, DramConfig(), RowPolicy.CLOSED_ROW) > baseline
    assert run_trace(trace, DramConfig(), RowPolicy.OPEN_TIMEOUT) == baseline


REUSE_GRID = [0.25, 0.5, 0.75, 1.0]


@pytest.fixture(scope="module")
def reuse_grid():
    profiles = [WorkloadProfile(name=f"reuse{r}", llc_mpki=1.0, row_reuse_prob=r, accesses=4000, seed=3, streams=1)
                for r in REUSE_GRID]
    return overhead_report(profiles, DramConfig()).profiles


@pytest.mark.parametrize("index", range(len(REUSE_GRID)))
def test_constant_time_costs_most_and_open_row_least(reuse_grid, index):
    p = reuse_grid[index]
    assert p.ctd_cycles >= p.crp_cycles >= p.baseline_cycles


def test_overhead_grows_with_row_reuse(reuse_grid):
    crp = [p.crp_overhead_pct for p in reuse_grid]
    ctd = [p.ctd_overhead_pct for p in reuse_grid]
    assert crp == sorted(crp) and len(set(crp)) == len(crp)
    assert ctd == sorted(ctd) and len(set(ctd)) == len(ctd)


def test_default_profiles_keep_policy_ordering(report):
    for p in report.profiles:
        assert p.ctd_cycles >= p.crp_cycles >= p.baseline_cycles


def test_no_reuse_costs_nothing_under_closed_rows():
    profile = WorkloadProfile(name="x", llc_mpki=40.0, row_reuse_prob=0.0, accesses=4000, seed=3, streams=1)
    [p] = overhead_report([profile], DramConfig()).profiles
    # a fresh row mostly lands in a bank whose last row has already timed out
    assert abs(p.crp_overhead_pct) <= 5.0
    assert p.ctd_overhead_pct > 5.0
