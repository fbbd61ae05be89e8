import csv

import pytest

import impact_cli
from impact_cli import ExperimentName, ExperimentSpec, main, run_experiment


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_ini(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text("[mitigation]\naccesses = 400\n[sidechannel]\nreads = 9\n", encoding="utf-8")
    return str(path)


def test_latency_gap(tmp_path):
    assert main(["latency-gap", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "latency-gap.csv")
    hits = [int(r["latency_cycles"]) for r in rows if r["class"] == "hit"]
    conflicts = [int(r["latency_cycles"]) for r in rows if r["class"] == "conflict"]
    gap = sum(conflicts) / len(conflicts) - sum(hits) / len(hits)
    assert 70 <= gap <= 78
    summary = (tmp_path / "latency-gap.summary.txt").read_text()
    assert "raw model gap t_rp + t_rcd: 72" in summary


@pytest.mark.parametrize("name", ["poc-pnm", "poc-pum"])
def test_poc_decodes_message(tmp_path, name):
    assert main([name, "--out", str(tmp_path), "--message", "0xA5A5"]) == 0
    rows = _rows(tmp_path / f"{name}.csv")
    assert len(rows) == 16
    assert all(r["sent_bit"] == r["decoded_bit"] for r in rows)
    assert "decoded: A5A5" in (tmp_path / f"{name}.summary.txt").read_text()


def test_runs_are_byte_identical(tmp_path):
    for out in ("a", "b"):
        assert main(["poc-pnm", "--out", str(tmp_path / out), "--random-bits", "64", "--seed", "5",
                     "--noise-rate", "1.5"]) == 0
    for suffix in (".csv", ".summary.txt"):
        a = (tmp_path / "a" / f"poc-pnm{suffix}").read_bytes()
        b = (tmp_path / "b" / f"poc-pnm{suffix}").read_bytes()
        assert a == b


def test_sender_breakdown(tmp_path):
    outcome = run_experiment(ExperimentSpec(name=ExperimentName.SENDER_BREAKDOWN, out_dir=str(tmp_path)))
    rows = {r["kind"]: r for r in _rows(outcome.csv_path)}
    ratio = int(rows["pnm"]["sender_cycles"]) / int(rows["pum"]["sender_cycles"])
    assert 10 <= ratio <= 18


def test_throughput_sweep_ordering(tmp_path):
    assert main(["throughput-sweep", "--out", str(tmp_path), "--random-bits", "256"]) == 0
    rows = _rows(tmp_path / "throughput-sweep.csv")
    assert list(rows[0])[:5] == ["kind", "llc_size_mb", "llc_ways", "bit_cost_cycles", "throughput_mbps"]
    assert list(rows[0])[5:] == ["sweep"]
    by_point = {}
    for r in rows:
        by_point.setdefault((r["sweep"], r["llc_size_mb"], r["llc_ways"]), {})[r["kind"]] = float(r["throughput_mbps"])
    for point, t in by_point.items():
        assert t["pum_channel"] > t["pnm_channel"] > t["pnm_offchip"], point
        assert t["pnm_offchip"] >= t["dma_engine"] > t["drama_clflush"] > t["drama_eviction"], point
        assert t["dma_engine"] == pytest.approx(5.27, rel=0.1)
        assert t["direct_access"] == pytest.approx(11.27, rel=0.1)


def test_mitigation_channel(tmp_path):
    assert main(["mitigation-channel", "--out", str(tmp_path), "--random-bits", "64"]) == 0
    rows = _rows(tmp_path / "mitigation-channel.csv")
    assert list(rows[0])[-2:] == ["outcome", "calibration"]
    assert len(rows) == 8
    outcome = {(r["kind"], r["policy"]): r for r in rows}
    assert outcome[("pnm", "partition")]["outcome"] == "partition_violation"
    assert outcome[("pum", "partition")]["outcome"] == "partition_violation"
    assert outcome[("pnm", "open")]["errors"] == "0"
    assert outcome[("pnm", "constant")]["calibration"] == "failed"
    assert outcome[("pnm", "open")]["calibration"] == "150"


def test_mitigation_overhead_with_config(tmp_path, small_ini):
    assert main(["mitigation-overhead", "--config", small_ini, "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "mitigation-overhead.csv")
    assert len(rows) == 15
    assert {r["policy"] for r in rows} == {"open", "closed", "constant"}


def test_side_channel_sweep_small(tmp_path, small_ini):
    assert main(["side-channel-sweep", "--config", small_ini, "--out", str(tmp_path), "--banks", "64,128"]) == 0
    rows = _rows(tmp_path / "side-channel-sweep.csv")
    assert [r["n_banks"] for r in rows] == ["64", "128"]
    with open(tmp_path / "side-channel-sweep.csv", encoding="utf-8") as fh:
        header = fh.readline().strip()
    assert header == "n_banks,entries_per_row,throughput_mbps,error_rate,accuracy,total_cycles,seed_len"
    assert all(float(r["error_rate"]) < 0.15 for r in rows)


def test_victim_rate_sets_victim_think_time(tmp_path, small_ini, monkeypatch):
    seen = {}

    def fake_sweep(cfg, dram_cfg, pim_cfg, seed):
        seen["think"] = cfg.victim_think_cycles
        return []

    monkeypatch.setattr(impact_cli, "sweep_banks", fake_sweep)
    assert main(["side-channel-sweep", "--config", small_ini, "--out", str(tmp_path), "--victim-rate", "400"]) == 0
    assert seen == {"think": 400}


def test_config_from_environment(tmp_path, small_ini, monkeypatch):
    monkeypatch.setenv("IMPACT_CONFIG", small_ini)
    monkeypatch.setenv("IMPACT_SEED", "42")
    assert main(["mitigation-overhead", "--out", str(tmp_path)]) == 0
    summary = (tmp_path / "mitigation-overhead.summary.txt").read_text()
    assert "seed: 42" in summary
    assert f"config: {small_ini}" in summary


def test_unknown_experiment_is_usage_error(tmp_path, capsys):
    assert main(["no-such-run", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "unknown experiment no-such-run" in err


def test_several_experiments_need_parallel(tmp_path):
    assert main(["latency-gap,poc-pum", "--out", str(tmp_path)]) == 2


def test_parallel_runs(tmp_path):
    assert main(["latency-gap,poc-pum", "--parallel", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "latency-gap.csv").exists()
    assert (tmp_path / "poc-pum.csv").exists()


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[dram]\nn_banks = 12\n", encoding="utf-8")
    assert main(["latency-gap", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert f"{bad}:2: [dram] n_banks" in capsys.readouterr().err


def test_bad_message_exits_2(tmp_path):
    assert main(["poc-pnm", "--message", "zz", "--out", str(tmp_path)]) == 2


def test_domain_failure_exits_1(tmp_path, monkeypatch, capsys):
    def boom(spec, cfg):
        raise impact_cli.CalibrationFailed("overlap")

    monkeypatch.setitem(impact_cli.RUNNERS, ExperimentName.LATENCY_GAP, boom)
    assert main(["latency-gap", "--out", str(tmp_path)]) == 1
    assert "CalibrationFailed" in capsys.readouterr().err
