import numpy as np
import pytest

from dram_core import (AccessKind, DramConfig, DramState, MemoryAccess, RowPolicy, map_address, ns_to_cycles,
                       row_address, unmap_address)
from errors import InvariantViolation, PartitionViolation


def _random_accesses(seed, n=200, n_banks=16, n_rows=8, pids=("a",)):
    rng = np.random.default_rng(seed)
    issue = 0
    out = []
    for _ in range(n):
        issue += int(rng.integers(0, 200))
        out.append(MemoryAccess(str(rng.choice(pids)), int(rng.integers(0, n_banks)),
                                int(rng.integers(0, n_rows)), issue))
    return out


@pytest.mark.parametrize("ns,ghz,expected", [(13.5, 2.6, 36), (0, 2.6, 0), (100, 2.6, 260), (1, 1.0, 1)])
def test_ns_to_cycles(ns, ghz, expected):
    assert ns_to_cycles(ns, ghz) == expected


def test_ns_to_cycles_rejects_bad_input():
    with pytest.raises(ValueError):
        ns_to_cycles(-1, 2.6)
    with pytest.raises(ValueError):
        ns_to_cycles(1, 0)


def test_default_latency_classes(dram_cfg):
    assert dram_cfg.hit_cycles == 76
    assert dram_cfg.empty_cycles == 112
    assert dram_cfg.conflict_cycles == 148
    assert dram_cfg.conflict_cycles - dram_cfg.hit_cycles == 72


def test_config_invariants():
    with pytest.raises(ValueError):
        DramConfig(n_banks=12)
    with pytest.raises(ValueError):
        DramConfig(t_rcd_ns=20, t_ras_ns=13.5)
    with pytest.raises(ValueError):
        DramConfig(t_rp_ns=-1)
    with pytest.raises(ValueError):
        DramConfig(partition_map={"a": frozenset({0, 1}), "b": frozenset({1, 2})})
    with pytest.raises(ValueError):
        DramConfig(partition_map={"a": frozenset({16})})


def test_empty_hit_conflict_sequence(dram):
    first = dram.access(MemoryAccess("p", 3, 10, 0))
    second = dram.access(MemoryAccess("p", 3, 10, first.completion_cycle))
    third = dram.access(MemoryAccess("p", 3, 11, second.completion_cycle))
    assert [first.kind, second.kind, third.kind] == [AccessKind.EMPTY, AccessKind.HIT, AccessKind.CONFLICT]
    assert [first.latency_cycles, second.latency_cycles, third.latency_cycles] == [112, 76, 148]
    assert dram.banks[3].open_row == 11


def test_start_waits_for_busy_bank(dram):
    first = dram.access(MemoryAccess("p", 0, 1, 0))
    queued = dram.access(MemoryAccess("p", 0, 1, 10))
    assert queued.queue_cycles == first.completion_cycle - 10
    assert queued.completion_cycle == first.completion_cycle + 76
    assert queued.observed_cycles == queued.completion_cycle - 10


def test_other_banks_run_in_parallel(dram):
    a = dram.access(MemoryAccess("p", 0, 1, 0))
    b = dram.access(MemoryAccess("p", 1, 1, 0))
    assert a.completion_cycle == b.completion_cycle == 112


def test_conflict_waits_for_t_ras():
    cfg = DramConfig(t_ras_ns=100)  # 260 cycles
    dram = DramState(cfg)
    dram.access(MemoryAccess("p", 0, 1, 0))
    out = dram.access(MemoryAccess("p", 0, 2, 112))
    assert out.kind is AccessKind.CONFLICT
    # PRE may not come before ACT + 260
    assert out.latency_cycles == (260 - 112) + 148
    dram.check_ras()


def test_row_timeout_closes_idle_row(dram):
    first = dram.access(MemoryAccess("p", 0, 5, 0))
    dram.expire_rows(first.completion_cycle + 259)
    assert dram.banks[0].open_row == 5
    dram.expire_rows(first.completion_cycle + 260)
    assert dram.banks[0].open_row is None


def test_access_after_idle_bank_sees_empty(dram):
    first = dram.access(MemoryAccess("p", 0, 5, 0))
    later = dram.access(MemoryAccess("p", 0, 5, first.completion_cycle + 300))
    assert later.kind is AccessKind.EMPTY


def test_busy_neighbour_does_not_keep_idle_row_open(dram):
    dram.access(MemoryAccess("p", 0, 5, 0))
    t = 0
    for i in range(40):
        t = dram.access(MemoryAccess("p", 1, 7 + i % 2, t)).completion_cycle
    assert t == 112 + 39 * 148
    late = dram.access(MemoryAccess("p", 0, 5, t))
    assert late.kind is AccessKind.EMPTY
    assert late.latency_cycles == 112


def test_row_within_timeout_still_hits_while_neighbour_busy(dram):
    first = dram.access(MemoryAccess("p", 0, 5, 0))
    t = dram.access(MemoryAccess("p", 1, 7, 0)).completion_cycle
    t = dram.access(MemoryAccess("p", 1, 8, t)).completion_cycle
    assert t - first.completion_cycle < dram.cfg.timeout_cycles
    assert dram.access(MemoryAccess("p", 0, 5, t)).kind is AccessKind.HIT


def test_expired_row_is_precharged_by_the_controller(dram):
    first = dram.access(MemoryAccess("p", 2, 4, 0))
    dram.access(MemoryAccess("p", 2, 4, first.completion_cycle + 1000))
    pre = [c for c in dram.command_log[2] if c.command == "PRE"]
    assert [(c.cycle, c.process_id) for c in pre] == [(first.completion_cycle + 260, "controller")]
    dram.check_ras()


def test_expire_rows_is_noop_under_closed_row():
    dram = DramState(DramConfig(row_policy=RowPolicy.CLOSED_ROW))
    dram.access(MemoryAccess("p", 0, 5, 0))
    dram.expire_rows(10_000)
    assert dram.banks[0].open_row is None


@pytest.mark.parametrize("seed", range(100))
def test_closed_row_never_hits_or_conflicts(seed):
    dram = DramState(DramConfig(row_policy=RowPolicy.CLOSED_ROW))
    for acc in _random_accesses(seed):
        out = dram.access(acc)
        assert out.kind is AccessKind.EMPTY
        assert dram.banks[acc.bank].open_row is None
    dram.check_ras()


@pytest.mark.parametrize("seed", range(100))
def test_constant_time_has_one_latency(seed):
    dram = DramState(DramConfig(row_policy=RowPolicy.CONSTANT_TIME))
    latencies = {dram.access(acc).latency_cycles for acc in _random_accesses(seed)}
    assert latencies == {148}
    dram.check_ras()


@pytest.mark.parametrize("seed", range(100))
def test_open_row_latency_classes_and_ras(seed):
    dram = DramState(DramConfig())
    expected = {AccessKind.HIT: 76, AccessKind.EMPTY: 112, AccessKind.CONFLICT: 148}
    for acc in _random_accesses(seed):
        out = dram.access(acc)
        # a t_ras stall can only lengthen a conflict
        if out.kind is AccessKind.CONFLICT:
            assert out.latency_cycles >= 148
        else:
            assert out.latency_cycles == expected[out.kind]
    dram.check_ras()


@pytest.mark.parametrize("seed", range(100))
def test_identical_sequences_are_deterministic(seed):
    accesses = _random_accesses(seed)
    a, b = DramState(DramConfig()), DramState(DramConfig())
    assert [a.access(x) for x in accesses] == [b.access(x) for x in accesses]


@pytest.mark.parametrize("seed", range(100))
def test_partition_never_touches_foreign_banks(seed):
    cfg = DramConfig(partition_map={"a": frozenset(range(8)), "b": frozenset(range(8, 16))})
    dram = DramState(cfg)
    for acc in _random_accesses(seed, pids=("a", "b")):
        before = [(s.open_row, s.busy_until_cycle) for s in dram.banks]
        allowed = acc.bank in cfg.partition_map[acc.process_id]
        if allowed:
            dram.access(acc)
        else:
            with pytest.raises(PartitionViolation):
                dram.access(acc)
            assert [(s.open_row, s.busy_until_cycle) for s in dram.banks] == before


def test_unlisted_process_is_unrestricted():
    dram = DramState(DramConfig(partition_map={"a": frozenset({0})}))
    assert dram.access(MemoryAccess("noise", 5, 1, 0)).kind is AccessKind.EMPTY


def test_check_ras_flags_a_short_precharge(dram):
    dram.access(MemoryAccess("p", 0, 1, 0))
    dram.command_log[0].append(dram.command_log[0][0]._replace(cycle=10, command="PRE"))
    with pytest.raises(InvariantViolation):
        dram.check_ras()


def test_activate_pair_classes(dram):
    cold = dram.activate_pair("p", 0, 2, 3, 0)
    assert cold.kind is AccessKind.EMPTY and cold.latency_cycles == 36 + 36 + 40
    assert dram.banks[0].open_row == 3
    hit = dram.activate_pair("p", 0, 3, 2, cold.completion_cycle)
    assert hit.kind is AccessKind.HIT and hit.latency_cycles == 36 + 40
    dram.access(MemoryAccess("q", 0, 9, hit.completion_cycle))
    conflict = dram.activate_pair("p", 0, 2, 3, dram.banks[0].busy_until_cycle)
    assert conflict.kind is AccessKind.CONFLICT and conflict.latency_cycles == 36 + 36 + 36 + 40
    dram.check_ras()


def test_perf_metrics_count_commands(dram):
    dram.access(MemoryAccess("p", 0, 1, 0))
    dram.access(MemoryAccess("p", 0, 2, 200))
    metrics = dram.perf_metrics()
    assert metrics["num_empty"] == 1 and metrics["num_conflict"] == 1
    assert metrics["num_act"] == 2 and metrics["num_pre"] == 1


@pytest.mark.parametrize("addr,bank,row", [(0, 0, 0), (8192, 1, 0), (8192 * 16, 0, 1)])
def test_map_address_examples(dram_cfg, addr, bank, row):
    loc = map_address(addr, dram_cfg)
    assert (loc.bank, loc.row, loc.column) == (bank, row, 0)


def test_map_address_inverse(dram_cfg):
    rng = np.random.default_rng(7)
    for addr in rng.integers(0, 1 << 35, size=200):
        loc = map_address(int(addr), dram_cfg)
        assert unmap_address(*loc, dram_cfg) == int(addr)
    assert row_address(3, 9, dram_cfg, 64) == unmap_address(0, 0, 3, 9, 64, dram_cfg)
