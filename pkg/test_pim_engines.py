import numpy as np
import pytest

from dram_core import AccessKind, DramConfig, DramState, MemoryAccess, RowPolicy, row_address
from errors import MaskRangeMismatch, PartitionViolation
from pim_engines import (LocalityMonitor, PeiRequest, PimConfig, PimEngine, PimOp, Route, RowCloneRequest,
                         execute_pei, execute_rowclone, route_pei)

ALL = [1] * 16


def test_monitor_ignore_flag_then_host_route():
    monitor = LocalityMonitor(capacity=8, routing_threshold=2)
    routes = [monitor.route(7) for _ in range(4)]
    assert routes == [Route.MEMORY_PCU, Route.MEMORY_PCU, Route.MEMORY_PCU, Route.HOST_PCU]
    assert not monitor.entries[7].ignore_flag


def test_monitor_fresh_entry_has_ignore_flag():
    monitor = LocalityMonitor()
    assert route_pei(monitor, PeiRequest("p", 64 * 5)) is Route.MEMORY_PCU
    assert monitor.entries[5].ignore_flag


def test_monitor_evicts_least_recently_used():
    monitor = LocalityMonitor(capacity=2)
    monitor.route(1)
    monitor.route(2)
    monitor.route(1)
    monitor.route(3)
    assert list(monitor.entries) == [1, 3]
    assert len(monitor) == 2


def test_negative_op_latency_rejected():
    with pytest.raises(ValueError):
        PeiRequest("p", 0, op_latency_cycles=-1)


def test_pei_latency_classes(engine):
    cold = engine.pei("p", 0, 1, 0)
    assert cold.routed_to is Route.MEMORY_PCU
    assert cold.per_bank_outcomes[0].kind is AccessKind.EMPTY
    assert cold.latency_cycles == 35 + 112 + 3
    hit = engine.pei("p", 0, 1, cold.completion_cycle, line=1)
    assert hit.latency_cycles == 35 + 76 + 3 == 114
    conflict = engine.pei("p", 0, 2, hit.completion_cycle)
    assert conflict.per_bank_outcomes[0].kind is AccessKind.CONFLICT
    assert conflict.latency_cycles == 35 + 148 + 3 == 186


def test_pei_host_route_does_not_touch_dram(engine):
    t = 0
    for _ in range(3):
        t = engine.pei("p", 4, 9, t).completion_cycle
    before = (engine.dram.banks[4].open_row, engine.dram.banks[4].busy_until_cycle, dict(engine.dram.counts))
    out = engine.pei("p", 4, 9, t)
    assert out.routed_to is Route.HOST_PCU
    assert out.latency_cycles == 32 + 3
    assert out.per_bank_outcomes == []
    assert (engine.dram.banks[4].open_row, engine.dram.banks[4].busy_until_cycle, dict(engine.dram.counts)) == before


def test_nop_is_free(engine):
    out = engine.pei("p", 0, 1, 500, op=PimOp.NOP)
    assert out.latency_cycles == 0 and out.completion_cycle == 500
    assert engine.dram.perf_metrics()["num_act"] == 0


def test_execute_pei_direct(dram, pim_cfg):
    monitor = LocalityMonitor()
    req = PeiRequest("p", row_address(2, 3, dram.cfg))
    out = execute_pei(dram, monitor, req, 0, pim_cfg)
    assert dram.banks[2].open_row == 3
    assert out.completion_cycle == out.latency_cycles


def test_rowclone_single_bank_cold(engine):
    mask = [0] * 16
    mask[5] = 1
    out = engine.rowclone("p", 2, 3, mask, 0)
    # issue overhead, ACT src, t_ras later ACT dst, then t_rcd + controller
    assert out.latency_cycles == 38 + 36 + 36 + 40 == 150
    assert engine.dram.banks[5].open_row == 3
    assert all(b.open_row is None for i, b in enumerate(engine.dram.banks) if i != 5)


def test_rowclone_hit_and_conflict_classes(engine):
    first = engine.rowclone("p", 2, 3, ALL, 0)
    hit = engine.rowclone("p", 3, 2, ALL, first.completion_cycle)
    assert hit.latency_cycles == 38 + 76 == 114
    conflict = engine.rowclone("p", 4, 5, ALL, hit.completion_cycle)
    assert conflict.latency_cycles == 38 + 148 == 186
    assert {o.kind for o in conflict.per_bank_outcomes} == {AccessKind.CONFLICT}
    engine.dram.check_ras()


@pytest.mark.parametrize("seed", range(100))
def test_rowclone_latency_independent_of_popcount(seed):
    rng = np.random.default_rng(seed)
    mask = [int(b) for b in rng.integers(0, 2, size=16)]
    if not any(mask):
        mask[int(rng.integers(0, 16))] = 1
    a = PimEngine(DramState(DramConfig()), PimConfig()).rowclone("p", 2, 3, mask, 0)
    b = PimEngine(DramState(DramConfig()), PimConfig()).rowclone("p", 2, 3, ALL, 0)
    assert a.latency_cycles == b.latency_cycles
    assert len(a.per_bank_outcomes) == sum(mask)


def test_rowclone_rejects_bad_masks(engine):
    with pytest.raises(ValueError):
        engine.rowclone("p", 2, 3, [0] * 16, 0)
    with pytest.raises(MaskRangeMismatch):
        engine.rowclone("p", 2, 3, [1] * 8, 0)
    with pytest.raises(MaskRangeMismatch):
        engine.rowclone("p", 2, 2, ALL, 0)


def test_rowclone_rejects_bad_ranges(dram, pim_cfg):
    row = dram.cfg.row_size_bytes
    span = row * 16
    cases = [
        RowCloneRequest("p", (0, span), (span * 2, span - row), tuple(ALL)),  # unequal
        RowCloneRequest("p", (64, span), (span * 2, span), tuple(ALL)),  # unaligned
        RowCloneRequest("p", (0, span), (row, span), tuple(ALL)),  # shifted by one bank
        RowCloneRequest("p", (0, row), (span, row), tuple(ALL)),  # mask covers banks outside the range
    ]
    for req in cases:
        with pytest.raises(MaskRangeMismatch):
            execute_rowclone(dram, req, 0, pim_cfg)
    assert all(b.open_row is None for b in dram.banks)


def test_rowclone_is_atomic_against_other_processes(engine):
    out = engine.rowclone("sender", 2, 3, ALL, 0)
    other = engine.dram.access(MemoryAccess("receiver", 0, 3, 10))
    assert other.completion_cycle - other.latency_cycles >= out.completion_cycle


def test_rowclone_respects_partition():
    cfg = DramConfig(partition_map={"sender": frozenset(range(8, 16)), "receiver": frozenset(range(8))})
    engine = PimEngine(DramState(cfg), PimConfig())
    with pytest.raises(PartitionViolation):
        engine.rowclone("sender", 2, 3, ALL, 0)
    assert all(b.open_row is None for b in engine.dram.banks)
    out = engine.rowclone("sender", 2, 3, [0] * 8 + [1] * 8, 0)
    assert len(out.per_bank_outcomes) == 8


def test_rowclone_constant_time_hides_row_state():
    engine = PimEngine(DramState(DramConfig(row_policy=RowPolicy.CONSTANT_TIME)), PimConfig())
    a = engine.rowclone("p", 2, 3, ALL, 0)
    b = engine.rowclone("p", 3, 2, ALL, a.completion_cycle)
    c = engine.rowclone("p", 6, 7, ALL, b.completion_cycle)
    assert a.latency_cycles == b.latency_cycles == c.latency_cycles == 38 + 148
