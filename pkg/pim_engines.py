"""
PiM Engines

Near-bank PEI execution routed by a locality monitor (PnM) and RowClone Fast
Parallel Mode bulk copies with a per-bank mask (PuM), both executed against a
DramState.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

from pydantic import BaseModel, Field

import defaults
from dram_core import AccessOutcome, DramState, MemoryAccess, Origin, map_address, row_address
from errors import InvariantViolation, MaskRangeMismatch

logger = logging.getLogger(__name__)


class PimOp(str, Enum):
    ADD = "add"
    NOP = "nop"


class Route(str, Enum):
    HOST_PCU = "host_pcu"
    MEMORY_PCU = "memory_pcu"


class PimConfig(BaseModel):
    pei_op_latency_cycles: int = Field(defaults.PEI_OP_LATENCY_CYCLES, ge=0)
    offload_transit_cycles: int = Field(defaults.OFFLOAD_TRANSIT_CYCLES, ge=0)
    rowclone_issue_overhead_cycles: int = Field(defaults.ROWCLONE_ISSUE_OVERHEAD_CYCLES, ge=0)
    pmu_capacity: int = Field(defaults.PMU_CAPACITY, ge=1)
    pmu_routing_threshold: int = Field(defaults.PMU_ROUTING_THRESHOLD, ge=1)
    line_size_bytes: int = Field(defaults.LINE_SIZE_BYTES, gt=0)
    host_hit_cycles: int = Field(defaults.HOST_HIT_CYCLES, ge=0)


@dataclass(frozen=True)
class PeiRequest:
    process_id: str
    target_addr: int
    op: PimOp = PimOp.ADD
    op_latency_cycles: int = defaults.PEI_OP_LATENCY_CYCLES

    def __post_init__(self):
        if self.op_latency_cycles < 0:
            raise ValueError(f"op latency must be >= 0, got {self.op_latency_cycles}")


@dataclass(frozen=True)
class RowCloneRequest:
    process_id: str
    src_range: Tuple[int, int]  # (start address, length in bytes)
    dst_range: Tuple[int, int]
    mask: Tuple[int, ...]


@dataclass
class PimCompletion:
    latency_cycles: int
    per_bank_outcomes: List[AccessOutcome] = field(default_factory=list)
    routed_to: Route = Route.MEMORY_PCU
    completion_cycle: int = 0


@dataclass
class MonitorEntry:
    ignore_flag: bool = True
    hit_count: int = 0


class LocalityMonitor:
    """LRU table of recently touched cache lines deciding where a PEI executes."""

    def __init__(self, capacity: int = 256, routing_threshold: int = 2):
        if capacity < 1:
            raise ValueError("monitor capacity must be >= 1")
        self.capacity = capacity
        self.routing_threshold = routing_threshold
        self.entries: "OrderedDict[int, MonitorEntry]" = OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def route(self, tag: int) -> Route:
        entry = self.entries.get(tag)
        if entry is None:
            if len(self.entries) >= self.capacity:
                self.entries.popitem(last=False)
            self.entries[tag] = MonitorEntry()
            return Route.MEMORY_PCU
        self.entries.move_to_end(tag)
        if entry.ignore_flag:
            # first reuse after a PiM allocation does not count as locality
            entry.ignore_flag = False
            return Route.MEMORY_PCU
        entry.hit_count += 1
        if entry.hit_count >= self.routing_threshold:
            return Route.HOST_PCU
        return Route.MEMORY_PCU


def route_pei(monitor: LocalityMonitor, req: PeiRequest, line_size_bytes: int = 64) -> Route:
    return monitor.route(req.target_addr // line_size_bytes)


def execute_pei(dram: DramState, monitor: LocalityMonitor, req: PeiRequest, now: int,
                cfg: PimConfig) -> PimCompletion:
    if req.op is PimOp.NOP:
        return PimCompletion(0, [], Route.HOST_PCU, now)

    route = route_pei(monitor, req, cfg.line_size_bytes)
    if route is Route.HOST_PCU:
        latency = cfg.host_hit_cycles + req.op_latency_cycles
        logger.debug(f"PEI {req.process_id}@{req.target_addr:#x} absorbed by host PCU ({latency} cycles)")
        return PimCompletion(latency, [], route, now + latency)

    loc = map_address(req.target_addr, dram.cfg)
    outcome = dram.access(MemoryAccess(req.process_id, loc.bank, loc.row,
                                       now + cfg.offload_transit_cycles, Origin.MEMORY_PCU))
    latency = cfg.offload_transit_cycles + outcome.observed_cycles + req.op_latency_cycles
    logger.debug(f"PEI {req.process_id} bank={loc.bank} row={loc.row} {outcome.kind.value} {latency} cycles")
    return PimCompletion(latency, [outcome], route, now + latency)


def _bank_pairs(dram: DramState, req: RowCloneRequest) -> Dict[int, List[Tuple[int, int]]]:
    cfg = dram.cfg
    (src, src_len), (dst, dst_len) = req.src_range, req.dst_range
    if src_len != dst_len or src_len <= 0 or src_len % cfg.row_size_bytes:
        raise MaskRangeMismatch(f"ranges must have equal, whole-row lengths (got {src_len} and {dst_len})")
    if src % cfg.row_size_bytes or dst % cfg.row_size_bytes:
        raise MaskRangeMismatch("RowClone ranges must be row aligned")
    pairs: Dict[int, List[Tuple[int, int]]] = {}
    for offset in range(0, src_len, cfg.row_size_bytes):
        s, d = map_address(src + offset, cfg), map_address(dst + offset, cfg)
        if s.bank != d.bank:
            raise MaskRangeMismatch(f"page at offset {offset} maps to bank {s.bank} in src but {d.bank} in dst")
        if s.row == d.row:
            raise MaskRangeMismatch(f"bank {s.bank}: source and destination share row {s.row}")
        pairs.setdefault(s.bank, []).append((s.row, d.row))
    return pairs


def execute_rowclone(dram: DramState, req: RowCloneRequest, now: int, cfg: PimConfig) -> PimCompletion:
    n_banks = dram.cfg.n_banks
    if len(req.mask) != n_banks:
        raise MaskRangeMismatch(f"mask has {len(req.mask)} bits for {n_banks} banks")
    masked = [b for b, bit in enumerate(req.mask) if bit]
    if not masked:
        raise ValueError("RowClone mask selects no bank")
    pairs = _bank_pairs(dram, req)
    outside = [b for b in masked if b not in pairs]
    if outside:
        raise MaskRangeMismatch(f"mask selects banks {outside} not covered by the ranges")
    for bank in masked:
        dram.check_partition(req.process_id, bank)

    start = now + cfg.rowclone_issue_overhead_cycles
    outcomes: List[AccessOutcome] = []
    for bank in masked:
        for src_row, dst_row in pairs[bank]:
            outcomes.append(dram.activate_pair(req.process_id, bank, src_row, dst_row, start))
    completion = max(o.completion_cycle for o in outcomes)
    dram.lock(req.process_id, completion)
    if dram.log_commands:
        _check_atomic(dram, req.process_id, masked, start, completion)
    logger.debug(f"RowClone {req.process_id} banks={masked} {completion - now} cycles")
    return PimCompletion(completion - now, outcomes, Route.MEMORY_PCU, completion)


def _check_atomic(dram: DramState, owner: str, banks: Sequence[int], start: int, end: int) -> None:
    for bank in banks:
        for cmd in reversed(dram.command_log[bank]):
            if cmd.cycle < start:
                break
            if cmd.cycle <= end and cmd.process_id not in (owner, "controller"):
                raise InvariantViolation(
                    f"RowClone by {owner!r} on bank {bank} interleaved with {cmd.command} from {cmd.process_id!r}"
                )


class PimEngine:
    """One DRAM channel, its locality monitor and the PiM timing constants."""

    def __init__(self, dram: DramState, cfg: PimConfig):
        self.dram = dram
        self.cfg = cfg
        self.monitor = LocalityMonitor(cfg.pmu_capacity, cfg.pmu_routing_threshold)

    def address(self, bank: int, row: int, line: int = 0) -> int:
        lines_per_row = self.dram.cfg.row_size_bytes // self.cfg.line_size_bytes
        column = (line % lines_per_row) * self.cfg.line_size_bytes
        return row_address(bank, row, self.dram.cfg, column)

    def pei(self, process_id: str, bank: int, row: int, now: int, line: int = 0,
            op: PimOp = PimOp.ADD) -> PimCompletion:
        req = PeiRequest(process_id, self.address(bank, row, line), op, self.cfg.pei_op_latency_cycles)
        return execute_pei(self.dram, self.monitor, req, now, self.cfg)

    def rowclone(self, process_id: str, src_row: int, dst_row: int, mask: Sequence[int],
                 now: int) -> PimCompletion:
        """Copy src_row to dst_row in every bank whose mask bit is set."""
        n_banks = self.dram.cfg.n_banks
        span = n_banks * self.dram.cfg.row_size_bytes
        req = RowCloneRequest(process_id,
                              (row_address(0, src_row, self.dram.cfg), span),
                              (row_address(0, dst_row, self.dram.cfg), span),
                              tuple(mask))
        return execute_rowclone(self.dram, req, now, self.cfg)
