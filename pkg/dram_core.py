"""
DRAM Core Model

Banks, row buffers, command timing, page-interleaved address mapping and the
three row-buffer policies (open row with timeout, closed row, constant time).
Latencies are computed in closed form per access; a per-bank command log is
kept so timing constraints can be checked after the fact.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import InvariantViolation, PartitionViolation

logger = logging.getLogger(__name__)


class RowPolicy(str, Enum):
    OPEN_TIMEOUT = "open_timeout"
    CLOSED_ROW = "closed_row"
    CONSTANT_TIME = "constant_time"


class AccessKind(str, Enum):
    HIT = "hit"
    CONFLICT = "conflict"
    EMPTY = "empty"


class Origin(str, Enum):
    HOST = "host"
    MEMORY_PCU = "memory_pcu"


def ns_to_cycles(ns: float, clock_ghz: float) -> int:
    """Convert nanoseconds to CPU cycles, rounding up."""
    if ns < 0:
        raise ValueError(f"negative duration: {ns} ns")
    if clock_ghz <= 0:
        raise ValueError(f"clock must be positive, got {clock_ghz} GHz")
    # round first so 100 ns * 2.6 GHz stays 260 and not 261
    return math.ceil(round(ns * clock_ghz, 9))


class DramConfig(BaseModel):
    """Timing and organisation of the simulated DRAM (DDR4-2400 defaults)."""

    model_config = ConfigDict(frozen=True)

    t_rcd_ns: float = Field(13.5, gt=0)
    t_rp_ns: float = Field(13.5, gt=0)
    t_ras_ns: float = Field(13.5, gt=0)
    clock_ghz: float = Field(2.6, gt=0)
    column_access_cycles: int = Field(36, gt=0)
    controller_overhead_cycles: int = Field(40, ge=0)
    n_channels: int = Field(1, ge=1)
    n_ranks: int = Field(4, ge=1)
    n_banks: int = Field(16, ge=1)
    n_rows: int = Field(65536, ge=2)
    row_size_bytes: int = Field(8192, gt=0)
    row_policy: RowPolicy = RowPolicy.OPEN_TIMEOUT
    row_timeout_ns: float = Field(100.0, gt=0)
    issue_gap_cycles: int = Field(0, ge=0)
    partition_map: Optional[Dict[str, FrozenSet[int]]] = None

    @field_validator("n_banks")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError(f"n_banks must be a power of two, got {v}")
        return v

    @model_validator(mode="after")
    def _check_consistency(self) -> "DramConfig":
        if self.t_ras_ns < self.t_rcd_ns:
            raise ValueError(f"t_ras_ns ({self.t_ras_ns}) must be >= t_rcd_ns ({self.t_rcd_ns})")
        if self.partition_map:
            seen: set = set()
            for pid, banks in self.partition_map.items():
                bad = [b for b in banks if not 0 <= b < self.n_banks]
                if bad:
                    raise ValueError(f"partition for {pid!r} names banks outside 0..{self.n_banks - 1}: {bad}")
                overlap = seen & set(banks)
                if overlap:
                    raise ValueError(f"partition for {pid!r} overlaps another process on banks {sorted(overlap)}")
                seen |= set(banks)
        return self

    @property
    def t_rcd_cycles(self) -> int:
        return ns_to_cycles(self.t_rcd_ns, self.clock_ghz)

    @property
    def t_rp_cycles(self) -> int:
        return ns_to_cycles(self.t_rp_ns, self.clock_ghz)

    @property
    def t_ras_cycles(self) -> int:
        return ns_to_cycles(self.t_ras_ns, self.clock_ghz)

    @property
    def timeout_cycles(self) -> int:
        return ns_to_cycles(self.row_timeout_ns, self.clock_ghz)

    @property
    def hit_cycles(self) -> int:
        return self.column_access_cycles + self.controller_overhead_cycles

    @property
    def empty_cycles(self) -> int:
        return self.hit_cycles + self.t_rcd_cycles

    @property
    def conflict_cycles(self) -> int:
        return self.hit_cycles + self.t_rp_cycles + self.t_rcd_cycles


@dataclass
class BankState:
    open_row: Optional[int] = None
    last_activate_cycle: Optional[int] = None
    busy_until_cycle: int = 0
    last_completion_cycle: int = 0


@dataclass(frozen=True)
class MemoryAccess:
    process_id: str
    bank: int
    row: int
    issue_cycle: int = 0
    origin: Origin = Origin.HOST


@dataclass(frozen=True)
class AccessOutcome:
    kind: AccessKind
    latency_cycles: int
    completion_cycle: int
    queue_cycles: int = 0

    @property
    def observed_cycles(self) -> int:
        """What a requester timing the access sees: queueing plus service."""
        return self.queue_cycles + self.latency_cycles


class Command(NamedTuple):
    cycle: int
    command: str
    row: int
    process_id: str


class DramAddress(NamedTuple):
    channel: int
    rank: int
    bank: int
    row: int
    column: int


def map_address(phys_addr: int, cfg: DramConfig) -> DramAddress:
    """Page interleaving: consecutive rows-worth of bytes go to consecutive banks."""
    if phys_addr < 0:
        raise ValueError(f"negative physical address: {phys_addr}")
    page, column = divmod(phys_addr, cfg.row_size_bytes)
    bank = page & (cfg.n_banks - 1)
    rest = page >> (cfg.n_banks.bit_length() - 1)
    rest, row = divmod(rest, cfg.n_rows)
    rest, rank = divmod(rest, cfg.n_ranks)
    channel = rest % cfg.n_channels
    return DramAddress(channel, rank, bank, row, column)


def unmap_address(channel: int, rank: int, bank: int, row: int, column: int, cfg: DramConfig) -> int:
    page = ((channel * cfg.n_ranks + rank) * cfg.n_rows + row) * cfg.n_banks + bank
    return page * cfg.row_size_bytes + column


def row_address(bank: int, row: int, cfg: DramConfig, column: int = 0) -> int:
    return unmap_address(0, 0, bank, row, column, cfg)


class DramState:
    """Mutable state of one simulated DRAM channel."""

    def __init__(self, cfg: DramConfig, log_commands: bool = True):
        self.cfg = cfg
        self.log_commands = log_commands
        self.banks: List[BankState] = [BankState() for _ in range(cfg.n_banks)]
        self.command_log: Dict[int, List[Command]] = defaultdict(list)
        self.counts: Counter = Counter()
        self.channel_busy_until = 0
        self._last_start = 0
        self._lock_owner: Optional[str] = None
        self._lock_until = 0
        # cached timing terms, these are read on every access
        self._rcd = cfg.t_rcd_cycles
        self._rp = cfg.t_rp_cycles
        self._ras = cfg.t_ras_cycles
        self._hit = cfg.hit_cycles
        self._timeout = cfg.timeout_cycles

    # ------------------------------------------------------------------ helpers

    def _log(self, bank: int, cycle: int, command: str, row: int, pid: str) -> None:
        if self.log_commands:
            self.command_log[bank].append(Command(cycle, command, row, pid))
        if command == "ACT":
            self.counts["act"] += 1
        elif command == "PRE":
            self.counts["pre"] += 1

    def check_partition(self, process_id: str, bank: int) -> None:
        pmap = self.cfg.partition_map
        if pmap and process_id in pmap and bank not in pmap[process_id]:
            raise PartitionViolation(process_id, bank)

    def _validate(self, process_id: str, bank: int, issue_cycle: int) -> None:
        if not 0 <= bank < self.cfg.n_banks:
            raise ValueError(f"bank {bank} out of range 0..{self.cfg.n_banks - 1}")
        if issue_cycle < 0:
            raise ValueError(f"issue cycle must be >= 0, got {issue_cycle}")
        self.check_partition(process_id, bank)

    def _start_cycle(self, process_id: str, idx: int, issue_cycle: int) -> int:
        bank = self.banks[idx]
        start = max(issue_cycle, bank.busy_until_cycle)
        if self._lock_owner is not None and process_id != self._lock_owner:
            start = max(start, self._lock_until)
        # the timeout is tracked per bank, whatever the other banks are doing
        if self._expire_bank(idx, bank, start):
            start = max(start, bank.busy_until_cycle)
        if self.cfg.issue_gap_cycles:
            start = max(start, self._last_start + self.cfg.issue_gap_cycles)
            self._last_start = start
        return start

    def _expire_bank(self, idx: int, bank: BankState, now_cycle: int) -> bool:
        if (self.cfg.row_policy is not RowPolicy.OPEN_TIMEOUT or bank.open_row is None
                or now_cycle - bank.last_completion_cycle < self._timeout):
            return False
        pre = self._precharge_cycle(bank, bank.last_completion_cycle + self._timeout)
        self._log(idx, pre, "PRE", bank.open_row, "controller")
        bank.open_row = None
        bank.busy_until_cycle = max(bank.busy_until_cycle, pre + self._rp)
        return True

    def _precharge_cycle(self, bank: BankState, earliest: int) -> int:
        if bank.last_activate_cycle is None:
            return earliest
        return max(earliest, bank.last_activate_cycle + self._ras)

    def _finish(self, bank: BankState, kind: AccessKind, start: int, latency: int,
                issue_cycle: int, busy_until: Optional[int] = None) -> AccessOutcome:
        completion = start + latency
        bank.busy_until_cycle = max(bank.busy_until_cycle, busy_until or completion, completion)
        bank.last_completion_cycle = max(bank.last_completion_cycle, completion)
        self.channel_busy_until = max(self.channel_busy_until, completion)
        self.counts[kind.value] += 1
        return AccessOutcome(kind, latency, completion, start - issue_cycle)

    # ---------------------------------------------------------------- operations

    def lock(self, owner: str, until_cycle: int) -> None:
        """Hold the channel for `owner` until `until_cycle`."""
        self._lock_owner = owner
        self._lock_until = until_cycle

    def expire_rows(self, now_cycle: int) -> None:
        """Precharge every bank whose open row has been idle for the timeout."""
        closed = sum(self._expire_bank(idx, bank, now_cycle) for idx, bank in enumerate(self.banks))
        if closed:
            logger.debug(f"row timeout closed {closed} rows at cycle {now_cycle}")

    def _row_transition(self, idx: int, bank: BankState, start: int, row: int, pid: str) -> Tuple[AccessKind, int]:
        """Open-row state machine. Returns the outcome class and service cycles."""
        if bank.open_row == row:
            self._log(idx, start, "RD", row, pid)
            return AccessKind.HIT, self._hit
        if bank.open_row is None:
            act = start
            kind = AccessKind.EMPTY
        else:
            pre = self._precharge_cycle(bank, start)
            self._log(idx, pre, "PRE", bank.open_row, pid)
            act = pre + self._rp
            kind = AccessKind.CONFLICT
        self._log(idx, act, "ACT", row, pid)
        self._log(idx, act + self._rcd, "RD", row, pid)
        bank.open_row = row
        bank.last_activate_cycle = act
        return kind, act - start + self._rcd + self._hit

    def access(self, acc: MemoryAccess) -> AccessOutcome:
        self._validate(acc.process_id, acc.bank, acc.issue_cycle)
        bank = self.banks[acc.bank]
        start = self._start_cycle(acc.process_id, acc.bank, acc.issue_cycle)
        policy = self.cfg.row_policy

        if policy is RowPolicy.CLOSED_ROW:
            act = start
            self._log(acc.bank, act, "ACT", acc.row, acc.process_id)
            self._log(acc.bank, act + self._rcd, "RD", acc.row, acc.process_id)
            pre = max(act + self._ras, act + self._rcd + self.cfg.column_access_cycles)
            self._log(acc.bank, pre, "PRE", acc.row, acc.process_id)
            bank.last_activate_cycle = act
            bank.open_row = None
            return self._finish(bank, AccessKind.EMPTY, start, self._rcd + self._hit,
                                acc.issue_cycle, busy_until=pre + self._rp)

        kind, service = self._row_transition(acc.bank, bank, start, acc.row, acc.process_id)
        if policy is RowPolicy.CONSTANT_TIME:
            worst = self.cfg.conflict_cycles
            return self._finish(bank, kind, start, worst, acc.issue_cycle, busy_until=start + service)
        return self._finish(bank, kind, start, service, acc.issue_cycle)

    def activate_pair(self, process_id: str, bank_id: int, src_row: int, dst_row: int,
                      issue_cycle: int) -> AccessOutcome:
        """Back-to-back activation of src then dst (in-subarray row copy)."""
        if src_row == dst_row:
            raise ValueError(f"source and destination rows are both {src_row} in bank {bank_id}")
        self._validate(process_id, bank_id, issue_cycle)
        bank = self.banks[bank_id]
        start = self._start_cycle(process_id, bank_id, issue_cycle)
        policy = self.cfg.row_policy
        tail = self._rcd + self.cfg.controller_overhead_cycles

        if bank.open_row == src_row and policy is not RowPolicy.CLOSED_ROW:
            kind = AccessKind.HIT
            act_dst = self._precharge_cycle(bank, start)
        else:
            if bank.open_row is None or policy is RowPolicy.CLOSED_ROW:
                kind = AccessKind.EMPTY
                act_src = start
            else:
                kind = AccessKind.CONFLICT
                pre = self._precharge_cycle(bank, start)
                self._log(bank_id, pre, "PRE", bank.open_row, process_id)
                act_src = pre + self._rp
            self._log(bank_id, act_src, "ACT", src_row, process_id)
            act_dst = act_src + self._ras
        self._log(bank_id, act_dst, "ACT", dst_row, process_id)
        bank.last_activate_cycle = act_dst
        service = act_dst - start + tail

        if policy is RowPolicy.CLOSED_ROW:
            pre = act_dst + self._ras
            self._log(bank_id, pre, "PRE", dst_row, process_id)
            bank.open_row = None
            return self._finish(bank, kind, start, service, issue_cycle, busy_until=pre + self._rp)

        bank.open_row = dst_row
        if policy is RowPolicy.CONSTANT_TIME:
            worst = self._rp + self._ras + tail
            return self._finish(bank, kind, start, worst, issue_cycle, busy_until=start + service)
        return self._finish(bank, kind, start, service, issue_cycle)

    # -------------------------------------------------------------- inspection

    def check_ras(self) -> None:
        """Raise if any precharge followed its activation sooner than t_ras."""
        for bank, commands in self.command_log.items():
            last_act: Optional[int] = None
            for cmd in commands:
                if cmd.command == "ACT":
                    last_act = cmd.cycle
                elif cmd.command == "PRE" and last_act is not None and cmd.cycle - last_act < self._ras:
                    raise InvariantViolation(
                        f"bank {bank}: PRE at {cmd.cycle} only {cmd.cycle - last_act} cycles after ACT "
                        f"(t_ras = {self._ras})"
                    )

    def perf_metrics(self) -> Dict[str, int]:
        return {
            "num_hit": self.counts["hit"],
            "num_empty": self.counts["empty"],
            "num_conflict": self.counts["conflict"],
            "num_act": self.counts["act"],
            "num_pre": self.counts["pre"],
        }
