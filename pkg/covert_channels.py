"""
Covert Channels

PnM and PuM sender/receiver protocols over the PiM engines, run as simpy
processes sharing one DRAM channel. Logic 1 is sent as row-buffer
interference (the receiver sees a conflict), logic 0 as no interference.
"""

from __future__ import annotations

import logging
import math
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import simpy
from pydantic import BaseModel, Field, model_validator

import defaults
from dram_core import DramConfig, DramState, MemoryAccess, RowPolicy
from errors import CalibrationFailed, SyncDeadlock
from pim_engines import PimConfig, PimEngine, PimOp
from utils import hex_to_bits

logger = logging.getLogger(__name__)

SENDER = "sender"
RECEIVER = "receiver"
NOISE = "noise"

# rows reserved for the protocols; noise never touches them
PNM_INIT_ROWS = (0, 2)
PNM_SENDER_ROW = 1
PUM_RECEIVER_ROWS = (2, 3)
PUM_SENDER_ROWS = (4, 5)
RESERVED_ROWS = 8

POLICIES = ("open", "closed", "constant", "partition")


class ChannelKind(str, Enum):
    PNM = "pnm"
    PUM = "pum"


class SyncKind(str, Enum):
    SEMAPHORE = "semaphore"
    BARRIER = "barrier"


class NoiseModel(BaseModel):
    rate_per_kilocycle: float = Field(0.0, ge=0)
    seed: int = 0


class ChannelConfig(BaseModel):
    n_banks: int = Field(defaults.CHANNEL_BANKS, ge=1)
    batch_size: int = Field(defaults.BATCH_SIZE, ge=1)
    threshold_cycles: int = Field(defaults.THRESHOLD_CYCLES, gt=0)
    sync: Optional[SyncKind] = None
    sync_cost_cycles: int = Field(defaults.SYNC_COST_CYCLES, ge=0)
    barrier_cost_cycles: int = Field(defaults.BARRIER_COST_CYCLES, ge=0)
    noise: NoiseModel = Field(default_factory=NoiseModel)
    calibrate: bool = False
    calibration_samples: int = Field(defaults.CALIBRATION_SAMPLES, ge=1)

    @model_validator(mode="after")
    def _batch_fits(self) -> "ChannelConfig":
        if self.batch_size > self.n_banks:
            raise ValueError(f"batch_size ({self.batch_size}) must be <= n_banks ({self.n_banks})")
        return self


class ProbeRecord(BaseModel):
    turn: int
    bank: int
    sent_bit: int
    latency_cycles: int
    decoded_bit: int


class ChannelResult(BaseModel):
    kind: ChannelKind
    policy: str = "open"
    n_banks: int
    bits_sent: int
    bits_correct: int
    error_rate: float
    total_cycles: int
    throughput_mbps: float
    sender_cycles: int
    receiver_cycles: int
    threshold_cycles: int
    decoded: List[int] = Field(default_factory=list)
    probes: List[ProbeRecord] = Field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.bits_sent - self.bits_correct


CHANNEL_COLUMNS = ["kind", "policy", "n_banks", "bits", "errors", "error_rate", "total_cycles",
                   "throughput_mbps", "sender_cycles", "receiver_cycles"]


def result_row(result: ChannelResult) -> dict:
    return {
        "kind": result.kind, "policy": result.policy, "n_banks": result.n_banks,
        "bits": result.bits_sent, "errors": result.errors, "error_rate": result.error_rate,
        "total_cycles": result.total_cycles, "throughput_mbps": result.throughput_mbps,
        "sender_cycles": result.sender_cycles, "receiver_cycles": result.receiver_cycles,
    }


# --------------------------------------------------------------------------- sync


class Semaphore:
    """
    Counting semaphore on a simpy.Store. A post is visible to waiters at once;
    the poster then spends `cost_cycles` before it can continue.
    """

    def __init__(self, env: simpy.Environment, name: str, cost_cycles: int = 0):
        self.env = env
        self.name = name
        self.cost_cycles = cost_cycles
        self.store = simpy.Store(env)
        self.posted = 0
        self.consumed = 0
        self.min_value = 0
        self.max_value = 0

    @property
    def value(self) -> int:
        return self.posted - self.consumed

    def _check(self) -> None:
        value = self.value
        if value < 0:
            raise SyncDeadlock(f"semaphore {self.name} went negative ({self.posted} posted, {self.consumed} consumed)")
        self.min_value = min(self.min_value, value)
        self.max_value = max(self.max_value, value)

    def post(self):
        self.posted += 1
        self._check()
        yield self.store.put(self.posted)
        if self.cost_cycles:
            yield self.env.timeout(self.cost_cycles)

    def wait(self):
        yield self.store.get()
        self.consumed += 1
        self._check()


class Barrier:
    """Reusable barrier for `parties` processes; release takes `cost_cycles`."""

    def __init__(self, env: simpy.Environment, parties: int, cost_cycles: int = 0):
        self.env = env
        self.parties = parties
        self.cost_cycles = cost_cycles
        self.crossings = 0
        self._arrived = 0
        self._release = env.event()

    def wait(self) -> simpy.Event:
        release = self._release
        self._arrived += 1
        if self._arrived == self.parties:
            self._arrived = 0
            self._release = self.env.event()
            self.crossings += 1
            self.env.process(self._open(release))
        return release

    def _open(self, release: simpy.Event):
        yield self.env.timeout(self.cost_cycles)
        release.succeed()


# ------------------------------------------------------------------------ helpers


def encode_message(hex_message: str) -> List[int]:
    return hex_to_bits(hex_message)


def random_message(n_bits: int, seed: int) -> List[int]:
    if n_bits <= 0:
        raise ValueError(f"message length must be positive, got {n_bits}")
    rng = np.random.default_rng(seed)
    return [int(b) for b in rng.integers(0, 2, size=n_bits)]


def policy_config(dram_cfg: DramConfig, policy: str) -> DramConfig:
    """Map a mitigation name to the DRAM configuration that enforces it."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}, expected one of {', '.join(POLICIES)}")
    fields = dram_cfg.model_dump()
    configured = fields.pop("partition_map")
    fields["partition_map"] = None
    if policy == "open":
        fields["row_policy"] = RowPolicy.OPEN_TIMEOUT
    elif policy == "closed":
        fields["row_policy"] = RowPolicy.CLOSED_ROW
    elif policy == "constant":
        fields["row_policy"] = RowPolicy.CONSTANT_TIME
    else:
        half = dram_cfg.n_banks // 2
        fields["row_policy"] = RowPolicy.OPEN_TIMEOUT
        fields["partition_map"] = configured or {RECEIVER: frozenset(range(half)),
                                                 SENDER: frozenset(range(half, dram_cfg.n_banks))}
    return DramConfig(**fields)


def noise_process(env: simpy.Environment, dram: DramState, noise: NoiseModel, reserved_rows: int = RESERVED_ROWS):
    """Background accesses (prefetchers, page walks) as a Poisson stream."""
    if noise.rate_per_kilocycle <= 0:
        return
    rng = np.random.default_rng(noise.seed)
    mean_gap = 1000.0 / noise.rate_per_kilocycle
    n_banks, n_rows = dram.cfg.n_banks, dram.cfg.n_rows
    while True:
        yield env.timeout(max(1, int(math.ceil(rng.exponential(mean_gap)))))
        bank = int(rng.integers(0, n_banks))
        row = int(rng.integers(reserved_rows, n_rows))
        dram.access(MemoryAccess(NOISE, bank, row, int(env.now)))


def _run(env: simpy.Environment, until: simpy.Process, what: str) -> None:
    try:
        env.run(until=until)
    except RuntimeError as exc:
        if "until" in str(exc) or "No scheduled events" in str(exc):
            raise SyncDeadlock(f"{what}: receiver never finished ({exc})") from None
        raise


class _Tally:
    def __init__(self):
        self.sender = 0
        self.receiver = 0
        self.first_sender_event: Optional[int] = None
        self.last_decode = 0


def _pad(message: Sequence[int], n_banks: int) -> List[int]:
    bits = [int(b) for b in message]
    if any(b not in (0, 1) for b in bits):
        raise ValueError("message must contain only 0/1 bits")
    if not bits:
        raise ValueError("empty message")
    if len(bits) % n_banks:
        bits += [0] * (n_banks - len(bits) % n_banks)
    return bits


def _finish(kind: ChannelKind, message: Sequence[int], cfg: ChannelConfig, tally: _Tally,
            probes: List[ProbeRecord], clock_ghz: float) -> ChannelResult:
    n = len(message)
    decoded = [p.decoded_bit for p in probes][:n]
    correct = sum(1 for sent, got in zip(message, decoded) if int(sent) == got)
    total = tally.last_decode - (tally.first_sender_event or 0)
    throughput = correct * clock_ghz * 1000.0 / total if total > 0 else 0.0
    return ChannelResult(
        kind=kind, n_banks=cfg.n_banks, bits_sent=n, bits_correct=correct,
        error_rate=(n - correct) / n, total_cycles=total, throughput_mbps=throughput,
        sender_cycles=tally.sender, receiver_cycles=tally.receiver,
        threshold_cycles=cfg.threshold_cycles, decoded=decoded, probes=probes,
    )


def _default_engine(cfg: ChannelConfig) -> PimEngine:
    return PimEngine(DramState(DramConfig(n_banks=cfg.n_banks)), PimConfig())


# ------------------------------------------------------------------- calibration


def sample_latencies(engine: PimEngine, samples: int = defaults.CALIBRATION_SAMPLES, bank: int = 0,
                     process_id: str = "calibration") -> Tuple[List[int], List[int]]:
    """Timed PEI probes alternating a new row (conflict) and the same row again (hit)."""
    if samples + 1 >= engine.dram.cfg.n_rows:
        raise ValueError(f"{samples} samples need more rows than bank {bank} has")
    now = engine.dram.channel_busy_until
    now += engine.pei(process_id, bank, 0, now).latency_cycles
    hits: List[int] = []
    conflicts: List[int] = []
    for row in range(1, samples + 1):
        c = engine.pei(process_id, bank, row, now, line=0)
        now += c.latency_cycles
        conflicts.append(c.latency_cycles)
        h = engine.pei(process_id, bank, row, now, line=1)
        now += h.latency_cycles
        hits.append(h.latency_cycles)
    return hits, conflicts


def calibrate_threshold(engine: PimEngine, samples: int = defaults.CALIBRATION_SAMPLES, bank: int = 0,
                        process_id: str = "calibration") -> int:
    """Midpoint between mean hit and mean conflict PEI probe latencies."""
    hits, conflicts = sample_latencies(engine, samples, bank, process_id)
    mid = (float(np.mean(hits)) + float(np.mean(conflicts))) / 2.0
    summary = {"hit_max": max(hits), "hit_mean": float(np.mean(hits)),
               "conflict_min": min(conflicts), "conflict_mean": float(np.mean(conflicts))}
    if not max(hits) < mid < min(conflicts):
        raise CalibrationFailed(
            f"hit and conflict latencies overlap (hit max {max(hits)}, conflict min {min(conflicts)})",
            summary,
        )
    threshold = int(round(mid))
    logger.info(f"calibrated threshold {threshold} cycles from {samples} hit/conflict pairs")
    return threshold


# -------------------------------------------------------------------------- PnM


def pnm_transmit(message: Sequence[int], cfg: ChannelConfig, engine: Optional[PimEngine] = None) -> ChannelResult:
    engine = engine or _default_engine(cfg)
    if cfg.n_banks > engine.dram.cfg.n_banks:
        raise ValueError(f"channel uses {cfg.n_banks} banks, DRAM has {engine.dram.cfg.n_banks}")
    bits = _pad(message, cfg.n_banks)
    n_turns = len(bits) // cfg.n_banks
    lines = engine.dram.cfg.row_size_bytes // engine.cfg.line_size_bytes

    batches_of = [range(start, min(start + cfg.batch_size, cfg.n_banks))
                  for start in range(0, cfg.n_banks, cfg.batch_size)]

    env = simpy.Environment()
    # the sender may only start a turn once every init row of that turn is open
    turn_barrier = Barrier(env, 2, cfg.barrier_cost_cycles)
    batches = Semaphore(env, "batches", cfg.sync_cost_cycles)
    tally = _Tally()
    probes: List[ProbeRecord] = []

    def sender():
        for turn in range(n_turns):
            yield turn_barrier.wait()
            if tally.first_sender_event is None:
                tally.first_sender_event = int(env.now)
            chunk = bits[turn * cfg.n_banks:(turn + 1) * cfg.n_banks]
            for batch in batches_of:
                now = int(env.now)
                fence = 0
                for bank in batch:
                    op = PimOp.ADD if chunk[bank] else PimOp.NOP
                    done = engine.pei(SENDER, bank, PNM_SENDER_ROW, now, turn % lines, op)
                    fence = max(fence, done.latency_cycles)
                if fence:
                    yield env.timeout(fence)
                    tally.sender += fence
                yield from batches.post()
                tally.sender += cfg.sync_cost_cycles

    def receiver():
        for turn in range(n_turns):
            row = PNM_INIT_ROWS[turn % len(PNM_INIT_ROWS)]
            line = turn % lines
            for batch in batches_of:
                now = int(env.now)
                wait = max(engine.pei(RECEIVER, bank, row, now, line).latency_cycles for bank in batch)
                yield env.timeout(wait)
                tally.receiver += wait
            yield turn_barrier.wait()
            for batch in batches_of:
                yield from batches.wait()
                now = int(env.now)
                timed = [(bank, engine.pei(RECEIVER, bank, row, now, line)) for bank in batch]
                wait = max(probe.latency_cycles for _, probe in timed)
                yield env.timeout(wait)
                tally.receiver += wait
                for bank, probe in timed:
                    got = int(probe.latency_cycles > cfg.threshold_cycles)
                    probes.append(ProbeRecord(turn=turn, bank=bank, sent_bit=bits[turn * cfg.n_banks + bank],
                                              latency_cycles=probe.latency_cycles, decoded_bit=got))
            tally.last_decode = int(env.now)
            logger.debug(f"PnM turn {turn} decoded at cycle {env.now}")

    env.process(sender())
    env.process(noise_process(env, engine.dram, cfg.noise))
    _run(env, env.process(receiver()), "PnM transmission")
    if batches.value != 0:
        raise SyncDeadlock(f"unconsumed semaphore posts: batches={batches.value}")
    return _finish(ChannelKind.PNM, message, cfg, tally, probes, engine.dram.cfg.clock_ghz)


# -------------------------------------------------------------------------- PuM


def pum_transmit(message: Sequence[int], cfg: ChannelConfig, engine: Optional[PimEngine] = None) -> ChannelResult:
    engine = engine or _default_engine(cfg)
    dram_banks = engine.dram.cfg.n_banks
    if cfg.n_banks > dram_banks:
        raise ValueError(f"channel uses {cfg.n_banks} banks, DRAM has {dram_banks}")
    bits = _pad(message, cfg.n_banks)
    n_turns = len(bits) // cfg.n_banks
    src_row, dst_row = PUM_RECEIVER_ROWS

    env = simpy.Environment()
    barrier = Barrier(env, 2, cfg.barrier_cost_cycles)
    tally = _Tally()
    probes: List[ProbeRecord] = []

    def sender():
        for turn in range(n_turns):
            yield barrier.wait()
            if tally.first_sender_event is None:
                tally.first_sender_event = int(env.now)
            chunk = bits[turn * cfg.n_banks:(turn + 1) * cfg.n_banks]
            if any(chunk):
                mask = list(chunk) + [0] * (dram_banks - cfg.n_banks)
                done = engine.rowclone(SENDER, PUM_SENDER_ROWS[0], PUM_SENDER_ROWS[1], mask, int(env.now))
                yield env.timeout(done.latency_cycles)
                tally.sender += done.latency_cycles
            yield barrier.wait()

    def single(bank: int) -> List[int]:
        mask = [0] * dram_banks
        mask[bank] = 1
        return mask

    def receiver():
        for turn in range(n_turns):
            for bank in range(cfg.n_banks):
                init = engine.rowclone(RECEIVER, src_row, dst_row, single(bank), int(env.now))
                yield env.timeout(init.latency_cycles)
                tally.receiver += init.latency_cycles
            yield barrier.wait()
            yield barrier.wait()
            now = int(env.now)
            timed = [engine.rowclone(RECEIVER, dst_row, src_row, single(bank), now) for bank in range(cfg.n_banks)]
            wait = max(probe.latency_cycles for probe in timed)
            yield env.timeout(wait)
            tally.receiver += wait
            for bank, probe in enumerate(timed):
                got = int(probe.latency_cycles > cfg.threshold_cycles)
                probes.append(ProbeRecord(turn=turn, bank=bank, sent_bit=bits[turn * cfg.n_banks + bank],
                                          latency_cycles=probe.latency_cycles, decoded_bit=got))
            tally.last_decode = int(env.now)
            logger.debug(f"PuM turn {turn} decoded at cycle {env.now}")

    env.process(sender())
    env.process(noise_process(env, engine.dram, cfg.noise))
    _run(env, env.process(receiver()), "PuM transmission")
    return _finish(ChannelKind.PUM, message, cfg, tally, probes, engine.dram.cfg.clock_ghz)


# ------------------------------------------------------------------------ wrapper


def run_channel(kind: ChannelKind, message: Sequence[int], cfg: ChannelConfig, dram_cfg: DramConfig,
                pim_cfg: Optional[PimConfig] = None, policy: str = "open") -> ChannelResult:
    """Apply the mitigation policy, optionally calibrate, then transmit."""
    pim_cfg = pim_cfg or PimConfig()
    dram_cfg = policy_config(dram_cfg, policy)
    if dram_cfg.partition_map and RECEIVER in dram_cfg.partition_map:
        # the receiver's partition must start at bank 0; the channel runs over it
        own = sorted(dram_cfg.partition_map[RECEIVER])
        cfg = cfg.model_copy(update={"n_banks": len(own), "batch_size": min(cfg.batch_size, len(own))})
    if cfg.calibrate:
        probe_engine = PimEngine(DramState(dram_cfg), pim_cfg)
        threshold = calibrate_threshold(probe_engine, cfg.calibration_samples)
        cfg = cfg.model_copy(update={"threshold_cycles": threshold})

    engine = PimEngine(DramState(dram_cfg), pim_cfg)
    transmit = pnm_transmit if ChannelKind(kind) is ChannelKind.PNM else pum_transmit
    logger.info(f"🚀 {ChannelKind(kind).value} channel: {len(message)} bits, policy={policy}, "
                f"threshold={cfg.threshold_cycles}")
    result = transmit(message, cfg, engine)
    engine.dram.check_ras()
    result = result.model_copy(update={"policy": policy})
    if policy == "open" and cfg.noise.rate_per_kilocycle == 0 and result.error_rate > 0:
        logger.warning(f"noiseless {result.kind.value} run decoded {result.errors} bits wrong")
    return result
