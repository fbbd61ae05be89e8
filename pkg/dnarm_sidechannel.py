"""
DNA Read-Mapping Side Channel

A read mapper offloads its seeding step as PEIs into a hash table laid out
across DRAM banks with page interleaving. While the victim runs, an attacker
sweeps a timed sentinel PEI over every bank: a conflict means a hash-table
row is open in that bank. When a bank holds several hash rows, follow-up
timed PEIs on each candidate row find the one the victim keeps open.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Annotated, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import simpy
from pydantic import BaseModel, Field

import defaults
from covert_channels import NoiseModel, noise_process
from dram_core import AccessKind, DramConfig, DramState, row_address
from errors import SizeMismatch
from pim_engines import PeiRequest, PimConfig, PimEngine, Route, execute_pei

logger = logging.getLogger(__name__)

VICTIM = "victim"
ATTACKER = "attacker"
SENTINEL_ROW = 0
HASH_BASE_ROW = 1
BASES = "ACGT"
_MASK64 = (1 << 64) - 1


class SideChannelConfig(BaseModel):
    banks: List[int] = Field(default_factory=lambda: list(defaults.SIDECHANNEL_BANKS))
    n_entries: int = Field(defaults.HASH_ENTRIES, ge=1)
    entry_size_bytes: Optional[int] = Field(None, gt=0)
    reads: int = Field(defaults.VICTIM_READS, ge=1)
    read_len: int = Field(defaults.READ_LEN, ge=1)
    seed_len: int = Field(defaults.SEED_LEN, ge=1, le=32)
    # extra seed lengths to try per bank count; the best throughput is reported
    seed_len_sweep: List[Annotated[int, Field(ge=1, le=32)]] = Field(default_factory=list)
    align_accesses: int = Field(defaults.ALIGN_ACCESSES, ge=0)
    victim_think_cycles: int = Field(defaults.VICTIM_THINK_CYCLES, ge=0)
    sentinel_interval_cycles: float = Field(defaults.SENTINEL_INTERVAL_CYCLES, ge=0)
    hit_threshold_cycles: int = Field(defaults.HIT_THRESHOLD_CYCLES, gt=0)
    followup_gap_cycles: int = Field(defaults.FOLLOWUP_GAP_CYCLES, ge=0)
    noise_rate_per_kilocycle: float = Field(defaults.SIDECHANNEL_NOISE_PER_KILOCYCLE, ge=0)
    threshold_cycles: int = Field(defaults.THRESHOLD_CYCLES, gt=0)


class HashTableLayout(BaseModel):
    n_entries: int
    entry_size_bytes: int
    entries_per_row: int
    n_banks: int
    row_size_bytes: int
    base_row: int = HASH_BASE_ROW

    @property
    def hash_rows(self) -> int:
        return math.ceil(self.n_entries / self.entries_per_row)

    def locate(self, entry: int) -> Tuple[int, int, int]:
        """Entry index to (bank, row, slot)."""
        if not 0 <= entry < self.n_entries:
            raise IndexError(f"entry {entry} outside table of {self.n_entries}")
        page, slot = divmod(entry, self.entries_per_row)
        row_offset, bank = divmod(page, self.n_banks)
        return bank, self.base_row + row_offset, slot

    def rows_in_bank(self, bank: int) -> List[int]:
        pages = range(bank, self.hash_rows, self.n_banks)
        return [self.base_row + p // self.n_banks for p in pages]


class Activation(NamedTuple):
    """A seed lookup that opened `row`; the row stays open until `last_cycle` plus the row timeout."""

    cycle: int
    bank: int
    row: int
    last_cycle: int


class ProbeObservation(BaseModel):
    cycle: int
    bank: int
    probed_row: int
    latency_cycles: int
    inferred_active: bool
    inferred_row: Optional[int] = None


class SideChannelResult(BaseModel):
    n_banks: int
    entries_per_row: int
    candidates_per_hit: int
    bits_per_identification: float
    seed_len: int = defaults.SEED_LEN
    throughput_mbps: float
    error_rate: float
    identification_accuracy: float
    total_cycles: int
    inferences: int
    correct: int
    detected: int
    activations: int


SIDECHANNEL_COLUMNS = ["n_banks", "entries_per_row", "throughput_mbps", "error_rate", "accuracy", "total_cycles",
                       "seed_len"]


def result_row(result: SideChannelResult) -> dict:
    row = result.model_dump()
    row["accuracy"] = result.identification_accuracy
    return row


def build_layout(n_entries: int, entry_size: int, dram_cfg: DramConfig) -> HashTableLayout:
    """Pages of `entry_size` entries interleaved over the banks; a bank may hold several hash rows."""
    if entry_size <= 0 or dram_cfg.row_size_bytes % entry_size:
        raise SizeMismatch(f"entry size {entry_size} does not divide the {dram_cfg.row_size_bytes}-byte row")
    per_row = dram_cfg.row_size_bytes // entry_size
    layout = HashTableLayout(n_entries=n_entries, entry_size_bytes=entry_size, entries_per_row=per_row,
                             n_banks=dram_cfg.n_banks, row_size_bytes=dram_cfg.row_size_bytes)
    if layout.base_row + math.ceil(layout.hash_rows / dram_cfg.n_banks) > dram_cfg.n_rows:
        raise SizeMismatch(f"{layout.hash_rows} hash rows do not fit in {dram_cfg.n_banks} banks "
                           f"of {dram_cfg.n_rows} rows")
    return layout


def kmerize(read: str, k: int, stride: int) -> Iterator[str]:
    for start in range(0, len(read) - k + 1, stride):
        yield read[start:start + k]


@dataclass
class VictimModel:
    seed_len: int
    read_stream: List[str]
    hash_multiplier: int
    n_entries: int
    align_accesses: int = 0

    @property
    def accesses_per_read(self) -> int:
        seeds = len(self.read_stream[0]) // self.seed_len if self.read_stream else 0
        return seeds * (1 + self.align_accesses)

    def seeds(self, read: str) -> List[str]:
        return list(kmerize(read, self.seed_len, self.seed_len))

    def hash_fn(self, seed: str) -> int:
        packed = 0
        for base in seed:
            packed = (packed << 2) | BASES.index(base)
        return (((packed * self.hash_multiplier) & _MASK64) >> 32) % self.n_entries


def build_victim(cfg: SideChannelConfig, seed: int) -> VictimModel:
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 4, size=(cfg.reads, cfg.read_len))
    reads = ["".join(BASES[c] for c in row) for row in codes]
    multiplier = int(rng.integers(1, 1 << 62)) * 2 + 1
    return VictimModel(cfg.seed_len, reads, multiplier, cfg.n_entries, cfg.align_accesses)


def victim_round(victim: VictimModel, layout: HashTableLayout, engine: PimEngine, reads: Sequence[str],
                 env: simpy.Environment, rng: np.random.Generator, think_cycles: int = 0):
    """
    simpy process: seed each read and return the activations it caused.

    Every seed is one lookup PEI into its hash entry followed by
    `align_accesses` PEIs to random lines of the same row, with
    `think_cycles` of compute after each. A seed whose first DRAM access hits
    the row its bank last opened for the victim extends that activation.
    """
    log: List[Activation] = []
    latest: Dict[int, int] = {}
    lines = layout.row_size_bytes // engine.cfg.line_size_bytes
    dram_cfg = engine.dram.cfg
    for read in reads:
        for seed in victim.seeds(read):
            bank, row, slot = layout.locate(victim.hash_fn(seed))
            base = row_address(bank, row, dram_cfg)
            targets = [base + slot * layout.entry_size_bytes]
            targets += [base + int(line) * engine.cfg.line_size_bytes
                        for line in rng.integers(0, lines, size=victim.align_accesses)]
            start = int(env.now)
            first_kind: Optional[AccessKind] = None
            last = start
            for addr in targets:
                now = int(env.now)
                req = PeiRequest(VICTIM, addr, op_latency_cycles=engine.cfg.pei_op_latency_cycles)
                done = execute_pei(engine.dram, engine.monitor, req, now, engine.cfg)
                if first_kind is None and done.routed_to is Route.MEMORY_PCU:
                    first_kind = done.per_bank_outcomes[0].kind
                last = done.completion_cycle
                yield env.timeout(done.latency_cycles + think_cycles)
            previous = latest.get(bank)
            if first_kind is AccessKind.HIT and previous is not None and log[previous].row == row:
                log[previous] = log[previous]._replace(last_cycle=last)
            else:
                latest[bank] = len(log)
                log.append(Activation(start, bank, row, last))
    return log


def arm_sentinels(engine: PimEngine, n_banks: int, env: simpy.Environment):
    done = [engine.pei(ATTACKER, b, SENTINEL_ROW, int(env.now), line=0) for b in range(n_banks)]
    yield env.timeout(max(c.latency_cycles for c in done))


def identify_row(engine: PimEngine, bank: int, candidates: Sequence[int], env: simpy.Environment, line: int,
                 hit_threshold: int, gap_cycles: int):
    """simpy process: time each candidate row in turn; the first row hit is the one the victim holds open."""
    issue = int(env.now)
    for row in candidates:
        issue = max(issue + gap_cycles, int(env.now))
        yield env.timeout(issue - env.now)
        timed = engine.pei(ATTACKER, bank, row, issue, line)
        yield env.timeout(timed.latency_cycles)
        if timed.latency_cycles <= hit_threshold:
            return row
    return None


def attacker_round(layout: HashTableLayout, engine: PimEngine, threshold: int, env: simpy.Environment,
                   line: int = 0, sentinel_interval_cycles: float = 0.0,
                   hit_threshold: int = defaults.HIT_THRESHOLD_CYCLES,
                   followup_gap_cycles: int = defaults.FOLLOWUP_GAP_CYCLES):
    """
    simpy process: one timed sentinel sweep over every bank; returns observations by bank.

    Sentinel PEIs are issued `sentinel_interval_cycles` apart without waiting
    for completions. A bank is active when its sentinel takes longer than
    `threshold`; an active bank with several hash rows gets follow-up timed
    PEIs that run alongside the rest of the sweep.
    """
    observations: List[ProbeObservation] = []
    pending: List[Tuple[ProbeObservation, simpy.Process]] = []
    start = int(env.now)
    finish = start
    for bank in range(layout.n_banks):
        due = start + int(bank * sentinel_interval_cycles)
        if due > env.now:
            yield env.timeout(due - env.now)
        sentinel = engine.pei(ATTACKER, bank, SENTINEL_ROW, due, line)
        finish = max(finish, due + sentinel.latency_cycles)
        active = sentinel.latency_cycles > threshold
        candidates = layout.rows_in_bank(bank) if active else []
        obs = ProbeObservation(cycle=due, bank=bank, probed_row=SENTINEL_ROW,
                               latency_cycles=sentinel.latency_cycles,
                               inferred_active=active, inferred_row=candidates[0] if len(candidates) == 1 else None)
        if len(candidates) > 1:
            pending.append((obs, env.process(identify_row(engine, bank, candidates, env, line, hit_threshold,
                                                          followup_gap_cycles))))
        observations.append(obs)
    if finish > env.now:
        yield env.timeout(finish - env.now)
    if pending:
        yield env.all_of([proc for _, proc in pending])
        identified = {obs.bank: proc.value for obs, proc in pending}
        observations = [o.model_copy(update={"inferred_row": identified[o.bank]}) if o.bank in identified else o
                        for o in observations]
    return observations


def evaluate(run_log: Sequence[Activation], observations: Sequence[ProbeObservation], clock_ghz: float,
             total_cycles: int, bits_per_identification: float, layout: HashTableLayout,
             timeout_cycles: int) -> SideChannelResult:
    """
    Score inferences against the victim's activations.

    An inference is correct when it names the row of the latest activation
    on its bank issued no later than the observation, and that row could still be
    open. An activation counts as detected once a correct inference names
    it, so a second activation in the same bank before the next sweep hides
    the first. Throughput counts detected activations, not repeat sightings.
    """
    by_bank: Dict[int, List[Activation]] = defaultdict(list)
    for act in sorted(run_log):
        by_bank[act.bank].append(act)
    cycles = {bank: [a.cycle for a in acts] for bank, acts in by_bank.items()}

    inferences = correct = 0
    credited = set()
    for obs in observations:
        if not obs.inferred_active:
            continue
        inferences += 1
        acts = by_bank.get(obs.bank)
        if not acts:
            continue
        i = bisect.bisect_right(cycles[obs.bank], obs.cycle) - 1
        if i < 0:
            continue
        act = acts[i]
        if obs.inferred_row == act.row and obs.cycle <= act.last_cycle + timeout_cycles:
            correct += 1
            credited.add((obs.bank, i))

    detected = len(credited)
    error_rate = (inferences - correct) / inferences if inferences else 0.0
    accuracy = detected / len(run_log) if run_log else 1.0
    throughput = detected * bits_per_identification * clock_ghz * 1000.0 / total_cycles if total_cycles else 0.0
    return SideChannelResult(
        n_banks=layout.n_banks, entries_per_row=layout.entries_per_row,
        candidates_per_hit=layout.entries_per_row, bits_per_identification=bits_per_identification,
        throughput_mbps=throughput, error_rate=error_rate, identification_accuracy=accuracy,
        total_cycles=total_cycles, inferences=inferences, correct=correct, detected=detected,
        activations=len(run_log),
    )


class SideChannelSimulation:
    """Victim, sweeping attacker and background noise sharing one event loop."""

    def __init__(self, cfg: SideChannelConfig, dram_cfg: DramConfig, pim_cfg: PimConfig, n_banks: int,
                 seed: int = 0):
        fields = dram_cfg.model_dump()
        fields.update(n_banks=n_banks, partition_map=None)
        self.cfg = cfg
        self.dram_cfg = DramConfig(**fields)
        self.pim_cfg = pim_cfg
        self.seed = seed
        entry_size = cfg.entry_size_bytes or self.dram_cfg.row_size_bytes * n_banks // cfg.n_entries
        self.layout = build_layout(cfg.n_entries, entry_size, self.dram_cfg)
        self.victim = build_victim(cfg, seed)

    def run(self) -> SideChannelResult:
        cfg = self.cfg
        engine = PimEngine(DramState(self.dram_cfg, log_commands=False), self.pim_cfg)
        env = simpy.Environment()
        rng = np.random.default_rng(self.seed + 1)
        noise = NoiseModel(rate_per_kilocycle=cfg.noise_rate_per_kilocycle, seed=self.seed + 2)
        observations: List[ProbeObservation] = []
        lines = self.dram_cfg.row_size_bytes // self.pim_cfg.line_size_bytes

        victim = env.process(victim_round(self.victim, self.layout, engine, self.victim.read_stream, env, rng,
                                          cfg.victim_think_cycles))

        def attacker():
            yield from arm_sentinels(engine, self.layout.n_banks, env)
            sweep = 0
            while victim.is_alive:
                sweep += 1
                # a fresh line per sweep keeps the locality monitor from routing sentinels to the host
                obs = yield env.process(attacker_round(
                    self.layout, engine, cfg.threshold_cycles, env, line=sweep % lines,
                    sentinel_interval_cycles=cfg.sentinel_interval_cycles, hit_threshold=cfg.hit_threshold_cycles,
                    followup_gap_cycles=cfg.followup_gap_cycles))
                observations.extend(obs)
            logger.debug(f"attacker finished after {sweep} sweeps")

        env.process(attacker())
        env.process(noise_process(env, engine.dram, noise))
        env.run(until=victim)
        run_log: List[Activation] = victim.value
        bits = math.log2(self.layout.hash_rows) if self.layout.hash_rows > 1 else 1.0
        result = evaluate(run_log, observations, self.dram_cfg.clock_ghz, int(env.now), bits, self.layout,
                          self.dram_cfg.timeout_cycles)
        result = result.model_copy(update={"seed_len": self.victim.seed_len})
        logger.info(f"side channel @ {self.layout.n_banks} banks, {self.victim.seed_len}-mers: "
                    f"{result.throughput_mbps:.2f} Mb/s, error {result.error_rate:.3f}, "
                    f"accuracy {result.identification_accuracy:.3f}")
        return result


def sweep_banks(cfg: SideChannelConfig, dram_cfg: DramConfig, pim_cfg: PimConfig,
                seed: int = 0) -> List[SideChannelResult]:
    """One result per bank count; with a seed-length sweep, the best-throughput length wins."""
    lengths = list(dict.fromkeys([cfg.seed_len, *cfg.seed_len_sweep]))
    results = []
    for n_banks in cfg.banks:
        runs = [SideChannelSimulation(cfg.model_copy(update={"seed_len": k}), dram_cfg, pim_cfg, n_banks, seed).run()
                for k in lengths]
        best = max(runs, key=lambda r: r.throughput_mbps)
        if len(runs) > 1:
            logger.info(f"✅ {n_banks} banks: best seed length {best.seed_len} "
                        f"({best.throughput_mbps:.2f} Mb/s over {len(runs)} lengths)")
        results.append(best)
    return results
