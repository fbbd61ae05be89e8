"""
Closed-form throughput models for the cache-hierarchy mediated baselines
(DRAMA with clflush or eviction sets, Streamline, DMA engine, PnM with an
off-chip predictor) and the direct row-buffer access upper bound.
"""

from __future__ import annotations

import logging
import math
from enum import Enum
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field, field_validator, model_validator

import defaults
from dram_core import DramConfig

logger = logging.getLogger(__name__)


class AttackKind(str, Enum):
    DRAMA_CLFLUSH = "drama_clflush"
    DRAMA_EVICTION = "drama_eviction"
    STREAMLINE = "streamline"
    DMA_ENGINE = "dma_engine"
    PNM_OFFCHIP = "pnm_offchip"
    DIRECT_ACCESS = "direct_access"


CACHE_MEDIATED = (AttackKind.DRAMA_CLFLUSH, AttackKind.DRAMA_EVICTION, AttackKind.STREAMLINE)


class LookupTable(BaseModel):
    """LLC size (MB) to lookup latency (cycles)."""

    entries: Dict[int, int] = Field(default_factory=lambda: dict(defaults.LOOKUP_TABLE))

    @field_validator("entries")
    @classmethod
    def _strictly_increasing(cls, v: Dict[int, int]) -> Dict[int, int]:
        if not v:
            raise ValueError("lookup table is empty")
        previous = None
        for size in sorted(v):
            if size <= 0 or v[size] <= 0:
                raise ValueError(f"lookup entry {size}:{v[size]} must be positive")
            if previous is not None and v[size] <= previous:
                raise ValueError(f"lookup cycles must strictly increase with size (at {size} MB)")
            previous = v[size]
        return dict(sorted(v.items()))

    @classmethod
    def parse(cls, text: str) -> "LookupTable":
        """Parse '8:290, 16:360, ...'."""
        entries: Dict[int, int] = {}
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            size, _, cycles = item.partition(":")
            if not cycles:
                raise ValueError(f"lookup entry {item!r} is not size:cycles")
            entries[int(size)] = int(cycles)
        return cls(entries=entries)

    def cycles(self, size_mb: int) -> int:
        if size_mb not in self.entries:
            raise ValueError(f"no lookup latency for a {size_mb} MB LLC (known: {sorted(self.entries)})")
        return self.entries[size_mb]


class CacheConfig(BaseModel):
    llc_size_mb: int = Field(8, gt=0)
    llc_ways: int = Field(defaults.DEFAULT_LLC_WAYS, ge=1)
    llc_lookup_cycles: int = Field(defaults.LOOKUP_TABLE[8], gt=0)
    mem_miss_cycles: int = Field(defaults.MEM_MISS_CYCLES, ge=0)

    @classmethod
    def from_table(cls, table: LookupTable, size_mb: int, ways: int, mem_miss_cycles: int) -> "CacheConfig":
        return cls(llc_size_mb=size_mb, llc_ways=ways,
                   llc_lookup_cycles=table.cycles(size_mb), mem_miss_cycles=mem_miss_cycles)


class AnalyticParams(BaseModel):
    dram_bit_cost_cycles: int = Field(231, gt=0)
    dma_os_overhead_cycles: int = Field(defaults.DMA_OS_OVERHEAD_CYCLES, ge=0)
    streamline_fixed_cycles: int = Field(defaults.STREAMLINE_FIXED_CYCLES, ge=0)
    streamline_round_trips: int = Field(defaults.STREAMLINE_ROUND_TRIPS, ge=1)
    offchip_prob_min: float = Field(defaults.OFFCHIP_PROB_MIN, ge=0, lt=1)
    offchip_prob_max: float = Field(defaults.OFFCHIP_PROB_MAX, ge=0, lt=1)
    offchip_size_min_mb: int = Field(min(defaults.LLC_SIZES_MB), gt=0)
    offchip_size_max_mb: int = Field(max(defaults.LLC_SIZES_MB), gt=0)
    # per-bit cost of the monitor-bypassing PnM channel; falls back to the direct cost
    pnm_bit_cost_cycles: Optional[int] = Field(None, gt=0)
    # cost of a bit whose PEI the predictor keeps on the host side; defaults to the PnM cost
    host_side_bit_cost_cycles: Optional[int] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check_anchors(self) -> "AnalyticParams":
        if self.offchip_prob_max < self.offchip_prob_min:
            raise ValueError("offchip_prob_max must be >= offchip_prob_min")
        if self.offchip_size_max_mb <= self.offchip_size_min_mb:
            raise ValueError("offchip_size_max_mb must exceed offchip_size_min_mb")
        return self


class SweepRow(BaseModel):
    kind: AttackKind
    sweep: str
    llc_size_mb: int
    llc_ways: int
    bit_cost_cycles: int
    throughput_mbps: float


# base schema first; `sweep` (size or ways) is appended
SWEEP_COLUMNS = ["kind", "llc_size_mb", "llc_ways", "bit_cost_cycles", "throughput_mbps", "sweep"]


def derive_dram_bit_cost(dram_cfg: DramConfig, host_issue_cycles: int) -> int:
    """One bit through the row buffer: sender conflict, receiver hit, issue cost."""
    return dram_cfg.conflict_cycles + dram_cfg.hit_cycles + host_issue_cycles


def eviction_latency(cfg: CacheConfig) -> int:
    return cfg.llc_ways * (cfg.llc_lookup_cycles + cfg.mem_miss_cycles)


def offchip_cache_prob(size_mb: int, p: AnalyticParams) -> float:
    """Probability the off-chip predictor keeps a PEI on the host, log-linear in LLC size."""
    lo, hi = math.log2(p.offchip_size_min_mb), math.log2(p.offchip_size_max_mb)
    t = (math.log2(size_mb) - lo) / (hi - lo)
    t = min(1.0, max(0.0, t))
    return p.offchip_prob_min + t * (p.offchip_prob_max - p.offchip_prob_min)


def bit_cost(kind: AttackKind, cfg: CacheConfig, p: AnalyticParams) -> int:
    base = p.dram_bit_cost_cycles
    if kind is AttackKind.DIRECT_ACCESS:
        return base
    if kind is AttackKind.DRAMA_CLFLUSH:
        return base + cfg.llc_lookup_cycles
    if kind is AttackKind.DRAMA_EVICTION:
        return base + eviction_latency(cfg)
    if kind is AttackKind.STREAMLINE:
        return p.streamline_fixed_cycles + p.streamline_round_trips * cfg.llc_lookup_cycles
    if kind is AttackKind.DMA_ENGINE:
        return base + p.dma_os_overhead_cycles
    if kind is AttackKind.PNM_OFFCHIP:
        pnm = p.pnm_bit_cost_cycles or base
        host = p.host_side_bit_cost_cycles or pnm
        prob = offchip_cache_prob(cfg.llc_size_mb, p)
        return int(round(pnm + prob / (1.0 - prob) * host))
    raise ValueError(f"unknown attack kind: {kind}")


def throughput_mbps(bit_cost_cycles: int, clock_ghz: float) -> float:
    if bit_cost_cycles <= 0:
        raise ValueError(f"bit cost must be positive, got {bit_cost_cycles}")
    return clock_ghz * 1000.0 / bit_cost_cycles


def sweep(kinds: Sequence[AttackKind], sizes: Sequence[int], ways: Sequence[int], table: LookupTable,
          params: AnalyticParams, clock_ghz: float, mem_miss_cycles: int = defaults.MEM_MISS_CYCLES,
          default_ways: int = defaults.DEFAULT_LLC_WAYS,
          ways_sweep_size_mb: int = defaults.WAYS_SWEEP_SIZE_MB) -> List[SweepRow]:
    """Size sweep at `default_ways`, then ways sweep at `ways_sweep_size_mb`."""
    if not kinds or not sizes or not ways:
        raise ValueError("sweep needs at least one kind, one size and one way count")
    points = [("size", s, default_ways) for s in sizes] + [("ways", ways_sweep_size_mb, w) for w in ways]
    rows: List[SweepRow] = []
    for kind in kinds:
        for label, size_mb, n_ways in points:
            cfg = CacheConfig.from_table(table, size_mb, n_ways, mem_miss_cycles)
            cost = bit_cost(kind, cfg, params)
            rows.append(SweepRow(kind=kind, sweep=label, llc_size_mb=size_mb, llc_ways=n_ways,
                                 bit_cost_cycles=cost, throughput_mbps=throughput_mbps(cost, clock_ghz)))
    logger.debug(f"analytic sweep produced {len(rows)} rows for {len(kinds)} attack kinds")
    return rows
