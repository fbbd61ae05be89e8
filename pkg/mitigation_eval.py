"""
Mitigation Evaluation

Synthetic locality-parameterised traces stand in for graph workloads; each is
replayed closed-loop through the DRAM model under the open-row baseline, the
closed-row policy (CRP) and constant-time access (CTD).
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

import defaults
from dram_core import DramConfig, DramState, MemoryAccess, RowPolicy

logger = logging.getLogger(__name__)


class WorkloadProfile(BaseModel):
    name: str
    llc_mpki: float = Field(ge=0)
    row_reuse_prob: float = Field(ge=0, le=1)
    accesses: int = Field(defaults.TRACE_ACCESSES, ge=1)
    seed: int = 0
    think_cycles: int = Field(defaults.THINK_CYCLES, ge=0)
    streams: int = Field(defaults.STREAMS, ge=1)


@dataclass
class AccessTrace:
    """One list of (bank, row) per stream plus the compute time between accesses."""

    streams: List[List[tuple]]
    think_cycles: int = 0

    def __len__(self) -> int:
        return sum(len(s) for s in self.streams)


class ProfileOverhead(BaseModel):
    profile: str
    baseline_cycles: int
    crp_cycles: int
    ctd_cycles: int
    crp_overhead_pct: float
    ctd_overhead_pct: float
    baseline_hit_rate: float


class OverheadReport(BaseModel):
    profiles: List[ProfileOverhead]
    mean_crp_overhead_pct: float
    mean_ctd_overhead_pct: float


OVERHEAD_COLUMNS = ["profile", "policy", "total_cycles", "overhead_pct"]


def report_rows(report: OverheadReport) -> List[dict]:
    rows = []
    for p in report.profiles:
        rows.append({"profile": p.profile, "policy": "open", "total_cycles": p.baseline_cycles, "overhead_pct": 0.0})
        rows.append({"profile": p.profile, "policy": "closed", "total_cycles": p.crp_cycles,
                     "overhead_pct": p.crp_overhead_pct})
        rows.append({"profile": p.profile, "policy": "constant", "total_cycles": p.ctd_cycles,
                     "overhead_pct": p.ctd_overhead_pct})
    return rows


def default_profiles(accesses: int = defaults.TRACE_ACCESSES, seed: int = 0, think_cycles: int = defaults.THINK_CYCLES,
                     streams: int = defaults.STREAMS) -> List[WorkloadProfile]:
    return [
        WorkloadProfile(name=name, llc_mpki=mpki, row_reuse_prob=reuse, accesses=accesses,
                        seed=seed + i, think_cycles=think_cycles, streams=streams)
        for i, (name, (mpki, reuse)) in enumerate(defaults.WORKLOAD_PROFILES.items())
    ]


def _stream(rng: np.random.Generator, n: int, reuse: float, n_banks: int, n_rows: int) -> List[tuple]:
    banks = rng.integers(0, n_banks, size=n)
    rows = rng.integers(0, n_rows, size=n)
    fresh = rng.random(n) >= reuse
    fresh[0] = True
    # each reused access copies the most recent fresh (bank, row)
    source = np.maximum.accumulate(np.where(fresh, np.arange(n), 0))
    return list(zip(banks[source].tolist(), rows[source].tolist()))


def gen_trace(profile: WorkloadProfile, dram_cfg: DramConfig) -> AccessTrace:
    rng = np.random.default_rng(profile.seed)
    streams = [_stream(rng, profile.accesses, profile.row_reuse_prob, dram_cfg.n_banks, dram_cfg.n_rows)
               for _ in range(profile.streams)]
    return AccessTrace(streams, profile.think_cycles)


def _with_policy(dram_cfg: DramConfig, policy: RowPolicy) -> DramConfig:
    fields = dram_cfg.model_dump()
    fields.update(row_policy=policy, partition_map=None)
    return DramConfig(**fields)


def run_trace(trace: AccessTrace, dram_cfg: DramConfig, policy: RowPolicy,
              state: Optional[DramState] = None) -> int:
    """Closed-loop replay; returns the cycle at which the last access completes."""
    dram = state or DramState(_with_policy(dram_cfg, policy), log_commands=False)
    heap = [(0, idx, 0) for idx, s in enumerate(trace.streams) if s]
    heapq.heapify(heap)
    finish = 0
    while heap:
        issue, idx, pos = heapq.heappop(heap)
        bank, row = trace.streams[idx][pos]
        outcome = dram.access(MemoryAccess(f"stream{idx}", bank, row, issue))
        finish = max(finish, outcome.completion_cycle)
        if pos + 1 < len(trace.streams[idx]):
            heapq.heappush(heap, (outcome.completion_cycle + trace.think_cycles, idx, pos + 1))
    return finish


def _overhead(cycles: int, baseline: int) -> float:
    return 100.0 * (cycles - baseline) / baseline


def overhead_report(profiles: Sequence[WorkloadProfile], dram_cfg: DramConfig) -> OverheadReport:
    if not profiles:
        raise ValueError("overhead report needs at least one profile")
    rows: List[ProfileOverhead] = []
    for profile in profiles:
        trace = gen_trace(profile, dram_cfg)
        baseline_state = DramState(_with_policy(dram_cfg, RowPolicy.OPEN_TIMEOUT), log_commands=False)
        baseline = run_trace(trace, dram_cfg, RowPolicy.OPEN_TIMEOUT, baseline_state)
        crp = run_trace(trace, dram_cfg, RowPolicy.CLOSED_ROW)
        ctd = run_trace(trace, dram_cfg, RowPolicy.CONSTANT_TIME)
        metrics = baseline_state.perf_metrics()
        hit_rate = metrics["num_hit"] / max(1, len(trace))
        rows.append(ProfileOverhead(
            profile=profile.name, baseline_cycles=baseline, crp_cycles=crp, ctd_cycles=ctd,
            crp_overhead_pct=_overhead(crp, baseline), ctd_overhead_pct=_overhead(ctd, baseline),
            baseline_hit_rate=hit_rate,
        ))
        logger.info(f"{profile.name}: CRP {rows[-1].crp_overhead_pct:+.1f}%, CTD {rows[-1].ctd_overhead_pct:+.1f}% "
                    f"(baseline hit rate {hit_rate:.2f})")
    return OverheadReport(
        profiles=rows,
        mean_crp_overhead_pct=float(np.mean([r.crp_overhead_pct for r in rows])),
        mean_ctd_overhead_pct=float(np.mean([r.ctd_overhead_pct for r in rows])),
    )
