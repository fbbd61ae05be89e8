#!/usr/bin/env python3
"""
PiM-DRAM timing channel experiment harness.

    impact <experiment> [--config impact.ini] [--out results] [--seed N] ...

Each experiment writes <out>/<name>.csv and <out>/<name>.summary.txt.
Exit status: 0 success, 1 invariant or domain failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

load_dotenv(dotenv_path=Path(__file__).parent / ".env", override=True)

from cache_analytic import AttackKind, SWEEP_COLUMNS, sweep, throughput_mbps  # noqa: E402
from covert_channels import (CHANNEL_COLUMNS, POLICIES, ChannelKind, calibrate_threshold,  # noqa: E402
                             encode_message, policy_config, random_message, result_row, run_channel,
                             sample_latencies)
from dnarm_sidechannel import SIDECHANNEL_COLUMNS, result_row as sidechannel_row, sweep_banks  # noqa: E402
from dram_core import DramState  # noqa: E402
from errors import CalibrationFailed, ConfigParseError, PartitionViolation, SimError  # noqa: E402
from mitigation_eval import OVERHEAD_COLUMNS, overhead_report, report_rows  # noqa: E402
from pim_engines import PimEngine  # noqa: E402
from sim_config import SimConfig, parse_config  # noqa: E402
from utils import bits_to_hex, parse_csv, parse_int_list, write_csv  # noqa: E402

LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").upper()
logger = logging.getLogger("impact")


class ExperimentName(str, Enum):
    POC_PNM = "poc-pnm"
    POC_PUM = "poc-pum"
    LATENCY_GAP = "latency-gap"
    THROUGHPUT_SWEEP = "throughput-sweep"
    SENDER_BREAKDOWN = "sender-breakdown"
    SIDE_CHANNEL_SWEEP = "side-channel-sweep"
    MITIGATION_OVERHEAD = "mitigation-overhead"
    MITIGATION_CHANNEL = "mitigation-channel"


class ExperimentSpec(BaseModel):
    name: ExperimentName
    config_path: Optional[str] = None
    out_dir: str = "results"
    seed: int = 0
    message: Optional[str] = None
    random_bits: Optional[int] = Field(None, ge=1)
    policy: Optional[str] = None
    banks: Optional[List[int]] = None
    entry_size: Optional[int] = Field(None, gt=0)
    reads: Optional[int] = Field(None, ge=1)
    victim_rate: Optional[int] = Field(None, ge=0)
    noise_rate: Optional[float] = Field(None, ge=0)


class ExperimentOutcome(BaseModel):
    name: ExperimentName
    csv_path: str
    summary_path: str
    rows: int


Table = Tuple[List[str], List[dict], List[str]]


# --------------------------------------------------------------------- runners


def _message(spec: ExperimentSpec, cfg: SimConfig) -> List[int]:
    if spec.random_bits:
        return random_message(spec.random_bits, spec.seed)
    return encode_message(spec.message or cfg.channel.message)


def _with_noise(spec: ExperimentSpec, cfg: SimConfig) -> SimConfig:
    if spec.noise_rate is None:
        return cfg
    channel = cfg.channel.model_copy(update={"noise_rate_per_kilocycle": spec.noise_rate})
    side = cfg.sidechannel.model_copy(update={"noise_rate_per_kilocycle": spec.noise_rate})
    return cfg.model_copy(update={"channel": channel, "sidechannel": side})


def _poc(kind: ChannelKind) -> Callable[[ExperimentSpec, SimConfig], Table]:
    def runner(spec: ExperimentSpec, cfg: SimConfig) -> Table:
        message = _message(spec, cfg)
        result = run_channel(kind, message, cfg.channel_config(kind, spec.seed), cfg.dram,
                             cfg.pim_config(), spec.policy or "open")
        rows = [p.model_dump() for p in result.probes]
        above = [p.latency_cycles for p in result.probes if p.decoded_bit]
        below = [p.latency_cycles for p in result.probes if not p.decoded_bit]
        summary = [
            f"Receiver latency per bank for the {kind.value.upper()} channel (proof of concept).",
            f"message: {bits_to_hex(message)} ({len(message)} bits)",
            f"decoded: {bits_to_hex(result.decoded)}",
            f"errors: {result.errors} of {result.bits_sent}",
            f"threshold_cycles: {result.threshold_cycles}",
            f"conflict-class latencies: {sorted(set(above))}",
            f"hit-class latencies: {sorted(set(below))}",
        ]
        return ["turn", "bank", "sent_bit", "latency_cycles", "decoded_bit"], rows, summary
    return runner


def run_latency_gap(spec: ExperimentSpec, cfg: SimConfig) -> Table:
    engine = PimEngine(DramState(cfg.dram), cfg.pim_config())
    hits, conflicts = sample_latencies(engine, cfg.channel.calibration_samples)
    rows = [{"sample": i, "class": "hit", "latency_cycles": v} for i, v in enumerate(hits)]
    rows += [{"sample": i, "class": "conflict", "latency_cycles": v} for i, v in enumerate(conflicts)]
    mean_hit, mean_conflict = sum(hits) / len(hits), sum(conflicts) / len(conflicts)
    d = cfg.dram
    summary = [
        "Row hit versus row conflict latency through PEI probes (row-buffer timing gap).",
        f"dram hit/empty/conflict cycles: {d.hit_cycles}/{d.empty_cycles}/{d.conflict_cycles}",
        f"raw model gap t_rp + t_rcd: {d.t_rp_cycles + d.t_rcd_cycles}",
        f"mean hit probe: {mean_hit:.2f}",
        f"mean conflict probe: {mean_conflict:.2f}",
        f"measured gap: {mean_conflict - mean_hit:.2f}",
    ]
    return ["sample", "class", "latency_cycles"], rows, summary


def run_throughput_sweep(spec: ExperimentSpec, cfg: SimConfig) -> Table:
    message = random_message(spec.random_bits or cfg.channel.random_bits, spec.seed)
    pnm = run_channel(ChannelKind.PNM, message, cfg.channel_config(ChannelKind.PNM, spec.seed), cfg.dram,
                      cfg.pim_config())
    pum = run_channel(ChannelKind.PUM, message, cfg.channel_config(ChannelKind.PUM, spec.seed), cfg.dram,
                      cfg.pim_config())
    pnm_cost = max(1, round(pnm.total_cycles / max(1, pnm.bits_correct)))
    params = cfg.analytic_params(pnm_bit_cost_cycles=pnm_cost)
    c = cfg.cache
    analytic = sweep(list(AttackKind), c.sizes, c.ways, c.lookup_table, params, cfg.dram.clock_ghz,
                     c.mem_miss_cycles, c.default_llc_ways, c.ways_sweep_size_mb)
    rows = [r.model_dump() for r in analytic]
    points = [("size", s, c.default_llc_ways) for s in c.sizes] + [("ways", c.ways_sweep_size_mb, w) for w in c.ways]
    for label, result in (("pnm_channel", pnm), ("pum_channel", pum)):
        cost = max(1, round(result.total_cycles / max(1, result.bits_correct)))
        for sweep_kind, size, ways in points:
            rows.append({"kind": label, "sweep": sweep_kind, "llc_size_mb": size, "llc_ways": ways,
                         "bit_cost_cycles": cost, "throughput_mbps": result.throughput_mbps})
    summary = [
        "Covert-channel throughput across LLC sizes and associativities (baseline comparison).",
        f"PnM channel: {pnm.throughput_mbps:.2f} Mb/s, error {pnm.error_rate:.4f}",
        f"PuM channel: {pum.throughput_mbps:.2f} Mb/s, error {pum.error_rate:.4f}",
        f"PuM/PnM ratio: {pum.throughput_mbps / pnm.throughput_mbps:.3f}",
        f"direct access: {throughput_mbps(params.dram_bit_cost_cycles, cfg.dram.clock_ghz):.2f} Mb/s",
    ]
    return SWEEP_COLUMNS, rows, summary


def run_sender_breakdown(spec: ExperimentSpec, cfg: SimConfig) -> Table:
    message = _message(spec, cfg)
    rows, results = [], {}
    for kind in ChannelKind:
        result = run_channel(kind, message, cfg.channel_config(kind, spec.seed), cfg.dram, cfg.pim_config())
        results[kind] = result
        rows.append({"kind": kind, "bits": result.bits_sent, "sender_cycles": result.sender_cycles,
                     "receiver_cycles": result.receiver_cycles, "total_cycles": result.total_cycles})
    ratio = results[ChannelKind.PNM].sender_cycles / max(1, results[ChannelKind.PUM].sender_cycles)
    summary = [
        "Sender and receiver execution time of the PnM channel and the PuM channel (breakdown).",
        f"message: {bits_to_hex(message)}",
        f"PnM sender cycles: {results[ChannelKind.PNM].sender_cycles}",
        f"PuM sender cycles: {results[ChannelKind.PUM].sender_cycles}",
        f"PnM/PuM sender ratio: {ratio:.2f}",
    ]
    return ["kind", "bits", "sender_cycles", "receiver_cycles", "total_cycles"], rows, summary


def run_side_channel_sweep(spec: ExperimentSpec, cfg: SimConfig) -> Table:
    updates = {}
    if spec.banks:
        updates["banks"] = spec.banks
    if spec.entry_size:
        updates["entry_size_bytes"] = spec.entry_size
    if spec.reads:
        updates["reads"] = spec.reads
    if spec.victim_rate is not None:
        updates["victim_think_cycles"] = spec.victim_rate
    side = cfg.sidechannel.model_copy(update=updates)
    results = sweep_banks(side, cfg.dram, cfg.pim_config(), spec.seed)
    summary = ["Read-mapping side channel: throughput, error rate and accuracy over the bank sweep."]
    summary += [f"{r.n_banks} banks: {r.throughput_mbps:.2f} Mb/s, error {r.error_rate:.4f}, "
                f"accuracy {r.identification_accuracy:.4f}, {r.entries_per_row} entries/row, "
                f"{r.seed_len}-mer seeds" for r in results]
    return SIDECHANNEL_COLUMNS, [sidechannel_row(r) for r in results], summary


def run_mitigation_overhead(spec: ExperimentSpec, cfg: SimConfig) -> Table:
    report = overhead_report(cfg.workload_profiles(spec.seed), cfg.dram)
    summary = ["Performance overhead of the closed-row (CRP) and constant-time (CTD) policies."]
    summary += [f"{p.profile}: CRP {p.crp_overhead_pct:.2f}%, CTD {p.ctd_overhead_pct:.2f}%, "
                f"baseline hit rate {p.baseline_hit_rate:.3f}" for p in report.profiles]
    summary += [f"mean CRP overhead: {report.mean_crp_overhead_pct:.2f}%",
                f"mean CTD overhead: {report.mean_ctd_overhead_pct:.2f}%"]
    return OVERHEAD_COLUMNS, report_rows(report), summary


def run_mitigation_channel(spec: ExperimentSpec, cfg: SimConfig) -> Table:
    message = random_message(spec.random_bits or cfg.channel.random_bits, spec.seed)
    policies = [spec.policy] if spec.policy else list(POLICIES)
    rows, summary = [], ["Covert-channel error rate under each mitigation policy."]
    for policy in policies:
        try:
            engine = PimEngine(DramState(policy_config(cfg.dram, policy)), cfg.pim_config())
            calibration = str(calibrate_threshold(engine, cfg.channel.calibration_samples))
        except CalibrationFailed:
            calibration = "failed"
        for kind in ChannelKind:
            channel = cfg.channel_config(kind, spec.seed)
            try:
                result = run_channel(kind, message, channel, cfg.dram, cfg.pim_config(), policy)
            except PartitionViolation as exc:
                rows.append({**dict.fromkeys(CHANNEL_COLUMNS, ""), "kind": kind, "policy": policy,
                             "bits": len(message), "outcome": "partition_violation", "calibration": calibration})
                summary.append(f"{kind.value} / {policy}: blocked ({exc})")
                continue
            rows.append({**result_row(result), "outcome": "transmitted", "calibration": calibration})
            summary.append(f"{kind.value} / {policy}: error rate {result.error_rate:.4f}, calibration {calibration}")
    return CHANNEL_COLUMNS + ["outcome", "calibration"], rows, summary


RUNNERS: Dict[ExperimentName, Callable[[ExperimentSpec, SimConfig], Table]] = {
    ExperimentName.POC_PNM: _poc(ChannelKind.PNM),
    ExperimentName.POC_PUM: _poc(ChannelKind.PUM),
    ExperimentName.LATENCY_GAP: run_latency_gap,
    ExperimentName.THROUGHPUT_SWEEP: run_throughput_sweep,
    ExperimentName.SENDER_BREAKDOWN: run_sender_breakdown,
    ExperimentName.SIDE_CHANNEL_SWEEP: run_side_channel_sweep,
    ExperimentName.MITIGATION_OVERHEAD: run_mitigation_overhead,
    ExperimentName.MITIGATION_CHANNEL: run_mitigation_channel,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentOutcome:
    cfg = _with_noise(spec, parse_config(spec.config_path, spec.seed))
    if spec.policy is not None and spec.policy not in POLICIES:
        raise ValueError(f"unknown policy {spec.policy!r}")
    logger.info(f"🚀 running {spec.name.value} (seed {spec.seed})")
    columns, rows, summary = RUNNERS[spec.name](spec, cfg)
    out = Path(spec.out_dir)
    csv_path = out / f"{spec.name.value}.csv"
    summary_path = out / f"{spec.name.value}.summary.txt"
    count = write_csv(csv_path, columns, rows)
    header = [f"experiment: {spec.name.value}", f"seed: {spec.seed}",
              f"config: {spec.config_path or 'built-in defaults'}", ""]
    summary_path.write_text("\n".join(header + summary) + "\n", encoding="utf-8")
    return ExperimentOutcome(name=spec.name, csv_path=str(csv_path), summary_path=str(summary_path), rows=count)


# ------------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="impact", description="Run PiM-DRAM timing channel experiments")
    p.add_argument("experiment", help="one of: " + ", ".join(e.value for e in ExperimentName)
                   + " (comma-separated list with --parallel)")
    p.add_argument("--config", dest="config", default=None, help="INI config (default: $IMPACT_CONFIG or built-ins)")
    p.add_argument("--out", dest="out", default="results", help="output directory")
    p.add_argument("--seed", dest="seed", type=int, default=None, help="RNG seed (default: $IMPACT_SEED or 0)")
    p.add_argument("--random-bits", dest="random_bits", type=int, default=None, help="send N random bits")
    p.add_argument("--message", dest="message", default=None, help="hex message, e.g. A5A5")
    p.add_argument("--policy", dest="policy", choices=POLICIES, default=None, help="DRAM mitigation policy")
    p.add_argument("--banks", dest="banks", default=None, help="side-channel bank sweep, e.g. 1024,2048")
    p.add_argument("--entry-size", dest="entry_size", type=int, default=None, help="hash entry size in bytes")
    p.add_argument("--reads", dest="reads", type=int, default=None, help="victim reads")
    p.add_argument("--victim-rate", dest="victim_rate", type=int, default=None,
                   help="victim compute cycles between its hash-table accesses")
    p.add_argument("--noise-rate", dest="noise_rate", type=float, default=None, help="noise accesses per kilocycle")
    p.add_argument("--parallel", dest="parallel", action="store_true", help="run listed experiments concurrently")
    return p


def _spec_from_args(name: str, args: argparse.Namespace, seed: int, config: Optional[str]) -> ExperimentSpec:
    return ExperimentSpec(
        name=name, config_path=config, out_dir=args.out, seed=seed, message=args.message,
        random_bits=args.random_bits, policy=args.policy,
        banks=parse_int_list(args.banks) if args.banks else None, entry_size=args.entry_size,
        reads=args.reads, victim_rate=args.victim_rate, noise_rate=args.noise_rate,
    )


def _run_one(spec: ExperimentSpec) -> ExperimentOutcome:
    return run_experiment(spec)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")

    names = parse_csv(args.experiment)
    known = {e.value for e in ExperimentName}
    unknown = [n for n in names if n not in known]
    if not names or unknown or (len(names) > 1 and not args.parallel):
        parser.print_usage(sys.stderr)
        reason = f"unknown experiment {', '.join(unknown)}" if unknown else "give one experiment or use --parallel"
        print(f"impact: error: {reason}", file=sys.stderr)
        return 2

    try:
        seed = args.seed if args.seed is not None else int(os.environ.get("IMPACT_SEED", "0"))
        config = args.config or os.environ.get("IMPACT_CONFIG") or None
        specs = [_spec_from_args(n, args, seed, config) for n in names]
        if args.parallel and len(specs) > 1:
            with ProcessPoolExecutor(max_workers=len(specs)) as pool:
                outcomes = list(pool.map(_run_one, specs))
        else:
            outcomes = [run_experiment(s) for s in specs]
    except (ConfigParseError, ValidationError, ValueError) as exc:
        print(f"❌ configuration error: {exc}", file=sys.stderr)
        return 2
    except SimError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    for outcome in outcomes:
        print(f"✅ {outcome.name.value}: {outcome.rows} rows -> {outcome.csv_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
