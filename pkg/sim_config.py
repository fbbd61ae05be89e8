"""
Simulator Configuration

INI sections [dram], [cache], [pim], [channel], [sidechannel], [mitigation]
and [profiles], each validated by a pydantic model. An empty file yields the
DDR4-2400 defaults plus the calibrated constants.
"""

from __future__ import annotations

import configparser
import logging
import re
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Tuple, Type, Union

from pydantic import BaseModel, Field, ValidationError

import defaults
from cache_analytic import AnalyticParams, LookupTable, derive_dram_bit_cost
from covert_channels import ChannelConfig, ChannelKind, NoiseModel, SyncKind
from dnarm_sidechannel import SideChannelConfig
from dram_core import DramConfig
from errors import ConfigParseError
from mitigation_eval import WorkloadProfile, default_profiles
from pim_engines import PimConfig
from utils import parse_csv, parse_int_list

logger = logging.getLogger(__name__)


class CacheSettings(BaseModel):
    lookup_table: LookupTable = Field(default_factory=LookupTable)
    mem_miss_cycles: int = Field(defaults.MEM_MISS_CYCLES, ge=0)
    host_hit_cycles: int = Field(defaults.HOST_HIT_CYCLES, ge=0)
    host_issue_cycles: int = Field(defaults.HOST_ISSUE_CYCLES, ge=0)
    dma_os_overhead_cycles: int = Field(defaults.DMA_OS_OVERHEAD_CYCLES, ge=0)
    streamline_fixed_cycles: int = Field(defaults.STREAMLINE_FIXED_CYCLES, ge=0)
    streamline_round_trips: int = Field(defaults.STREAMLINE_ROUND_TRIPS, ge=1)
    offchip_prob_min: float = Field(defaults.OFFCHIP_PROB_MIN, ge=0, lt=1)
    offchip_prob_max: float = Field(defaults.OFFCHIP_PROB_MAX, ge=0, lt=1)
    sizes: List[int] = Field(default_factory=lambda: list(defaults.LLC_SIZES_MB))
    ways: List[int] = Field(default_factory=lambda: list(defaults.LLC_WAYS))
    default_llc_ways: int = Field(defaults.DEFAULT_LLC_WAYS, ge=1)
    ways_sweep_size_mb: int = Field(defaults.WAYS_SWEEP_SIZE_MB, gt=0)


class ChannelSettings(BaseModel):
    batch_size: int = Field(defaults.BATCH_SIZE, ge=1)
    threshold_cycles: int = Field(defaults.THRESHOLD_CYCLES, gt=0)
    sync_cost_cycles: int = Field(defaults.SYNC_COST_CYCLES, ge=0)
    barrier_cost_cycles: int = Field(defaults.BARRIER_COST_CYCLES, ge=0)
    noise_rate_per_kilocycle: float = Field(0.0, ge=0)
    random_bits: int = Field(defaults.RANDOM_BITS, ge=1)
    message: str = defaults.MESSAGE
    calibrate: bool = False
    calibration_samples: int = Field(defaults.CALIBRATION_SAMPLES, ge=1)


class MitigationSettings(BaseModel):
    think_cycles: int = Field(defaults.THINK_CYCLES, ge=0)
    streams: int = Field(defaults.STREAMS, ge=1)
    accesses: int = Field(defaults.TRACE_ACCESSES, ge=1)


class SimConfig(BaseModel):
    dram: DramConfig = Field(default_factory=DramConfig)
    cache: CacheSettings = Field(default_factory=CacheSettings)
    pim: PimConfig = Field(default_factory=PimConfig)
    channel: ChannelSettings = Field(default_factory=ChannelSettings)
    sidechannel: SideChannelConfig = Field(default_factory=SideChannelConfig)
    mitigation: MitigationSettings = Field(default_factory=MitigationSettings)
    profiles: List[WorkloadProfile] = Field(default_factory=list)

    def pim_config(self) -> PimConfig:
        # the host route costs an LLC hit, which belongs to the [cache] section
        return self.pim.model_copy(update={"host_hit_cycles": self.cache.host_hit_cycles})

    def channel_config(self, kind: ChannelKind, seed: int = 0) -> ChannelConfig:
        ch = self.channel
        return ChannelConfig(
            n_banks=self.dram.n_banks, batch_size=min(ch.batch_size, self.dram.n_banks),
            threshold_cycles=ch.threshold_cycles,
            sync=SyncKind.SEMAPHORE if kind is ChannelKind.PNM else SyncKind.BARRIER,
            sync_cost_cycles=ch.sync_cost_cycles, barrier_cost_cycles=ch.barrier_cost_cycles,
            noise=NoiseModel(rate_per_kilocycle=ch.noise_rate_per_kilocycle, seed=seed),
            calibrate=ch.calibrate, calibration_samples=ch.calibration_samples,
        )

    def analytic_params(self, pnm_bit_cost_cycles: Optional[int] = None) -> AnalyticParams:
        c = self.cache
        return AnalyticParams(
            dram_bit_cost_cycles=derive_dram_bit_cost(self.dram, c.host_issue_cycles),
            dma_os_overhead_cycles=c.dma_os_overhead_cycles,
            streamline_fixed_cycles=c.streamline_fixed_cycles,
            streamline_round_trips=c.streamline_round_trips,
            offchip_prob_min=c.offchip_prob_min, offchip_prob_max=c.offchip_prob_max,
            offchip_size_min_mb=min(c.sizes), offchip_size_max_mb=max(c.sizes),
            pnm_bit_cost_cycles=pnm_bit_cost_cycles,
        )

    def workload_profiles(self, seed: int = 0) -> List[WorkloadProfile]:
        if self.profiles:
            return self.profiles
        m = self.mitigation
        return default_profiles(accesses=m.accesses, seed=seed, think_cycles=m.think_cycles, streams=m.streams)


# ----------------------------------------------------------------- value parsing


def parse_partition(text: str) -> Dict[str, FrozenSet[int]]:
    """'receiver:0-7, sender:8-15' -> {'receiver': {0..7}, 'sender': {8..15}}"""
    result: Dict[str, set] = {}
    for item in parse_csv(text):
        pid, sep, spec = item.partition(":")
        if not sep or not pid.strip():
            raise ValueError(f"partition entry {item!r} is not process:banks")
        banks = result.setdefault(pid.strip(), set())
        for part in spec.split("+"):
            lo, dash, hi = part.strip().partition("-")
            if dash:
                banks.update(range(int(lo), int(hi) + 1))
            else:
                banks.add(int(lo))
    return {pid: frozenset(banks) for pid, banks in result.items()}


def _as_int_list(text: str) -> List[int]:
    values = parse_int_list(text)
    if not values:
        raise ValueError("expected a comma-separated list of integers")
    return values


# per section: INI key -> (model field, converter)
_Converter = Callable[[str], Any]
SECTIONS: Dict[str, Tuple[Type[BaseModel], Dict[str, Tuple[str, Optional[_Converter]]]]] = {
    "dram": (DramConfig, {
        **{f: (f, None) for f in DramConfig.model_fields if f != "partition_map"},
        "partition": ("partition_map", parse_partition),
    }),
    "cache": (CacheSettings, {
        **{f: (f, None) for f in CacheSettings.model_fields},
        "lookup_table": ("lookup_table", LookupTable.parse),
        "sizes": ("sizes", _as_int_list),
        "ways": ("ways", _as_int_list),
    }),
    "pim": (PimConfig, {f: (f, None) for f in PimConfig.model_fields if f != "host_hit_cycles"}),
    "channel": (ChannelSettings, {f: (f, None) for f in ChannelSettings.model_fields}),
    "sidechannel": (SideChannelConfig, {
        **{f: (f, None) for f in SideChannelConfig.model_fields},
        "banks": ("banks", _as_int_list),
        "seed_len_sweep": ("seed_len_sweep", parse_int_list),
    }),
    "mitigation": (MitigationSettings, {f: (f, None) for f in MitigationSettings.model_fields}),
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """(section, key) -> 1-based line number; key None marks the header."""
    index: Dict[Tuple[str, Optional[str]], int] = {}
    section: Optional[str] = None
    for number, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), number)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            index.setdefault((section, m.group(1).strip().lower()), number)
    return index


def _parse_profiles(items: Dict[str, str], source: str, lines: Dict, mitigation: MitigationSettings,
                    seed: int) -> List[WorkloadProfile]:
    profiles = []
    for i, (name, raw) in enumerate(items.items()):
        line = lines.get(("profiles", name))
        parts = parse_csv(raw)
        if not 2 <= len(parts) <= 4:
            raise ConfigParseError("expected 'mpki, reuse[, accesses[, seed]]'", source, line, "profiles", name)
        try:
            profiles.append(WorkloadProfile(
                name=name, llc_mpki=float(parts[0]), row_reuse_prob=float(parts[1]),
                accesses=int(parts[2]) if len(parts) > 2 else mitigation.accesses,
                seed=int(parts[3]) if len(parts) > 3 else seed + i,
                think_cycles=mitigation.think_cycles, streams=mitigation.streams,
            ))
        except (ValueError, ValidationError) as exc:
            raise ConfigParseError(_first_message(exc), source, line, "profiles", name) from None
    return profiles


def _first_message(exc: Exception) -> str:
    if isinstance(exc, ValidationError):
        err = exc.errors()[0]
        return err["msg"]
    return str(exc)


def _build_section(name: str, items: Dict[str, str], source: str, lines: Dict) -> BaseModel:
    model, keys = SECTIONS[name]
    values: Dict[str, Any] = {}
    field_to_key: Dict[str, str] = {}
    for key, raw in items.items():
        if key not in keys:
            raise ConfigParseError("unknown key", source, lines.get((name, key)), name, key)
        field, convert = keys[key]
        field_to_key[field] = key
        try:
            values[field] = convert(raw) if convert else raw
        except (ValueError, ValidationError) as exc:
            raise ConfigParseError(_first_message(exc), source, lines.get((name, key)), name, key) from None
    try:
        return model(**values)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = str(err["loc"][0]) if err["loc"] else None
        key = field_to_key.get(field) if field else None
        line = lines.get((name, key)) if key else lines.get((name, None))
        raise ConfigParseError(err["msg"], source, line, name, key) from None


def parse_config_text(text: str, source: str = "<config>", seed: int = 0) -> SimConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigParseError(str(exc).splitlines()[0], source, getattr(exc, "lineno", None)) from None
    lines = _line_index(text)

    sections: Dict[str, Any] = {}
    for name in parser.sections():
        if name not in SECTIONS and name != "profiles":
            raise ConfigParseError("unknown section", source, lines.get((name, None)), name)
        if name != "profiles":
            sections[name] = _build_section(name, dict(parser.items(name)), source, lines)

    mitigation = sections.get("mitigation", MitigationSettings())
    if parser.has_section("profiles"):
        sections["profiles"] = _parse_profiles(dict(parser.items("profiles")), source, lines, mitigation, seed)
    cfg = SimConfig(**sections)
    logger.debug(f"loaded configuration from {source}: sections {sorted(sections) or 'defaults'}")
    return cfg


def parse_config(path: Union[str, Path, None], seed: int = 0) -> SimConfig:
    """Read and validate an INI file; None means all defaults."""
    if path is None:
        return SimConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigParseError("config file not found", str(path))
    return parse_config_text(path.read_text(encoding="utf-8"), str(path), seed)
