"""
Built-in defaults for every configurable constant that is not DDR4 timing.

DDR4-2400 timing lives on DramConfig itself. Everything here is either a
PiM engine constant or a value calibrated against the DRAM model; the config
models, the INI loader and the experiment harness all read from this module.
"""

from typing import Dict, Tuple

# PiM engines
PEI_OP_LATENCY_CYCLES = 3
OFFLOAD_TRANSIT_CYCLES = 35
ROWCLONE_ISSUE_OVERHEAD_CYCLES = 38
PMU_CAPACITY = 256
PMU_ROUTING_THRESHOLD = 2
LINE_SIZE_BYTES = 64
HOST_HIT_CYCLES = 32

# covert channels
CHANNEL_BANKS = 16
BATCH_SIZE = 4
THRESHOLD_CYCLES = 150
SYNC_COST_CYCLES = 585
# keep 2 * barrier + rowclone overhead clear of [timeout, timeout + t_rp)
BARRIER_COST_CYCLES = 130
CALIBRATION_SAMPLES = 16
RANDOM_BITS = 1024
MESSAGE = "A5A5"

# analytic baselines; LLC size in MB -> lookup latency in cycles
LOOKUP_TABLE: Dict[int, int] = {8: 290, 16: 360, 32: 450, 64: 580, 128: 760}
MEM_MISS_CYCLES = 100
HOST_ISSUE_CYCLES = 7
DMA_OS_OVERHEAD_CYCLES = 262
STREAMLINE_FIXED_CYCLES = 93
STREAMLINE_ROUND_TRIPS = 3
OFFCHIP_PROB_MIN = 0.02
OFFCHIP_PROB_MAX = 0.17
LLC_SIZES_MB: Tuple[int, ...] = (8, 16, 32, 64, 128)
LLC_WAYS: Tuple[int, ...] = (2, 4, 8, 16, 32, 64, 128)
DEFAULT_LLC_WAYS = 16
WAYS_SWEEP_SIZE_MB = 16

# read-mapping side channel
SIDECHANNEL_BANKS: Tuple[int, ...] = (1024, 2048, 4096, 8192)
HASH_ENTRIES = 16384
VICTIM_READS = 90
READ_LEN = 150
SEED_LEN = 15
ALIGN_ACCESSES = 15
VICTIM_THINK_CYCLES = 95
SENTINEL_INTERVAL_CYCLES = 2.3
HIT_THRESHOLD_CYCLES = 132
FOLLOWUP_GAP_CYCLES = 300
SIDECHANNEL_NOISE_PER_KILOCYCLE = 0.009

# mitigation replay
THINK_CYCLES = 130
STREAMS = 2
TRACE_ACCESSES = 20000
# name -> (llc mpki, row reuse probability); lower mpki means more row reuse
WORKLOAD_PROFILES: Dict[str, Tuple[float, float]] = {
    "bc": (0.57, 0.99),
    "pr": (1.86, 0.97),
    "tc": (5.08, 0.92),
    "bfs": (38.59, 0.88),
    "cc": (45.2, 0.86),
}
