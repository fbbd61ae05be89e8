"""
impact: PiM-DRAM Timing Channel Simulator

A deterministic, cycle-approximate simulator of a DRAM subsystem with
processing-near-memory and processing-using-memory engines, used to measure
row-buffer covert and side channels and the cost of their mitigations.
"""

__version__ = "1.0.0"
