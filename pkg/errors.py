"""Exceptions shared by the simulator modules."""

from __future__ import annotations

from typing import Any, Dict, Optional


class SimError(Exception):
    """Base class for every error the simulator raises on purpose."""


class ConfigParseError(SimError):
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None,
                 section: Optional[str] = None, key: Optional[str] = None):
        self.path = path
        self.line = line
        self.section = section
        self.key = key
        where = path or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        if section:
            where = f"{where}: [{section}]" + (f" {key}" if key else "")
        super().__init__(f"{where}: {message}")


class PartitionViolation(SimError):
    """A process touched a bank its memory partition does not own."""

    def __init__(self, process_id: str, bank: int):
        self.process_id = process_id
        self.bank = bank
        # args must rebuild the exception (simpy re-raises process failures as type(exc)(*exc.args))
        super().__init__(process_id, bank)

    def __str__(self) -> str:
        return f"process {self.process_id!r} is not allowed to access bank {self.bank}"


class MaskRangeMismatch(SimError):
    pass


class CalibrationFailed(SimError):
    """Hit and conflict latency samples overlap, so no threshold separates them."""

    def __init__(self, message: str, samples: Optional[Dict[str, Any]] = None):
        self.samples = samples or {}
        super().__init__(message)


class SyncDeadlock(SimError):
    pass


class SizeMismatch(SimError):
    pass


class InvariantViolation(SimError):
    pass
