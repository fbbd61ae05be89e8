from __future__ import annotations

import csv
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Sequence


def parse_csv(s: Optional[str]) -> List[str]:
    if not s:
        return []
    return [p.strip() for p in s.split(",") if p.strip()]


def parse_int_list(s: Optional[str]) -> List[int]:
    return [int(p) for p in parse_csv(s)]


def hex_to_bits(message: str) -> List[int]:
    """'A5' -> [1,0,1,0,0,1,0,1]; most significant bit first."""
    text = message.strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    if not text:
        raise ValueError("empty hex message")
    try:
        value = int(text, 16)
    except ValueError:
        raise ValueError(f"not a hex string: {message!r}") from None
    width = len(text) * 4
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


def bits_to_hex(bits: Sequence[int]) -> str:
    if len(bits) % 4:
        bits = list(bits) + [0] * (4 - len(bits) % 4)
    value = 0
    for b in bits:
        value = (value << 1) | (b & 1)
    return f"{value:0{len(bits) // 4}X}"


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> int:
    """Write rows with a fixed column order; returns the number of data rows."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])
            count += 1
    return count
