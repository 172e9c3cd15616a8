"""Key-rate report shared by both engines, plus the binary entropy."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

REPETITION_RATE_HZ = 40e6


def binary_entropy(x: float) -> float:
    """H2(x) in bits; 0 at the endpoints, values outside [0, 1] are rejected."""
    if not 0 <= x <= 1:
        raise ValueError(f"binary entropy argument must be in [0, 1], got {x}")
    if x == 0 or x == 1:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def fingerprint(*objs) -> str:
    """SHA-256 of the canonical JSON form of ``objs``."""
    blob = json.dumps(objs, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class KeyRateReport:
    protocol: str
    rate: float
    intermediates: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    repetition_rate: float = REPETITION_RATE_HZ
    input_fingerprint: str | None = None
    timestamp: str | None = None

    @property
    def rate_per_second(self) -> float:
        return self.rate * self.repetition_rate

    @property
    def positive(self) -> bool:
        return self.rate > 0

    def to_dict(self) -> dict:
        out = {
            "protocol": self.protocol,
            "rate_per_pulse": self.rate,
            "repetition_rate_hz": self.repetition_rate,
            "rate_per_second": self.rate_per_second,
            "intermediates": _jsonable(self.intermediates),
            "warnings": list(self.warnings),
            "input_fingerprint": self.input_fingerprint,
        }
        if self.timestamp is not None:
            out["timestamp"] = self.timestamp
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj
