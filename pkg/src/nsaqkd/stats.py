"""Observed statistics: the interchange format between simulation or
experiment and the key-rate engines.

A cell may carry raw counts, or only the gain/QBER pair a paper table reports.
In the latter case the key-rate engines reconstruct trial counts from the
total pulse number and the emission probabilities.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .optics import BASES, INTENSITIES
from .schema import validate

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MdiCell:
    gain: float
    qber: float
    n_pairs: int | None = None
    n_coincidence: int | None = None
    n_error: int | None = None

    def __post_init__(self):
        if not 0 <= self.gain <= 1 or not 0 <= self.qber <= 1:
            raise ValueError(f"gain/qber out of [0, 1]: {self.gain}, {self.qber}")
        if self.has_counts and not (0 <= self.n_error <= self.n_coincidence <= self.n_pairs):
            raise ValueError("counts must satisfy n_error <= n_coincidence <= n_pairs")

    @property
    def has_counts(self) -> bool:
        return self.n_pairs is not None

    @classmethod
    def from_counts(cls, n_pairs: int, n_coincidence: int, n_error: int) -> "MdiCell":
        gain = n_coincidence / n_pairs if n_pairs else 0.0
        qber = n_error / n_coincidence if n_coincidence else 0.0
        return cls(gain, qber, int(n_pairs), int(n_coincidence), int(n_error))


@dataclass(frozen=True)
class Bb84Cell:
    gain: float
    qber: float
    n_sent: int | None = None
    n_detected: int | None = None
    n_error: int | None = None

    def __post_init__(self):
        if not 0 <= self.gain <= 1 or not 0 <= self.qber <= 1:
            raise ValueError(f"gain/qber out of [0, 1]: {self.gain}, {self.qber}")
        if self.has_counts and not (0 <= self.n_error <= self.n_detected <= self.n_sent):
            raise ValueError("counts must satisfy n_error <= n_detected <= n_sent")

    @property
    def has_counts(self) -> bool:
        return self.n_sent is not None

    @classmethod
    def from_counts(cls, n_sent: int, n_detected: int, n_error: int) -> "Bb84Cell":
        gain = n_detected / n_sent if n_sent else 0.0
        qber = n_error / n_detected if n_detected else 0.0
        return cls(gain, qber, int(n_sent), int(n_detected), int(n_error))


def _cell_dict(cell) -> dict:
    out = {"gain": cell.gain, "qber": cell.qber}
    if cell.has_counts:
        for k in cell.__dataclass_fields__:
            if k.startswith("n_"):
                out[k] = getattr(cell, k)
    return out


@dataclass
class ObservedStatisticsMDI:
    """Per (intensity_a, intensity_b, basis) coincidence statistics."""

    cells: dict[tuple[str, str, str], MdiCell] = field(default_factory=dict)
    n_pulses: int | None = None
    n_sifted: int | None = None
    source: str | None = None

    def __getitem__(self, key: tuple[str, str, str]) -> MdiCell:
        try:
            return self.cells[key]
        except KeyError:
            a, b, basis = key
            raise KeyError(f"missing MDI cell ({a}, {b}, {basis})") from None

    def __contains__(self, key) -> bool:
        return key in self.cells

    @property
    def has_counts(self) -> bool:
        return bool(self.cells) and all(c.has_counts for c in self.cells.values())

    def merge(self, other: "ObservedStatisticsMDI") -> "ObservedStatisticsMDI":
        """Add the counts of two count-carrying runs."""
        if not (self.has_counts and other.has_counts):
            raise ValueError("only count-carrying statistics can be merged")
        cells = {}
        for key in sorted(set(self.cells) | set(other.cells)):
            tot = [0, 0, 0]
            for src in (self.cells.get(key), other.cells.get(key)):
                if src is not None:
                    tot = [tot[0] + src.n_pairs, tot[1] + src.n_coincidence, tot[2] + src.n_error]
            cells[key] = MdiCell.from_counts(*tot)
        return ObservedStatisticsMDI(cells, (self.n_pulses or 0) + (other.n_pulses or 0),
                                     (self.n_sifted or 0) + (other.n_sifted or 0), self.source)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "protocol": "MDI"}
        if self.source:
            out["source"] = self.source
        if self.n_pulses is not None:
            out["n_pulses"] = self.n_pulses
        if self.n_sifted is not None:
            out["n_sifted"] = self.n_sifted
        out["cells"] = [
            {"intensity_a": a, "intensity_b": b, "basis": basis, **_cell_dict(c)}
            for (a, b, basis), c in sorted(self.cells.items(), key=lambda kv: _mdi_order(kv[0]))
        ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ObservedStatisticsMDI":
        validate(data, "observed_mdi", "MDI statistics")
        cells = {}
        for c in data["cells"]:
            key = (c["intensity_a"], c["intensity_b"], c["basis"])
            if key in cells:
                raise ValueError(f"duplicate MDI cell {key}")
            if "n_pairs" in c:
                cells[key] = MdiCell.from_counts(c["n_pairs"], c["n_coincidence"], c["n_error"])
            else:
                cells[key] = MdiCell(c["gain"], c["qber"])
        return cls(cells, data.get("n_pulses"), data.get("n_sifted"), data.get("source"))


@dataclass
class ObservedStatisticsBB84:
    """Per (intensity, basis) detection statistics of one BB84 link."""

    cells: dict[tuple[str, str], Bb84Cell] = field(default_factory=dict)
    n_pulses: int | None = None
    n_sifted: int | None = None
    source: str | None = None

    def __getitem__(self, key: tuple[str, str]) -> Bb84Cell:
        try:
            return self.cells[key]
        except KeyError:
            raise KeyError(f"missing BB84 cell ({key[0]}, {key[1]})") from None

    def __contains__(self, key) -> bool:
        return key in self.cells

    @property
    def has_counts(self) -> bool:
        return bool(self.cells) and all(c.has_counts for c in self.cells.values())

    def merge(self, other: "ObservedStatisticsBB84") -> "ObservedStatisticsBB84":
        if not (self.has_counts and other.has_counts):
            raise ValueError("only count-carrying statistics can be merged")
        cells = {}
        for key in sorted(set(self.cells) | set(other.cells)):
            tot = [0, 0, 0]
            for src in (self.cells.get(key), other.cells.get(key)):
                if src is not None:
                    tot = [tot[0] + src.n_sent, tot[1] + src.n_detected, tot[2] + src.n_error]
            cells[key] = Bb84Cell.from_counts(*tot)
        return ObservedStatisticsBB84(cells, (self.n_pulses or 0) + (other.n_pulses or 0),
                                      (self.n_sifted or 0) + (other.n_sifted or 0), self.source)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "protocol": "BB84"}
        if self.source:
            out["source"] = self.source
        if self.n_pulses is not None:
            out["n_pulses"] = self.n_pulses
        if self.n_sifted is not None:
            out["n_sifted"] = self.n_sifted
        out["cells"] = [
            {"intensity": i, "basis": b, **_cell_dict(c)}
            for (i, b), c in sorted(self.cells.items(),
                                    key=lambda kv: (BASES.index(kv[0][1]), INTENSITIES.index(kv[0][0])))
        ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ObservedStatisticsBB84":
        validate(data, "observed_bb84", "BB84 statistics")
        cells = {}
        for c in data["cells"]:
            key = (c["intensity"], c["basis"])
            if key in cells:
                raise ValueError(f"duplicate BB84 cell {key}")
            if "n_sent" in c:
                cells[key] = Bb84Cell.from_counts(c["n_sent"], c["n_detected"], c["n_error"])
            else:
                cells[key] = Bb84Cell(c["gain"], c["qber"])
        return cls(cells, data.get("n_pulses"), data.get("n_sifted"), data.get("source"))


def _mdi_order(key):
    a, b, basis = key
    return BASES.index(basis), INTENSITIES.index(a), INTENSITIES.index(b)


def load_statistics(path: str | Path):
    """Read an observed-statistics JSON file, dispatching on ``protocol``."""
    text = Path(path).read_text()
    if not text.strip():
        raise ValueError(f"{path}: empty statistics file")
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be an object")
    proto = data.get("protocol")
    if proto == "MDI":
        return ObservedStatisticsMDI.from_dict(data)
    if proto == "BB84":
        return ObservedStatisticsBB84.from_dict(data)
    raise ValueError(f"{path}: protocol must be 'MDI' or 'BB84', got {proto!r}")


def dump_statistics(stats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=False) + "\n")
