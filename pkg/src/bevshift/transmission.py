"""Gear-position dynamics and admissible gear-sequence enumeration."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass

from bevshift.errors import ConfigError, GearOutOfRange

SHIFT_SIGNALS = (-1, 0, 1)


@dataclass(frozen=True)
class GearTable:
    """Reduction ratio per gear position (1-based), strictly decreasing."""

    ratios: tuple[float, ...] = (3.05, 1.72, 0.92)

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.ratios:
            raise ConfigError("gear table needs at least one ratio")
        if any(r <= 0 for r in self.ratios):
            raise ConfigError("gear ratios must be positive")
        if any(a <= b for a, b in zip(self.ratios, self.ratios[1:])):
            raise ConfigError("gear ratios must be strictly decreasing")

    @property
    def eta_max(self) -> int:
        return len(self.ratios)

    def ratio(self, gear: int) -> float:
        if not 1 <= gear <= self.eta_max:
            raise GearOutOfRange(f"gear {gear} outside 1..{self.eta_max}")
        return self.ratios[gear - 1]


@dataclass(frozen=True)
class GearSequence:
    """Gear positions over a horizon, ``positions[0]`` being the current gear."""

    positions: tuple[int, ...]

    @property
    def signals(self) -> tuple[int, ...]:
        p = self.positions
        return tuple(b - a for a, b in zip(p, p[1:]))

    @property
    def shift_count(self) -> int:
        return sum(abs(z) for z in self.signals)

    @property
    def horizon(self) -> int:
        return len(self.positions) - 1

    def is_admissible(self, eta_max: int, zeta_max: int) -> bool:
        return (
            all(1 <= g <= eta_max for g in self.positions)
            and all(z in SHIFT_SIGNALS for z in self.signals)
            and self.shift_count <= zeta_max
        )

    def shifted(self) -> GearSequence:
        """Drop the first position and repeat the last one."""
        p = self.positions
        return GearSequence(p[1:] + p[-1:])


def shift(pos: int, sig: int, table: GearTable) -> int:
    if sig not in SHIFT_SIGNALS:
        raise ValueError(f"gearshift signal must be one of {SHIFT_SIGNALS}")
    if not 1 <= pos <= table.eta_max:
        raise GearOutOfRange(f"gear {pos} outside 1..{table.eta_max}")
    nxt = pos + sig
    if not 1 <= nxt <= table.eta_max:
        raise GearOutOfRange(f"shift {sig:+d} from gear {pos} leaves 1..{table.eta_max}")
    return nxt


def _sort_key(signals: tuple[int, ...]):
    # canonical order: fewest/earliest shift events first, down before up
    return tuple((k, z) for k, z in enumerate(signals) if z != 0)


@functools.lru_cache(maxsize=None)
def _enumerate(start: int, n: int, zeta_max: int, eta_max: int) -> tuple[GearSequence, ...]:
    found: list[tuple[int, ...]] = []

    def extend(gear: int, budget: int, signals: tuple[int, ...]):
        if len(signals) == n:
            found.append(signals)
            return
        for z in SHIFT_SIGNALS:
            if z != 0 and budget == 0:
                continue
            nxt = gear + z
            if 1 <= nxt <= eta_max:
                extend(nxt, budget - abs(z), signals + (z,))

    extend(start, zeta_max, ())
    found.sort(key=_sort_key)
    out = []
    for sig in found:
        pos = [start]
        for z in sig:
            pos.append(pos[-1] + z)
        out.append(GearSequence(tuple(pos)))
    return tuple(out)


def enumerate_sequences(start: int, N: int, zeta_max: int, table: GearTable) -> list[GearSequence]:
    """All admissible gear sequences of length ``N + 1`` starting at ``start``."""
    if N < 1:
        raise ValueError("horizon N must be >= 1")
    if zeta_max < 0:
        raise ValueError("shift budget must be >= 0")
    if not 1 <= start <= table.eta_max:
        raise GearOutOfRange(f"gear {start} outside 1..{table.eta_max}")
    return list(_enumerate(start, N, zeta_max, table.eta_max))


def sequence_ratio_profile(seq: GearSequence, table: GearTable) -> list[float]:
    return [table.ratio(g) for g in seq.positions]


class SequenceCache:
    """Precomputed admissible sets for every start gear at fixed ``(N, zeta_max)``."""

    def __init__(self, N: int, zeta_max: int, table: GearTable):
        self.N = N
        self.zeta_max = zeta_max
        self.table = table
        self._sets = {
            g: tuple(enumerate_sequences(g, N, zeta_max, table))
            for g in range(1, table.eta_max + 1)
        }

    def __getitem__(self, start: int) -> tuple[GearSequence, ...]:
        return self._sets[start]

    def index(self, seq: GearSequence) -> int:
        return self._sets[seq.positions[0]].index(seq)

    def to_json(self) -> str:
        return json.dumps(
            {str(g): [list(s.positions) for s in seqs] for g, seqs in self._sets.items()},
            indent=1,
        )
