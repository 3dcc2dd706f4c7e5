"""Drive-cycle files: parsing, resampling and conversion of public schedules."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bevshift.errors import EmptyCycle, ParseError

log = logging.getLogger(__name__)

MPH_TO_MS = 0.44704


@dataclass(frozen=True)
class DriveCycle:
    name: str
    times: np.ndarray
    speeds: np.ndarray
    clipped: int = 0  # negative samples clipped to zero while loading

    def __post_init__(self):
        if self.times.shape != self.speeds.shape:
            raise ValueError("times and speeds differ in length")
        if np.any(self.speeds < 0):
            raise ValueError("speeds must be >= 0")

    def __len__(self) -> int:
        return int(self.speeds.size)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else 1.0

    @property
    def distance(self) -> float:
        """Euler distance of the reference, consistent with the preview recursion."""
        return float(np.sum(self.speeds[:-1]) * self.dt)

    @classmethod
    def from_speeds(cls, name: str, speeds, dt: float = 1.0) -> DriveCycle:
        v = np.asarray(speeds, dtype=float)
        return cls(name, np.arange(v.size) * dt, v)


def _parse_rows(lines, source: str):
    reader = csv.reader(lines)
    header = None
    t, v = [], []
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        if header is None:
            header = [c.strip().lower() for c in row]
            if header[:2] != ["t", "v"]:
                raise ParseError(f"expected header 't,v' in {source}", lineno)
            continue
        if len(row) < 2:
            raise ParseError(f"expected two columns, got {len(row)}", lineno)
        try:
            ti, vi = float(row[0]), float(row[1])
        except ValueError as exc:
            raise ParseError(f"non-numeric value {row[:2]}", lineno) from exc
        if not (np.isfinite(ti) and np.isfinite(vi)):
            raise ParseError("non-finite value", lineno)
        if t and ti <= t[-1]:
            raise ParseError(f"time {ti} is not increasing", lineno)
        t.append(ti)
        v.append(vi)
    if header is None or not t:
        raise EmptyCycle(f"{source} has no data rows")
    return np.array(t), np.array(v)


def load_cycle(path, dt: float = 1.0, name: str | None = None) -> DriveCycle:
    """Read a ``t,v`` CSV (seconds, m/s) and resample it linearly onto a uniform grid.

    Raises:
        ParseError: malformed rows, with the offending line number.
        EmptyCycle: a header without data.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        t, v = _parse_rows(fh, str(path))
    neg = int(np.sum(v < 0))
    if neg:
        log.warning("%s: clipped %d negative speed samples", path.name, neg)
    v = np.maximum(v, 0.0)
    grid = t[0] + np.arange(int(np.floor((t[-1] - t[0]) / dt + 1e-9)) + 1) * dt
    vs = np.interp(grid, t, v)
    return DriveCycle(name or path.stem, grid - t[0], vs, neg)


def convert_epa_schedule(src, dst, skip_rows: int = 2) -> int:
    """Convert an EPA dynamometer schedule (seconds, mph; text table) to ``t,v`` CSV.

    Returns the number of rows written.
    """
    rows = []
    with Path(src).open() as fh:
        for i, line in enumerate(fh):
            if i < skip_rows:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) < 2:
                continue
            try:
                rows.append((float(parts[0]), float(parts[1]) * MPH_TO_MS))
            except ValueError:
                continue
    if not rows:
        raise EmptyCycle(f"{src} has no numeric rows")
    with Path(dst).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "v"])
        for t, v in rows:
            w.writerow([f"{t:g}", f"{v:.4f}"])
    return len(rows)


def default_cycles_dir() -> Path:
    return Path(__file__).parent / "data" / "cycles"
