"""Regenerate the shipped synthetic drive cycles (deterministic)."""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np


def _ramp(v0: float, v1: float, accel: float, dt: float = 1.0) -> list[float]:
    """Speed samples from v0 to v1 with a sinusoidal acceleration pulse of peak ``accel``."""
    dv = v1 - v0
    if dv == 0:
        return []
    # mean of a half-sine pulse is 2/pi of its peak
    dur = max(2, int(np.ceil(abs(dv) / (accel * 2 / np.pi) / dt)))
    tau = np.arange(1, dur + 1) / dur
    return list(v0 + dv * (tau - np.sin(2 * np.pi * tau) / (2 * np.pi)))


def _build(events, rng) -> np.ndarray:
    v = [0.0]
    for kind, *args in events:
        if kind == "hold":
            n, = args
            wobble = rng.normal(0.0, 0.15, n) if v[-1] > 0 else np.zeros(n)
            # low-pass the wobble so cruise segments look like real driving
            wobble = np.convolve(wobble, np.ones(5) / 5, mode="same")
            v.extend(list(np.maximum(v[-1] + wobble, 0.0)))
            v[-1] = v[-n - 1] if n else v[-1]
        else:
            target, accel = args
            v.extend(_ramp(v[-1], target, accel))
    return np.maximum(np.array(v), 0.0)


def urban(seed: int = 7) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ev = [("hold", 8)]
    for cruise, dur, stop in [(9, 25, 10), (13, 30, 15), (7, 15, 8), (15, 35, 12), (11, 20, 20),
                              (8, 18, 9), (14, 30, 14), (10, 22, 10)]:
        ev += [("ramp", cruise, 1.1), ("hold", dur), ("ramp", 0.0, 1.0), ("hold", stop)]
    return _build(ev, rng)


def highway(seed: int = 11) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ev = [("hold", 5), ("ramp", 14, 1.1), ("hold", 20), ("ramp", 22, 0.7), ("hold", 60),
          ("ramp", 18, 0.5), ("hold", 40), ("ramp", 25, 0.6), ("hold", 80), ("ramp", 20, 0.5),
          ("hold", 50), ("ramp", 24, 0.5), ("hold", 40), ("ramp", 10, 0.8), ("hold", 15),
          ("ramp", 0.0, 1.0), ("hold", 10)]
    return _build(ev, rng)


def calibration(seed: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ev = [("hold", 5)]
    for cruise, dur, stop in [(12, 30, 10), (20, 40, 12), (8, 20, 8), (17, 35, 10), (24, 30, 10)]:
        ev += [("ramp", cruise, 1.0), ("hold", dur), ("ramp", 0.0, 1.0), ("hold", stop)]
    return _build(ev, rng)


def write(path: Path, v: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "v"])
        for i, x in enumerate(v):
            w.writerow([i, f"{x:.4f}"])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    root = Path(__file__).resolve().parents[1] / "src" / "bevshift" / "data"
    ap.add_argument("--out", type=Path, default=root)
    args = ap.parse_args()
    (args.out / "cycles").mkdir(parents=True, exist_ok=True)
    (args.out / "calibration").mkdir(parents=True, exist_ok=True)
    write(args.out / "cycles" / "urban.csv", urban())
    write(args.out / "cycles" / "highway.csv", highway())
    write(args.out / "calibration" / "calibration.csv", calibration())


if __name__ == "__main__":
    main()
