"""Matplotlib figures for closed-loop traces (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from bevshift.cycles import DriveCycle  # noqa: E402
from bevshift.trace import SimulationTrace  # noqa: E402


def _time(trace: SimulationTrace, controls: bool = False) -> np.ndarray:
    n = trace.steps if controls else len(trace.v)
    return np.arange(n) * trace.dt


def plot_cycle(cycle: DriveCycle, traces: dict[str, SimulationTrace], setup, out_dir) -> list[Path]:
    """Write one PNG per quantity for a cycle; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    cfg = setup.horizon

    fig, ax = plt.subplots(figsize=(10, 4))
    band = cfg.band(cycle.speeds)
    ax.fill_between(cycle.times, cycle.speeds - band, cycle.speeds + band, color="0.85", label="speed band")
    ax.plot(cycle.times, cycle.speeds, "k--", lw=1, label="reference")
    for name, tr in traces.items():
        ax.plot(_time(tr), tr.v, lw=1, label=name)
    ax.set(xlabel="time [s]", ylabel="speed [m/s]", title=f"{cycle.name}: speed")
    ax.legend(fontsize=7, ncol=3)
    written.append(_save(fig, out / f"speed_{cycle.name}.png"))

    fig, ax = plt.subplots(figsize=(10, 4))
    for name, tr in traces.items():
        ax.plot(_time(tr), 100.0 * np.asarray(tr.soc), lw=1, label=name)
    ax.set(xlabel="time [s]", ylabel="SOC [%]", title=f"{cycle.name}: state of charge")
    ax.legend(fontsize=7)
    written.append(_save(fig, out / f"soc_{cycle.name}.png"))

    fig, ax = plt.subplots(figsize=(10, 4))
    for name, tr in traces.items():
        if tr.steps:
            ax.plot(_time(tr, True), tr.t_m, lw=1, label=name)
    ax.set(xlabel="time [s]", ylabel="motor torque [N m]", title=f"{cycle.name}: motor torque")
    ax.legend(fontsize=7)
    written.append(_save(fig, out / f"torque_{cycle.name}.png"))

    geared = {k: t for k, t in traces.items() if any(t.gear)}
    if geared:
        fig, ax = plt.subplots(figsize=(10, 3))
        for name, tr in geared.items():
            ax.step(_time(tr), tr.gear, where="post", lw=1, label=name)
        ax.set(xlabel="time [s]", ylabel="gear", title=f"{cycle.name}: gear position")
        ax.legend(fontsize=7)
        written.append(_save(fig, out / f"gear_{cycle.name}.png"))

    relaxed = {k: t for k, t in traces.items() if np.isfinite(np.asarray(t.max_p, float)).any()}
    if relaxed:
        fig, ax = plt.subplots(figsize=(10, 3))
        for name, tr in relaxed.items():
            ax.plot(_time(tr, True), tr.max_p, ".", ms=2, label=name)
        ax.axhline(0.95, color="k", lw=0.8, ls=":")
        ax.set(xlabel="time [s]", ylabel="max p", ylim=(0, 1.05), title=f"{cycle.name}: largest mode weight")
        ax.legend(fontsize=7)
        written.append(_save(fig, out / f"maxp_{cycle.name}.png"))

    solved = {k: t for k, t in traces.items() if any(t.solve_time)}
    if solved:
        fig, ax = plt.subplots(figsize=(10, 3))
        for name, tr in solved.items():
            ax.semilogy(_time(tr, True), np.maximum(tr.solve_time, 1e-6), lw=0.8, label=name)
        ax.set(xlabel="time [s]", ylabel="solve time [s]", title=f"{cycle.name}: per-step solve time")
        ax.legend(fontsize=7)
        written.append(_save(fig, out / f"solve_time_{cycle.name}.png"))
    return written


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
