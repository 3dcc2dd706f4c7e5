"""Grid-search the hysteresis shift map on the calibration cycle.

The single-gear speed optimization has no energy term, so its speed and
wheel-torque plan does not depend on the gear. Each candidate map is scored
by replaying that plan through the map's gear choices and integrating the
battery model, which takes milliseconds instead of a closed-loop run. The
best map is then checked with a full closed-loop run.

Usage:
    python3 scripts/tune_shift_map.py [--cycle FILE] [--verify] [--write]
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
from importlib import resources
from pathlib import Path

import numpy as np

from bevshift.baselines import ShiftMap, _fits_envelope, run_sequential, shift_map_select
from bevshift.config import default_config_dict, load_setup
from bevshift.cycles import load_cycle
from bevshift.powertrain import battery_power, soc_rate

TORQUE_BREAKPOINTS = (0.0, 1500.0)


def candidates():
    """Maps over low-demand upshift speeds, torque slopes and a shared hysteresis."""
    for up1, up2, slope, hyst in itertools.product(
        np.arange(4.0, 15.0, 1.0), np.arange(10.0, 25.0, 1.0), (0.0, 2.0, 4.0, 6.0), (0.5, 1.0, 2.0, 3.0)
    ):
        if up2 <= up1 + 2.0:
            continue
        up = ((up1, up1 + slope), (up2, up2 + slope))
        down = tuple((a - hyst, b - hyst) for a, b in up)
        yield ShiftMap(TORQUE_BREAKPOINTS, up, down)


def replay(v, t_w, smap: ShiftMap, setup) -> np.ndarray:
    """Gear used at each step when the map drives the recorded plan."""
    pt, table = setup.powertrain, setup.gears
    i_0 = pt.vehicle.i_0
    gear = 1
    while gear < smap.n_gears and v[0] > smap.up(gear - 1, 0.0):
        gear += 1
    out = np.empty(len(t_w), dtype=int)
    for k in range(len(t_w)):
        cand = shift_map_select(v[k], t_w[k], gear, smap)
        if cand != gear and _fits_envelope(v[k], t_w[k], table.ratio(cand) * i_0, pt):
            gear = cand
        out[k] = gear
    return out


def soc_used(v, t_w, gears: np.ndarray, setup) -> np.ndarray:
    """SOC consumption [%] for each row of ``gears`` (candidates x steps)."""
    pt = setup.powertrain
    ratios = np.asarray(setup.gears.ratios)[gears - 1] * pt.vehicle.i_0
    soc = np.full(gears.shape[0], setup.soc0)
    for k in range(gears.shape[1]):
        R = ratios[:, k]
        w = v[k] / pt.vehicle.r_w * R
        p_b = battery_power(t_w[k] / R, w, pt.motor, pt.battery)
        soc = soc + soc_rate(p_b, soc, pt.battery, strict=False) * pt.vehicle.dt
    return 100.0 * (setup.soc0 - soc)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    cal = resources.files("bevshift").joinpath("data/calibration/calibration.csv")
    parser.add_argument("--cycle", type=Path, default=Path(str(cal)))
    parser.add_argument("--verify", action="store_true", help="closed-loop run of the best map")
    parser.add_argument("--write", type=Path, help="write the best map into this config JSON")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR)

    setup = load_setup()
    cycle = load_cycle(args.cycle)
    plan = run_sequential(cycle, setup, "single")
    v = np.asarray(plan.v[:-1])
    t_w = np.asarray(plan.t_w)
    maps = list(candidates())
    gears = np.stack([replay(v, t_w, m, setup) for m in maps])
    score = soc_used(v, t_w, gears, setup)
    order = np.argsort(score, kind="stable")
    print(f"{len(maps)} candidate maps on {cycle.name}; single gear replays at "
          f"{soc_used(v, t_w, np.full((1, len(t_w)), 2), setup)[0]:.4f} % in gear 2")
    for i in order[:5]:
        m = maps[i]
        print(f"  {score[i]:.4f} %  up {m.upshift_speed}  down {m.downshift_speed}")
    best = maps[order[0]]
    entry = {
        "upshift_speed": [list(r) for r in best.upshift_speed],
        "downshift_speed": [list(r) for r in best.downshift_speed],
        "torque_breakpoints": list(best.torque_breakpoints),
    }
    print(json.dumps({"shift_map": entry}))
    if args.verify:
        tuned = run_sequential(cycle, setup, "map", smap=best)
        print(f"closed loop with the best map: {tuned.soc_consumption_pct:.4f} %, "
              f"single gear {plan.soc_consumption_pct:.4f} %")
    if args.write:
        cfg = json.loads(args.write.read_text()) if args.write.exists() else default_config_dict()
        cfg["shift_map"] = entry
        args.write.write_text(json.dumps(cfg, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
