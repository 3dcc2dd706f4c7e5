"""JSON configuration: one object per parameter group, defaults shipped as package data."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from bevshift.baselines import ShiftMap, SingleGearConfig
from bevshift.dp import DpSettings
from bevshift.errors import ConfigError
from bevshift.horizon import HorizonConfig
from bevshift.powertrain import BatteryParams, MotorParams, Powertrain, VehicleParams, map_from_config
from bevshift.sqp import SqpSettings
from bevshift.transmission import GearTable


def default_config_dict() -> dict:
    text = resources.files("bevshift").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad '{section}' section: {exc}") from exc


@dataclass(frozen=True)
class Setup:
    """Everything a strategy run needs, built from one config dictionary."""

    powertrain: Powertrain
    gears: GearTable
    horizon: HorizonConfig
    single_gear: SingleGearConfig
    shift_map: ShiftMap
    sqp: SqpSettings
    dp: DpSettings
    soc0: float = 0.8
    start_gear: int = 1
    # multiplier on the -SOC term of the co-optimization cost
    soc_scale: float = 1.0
    horizons: tuple[int, ...] = (8,)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def horizon_with(self, N: int) -> HorizonConfig:
        return dataclasses.replace(self.horizon, N=int(N))

    def with_sqp(self, **kw) -> Setup:
        return dataclasses.replace(self, sqp=dataclasses.replace(self.sqp, **kw))


def setup_from_dict(cfg: dict) -> Setup:
    try:
        veh = _build(VehicleParams, cfg["vehicle"], "vehicle")
        b = dict(cfg["battery"])
        b["v_oc_map"] = map_from_config(b["v_oc_map"])
        b["r_b_map"] = map_from_config(b["r_b_map"])
        batt = _build(BatteryParams, b, "battery")
        m = dict(cfg["motor"])
        m["eta_m_map"] = map_from_config(m["eta_m_map"])
        motor = _build(MotorParams, m, "motor")
        gears = GearTable(tuple(cfg["gears"]["ratios"]))
        sm = cfg["shift_map"]
        smap = ShiftMap(tuple(sm["torque_breakpoints"]), tuple(map(tuple, sm["upshift_speed"])),
                        tuple(map(tuple, sm["downshift_speed"])))
        if smap.n_gears != gears.eta_max:
            raise ConfigError("shift map needs one boundary between each pair of gears")
        sim = cfg.get("simulation", {})
        setup = Setup(
            powertrain=Powertrain(veh, batt, motor),
            gears=gears,
            horizon=_build(HorizonConfig, cfg["horizon"], "horizon"),
            single_gear=_build(SingleGearConfig, cfg["single_gear"], "single_gear"),
            shift_map=smap,
            sqp=_build(SqpSettings, cfg.get("sqp", {}), "sqp"),
            dp=_build(DpSettings, cfg.get("dp", {}), "dp"),
            soc0=float(sim.get("soc0", 0.8)),
            start_gear=int(sim.get("start_gear", 1)),
            soc_scale=float(cfg.get("objective", {}).get("soc_scale", 1.0)),
            horizons=tuple(int(n) for n in sim.get("horizons", (8,))),
            raw=cfg,
        )
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if not 1 <= setup.start_gear <= gears.eta_max:
        raise ConfigError("start gear outside the gear table")
    if not 0.0 <= setup.soc0 <= 1.0:
        raise ConfigError("soc0 must lie in [0, 1]")
    return setup


def load_setup(path=None, overrides: dict | None = None) -> Setup:
    """Defaults, optionally overlaid by a JSON file and then by ``overrides``."""
    cfg = default_config_dict()
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if overrides:
        cfg = _merge(cfg, overrides)
    return setup_from_dict(cfg)
