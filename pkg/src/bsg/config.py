"""Scenario configuration: JSON in laboratory units, validated and converted once.

Units in the file: GHz (frequencies and energies as E/h), fF, nH, Ohm, mK.
Unknown keys are rejected at every level.
"""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import circuit


class ConfigError(ValueError):
    """Invalid or unreadable configuration; maps to CLI exit code 2."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DeviceConfig(_Strict):
    n_junctions: int = Field(4250, ge=1)
    inductance_nH: float = Field(0.54, gt=0)
    capacitance_fF: float = Field(144.0, gt=0)
    ground_capacitance_fF: float = Field(0.15, gt=0)
    ej_zero_GHz: float = Field(27.5, ge=0)
    asymmetry: float = Field(0.02, ge=0, lt=1)
    junction_capacitance_fF: float = Field(14.5, gt=0)
    feedline_ohm: float = Field(50.0, gt=0)
    feedline_reactance_ohm: float = 0.0
    loss_floor: float = Field(3e-6, ge=0, description="series resistance per inductor in units of Z_c")

    def build(self) -> circuit.DeviceParams:
        array = circuit.ArrayParams(self.n_junctions, self.inductance_nH * 1e-9, self.capacitance_fF * 1e-15,
                                    self.ground_capacitance_fF * 1e-15)
        array = circuit.ArrayParams(array.n_junctions, array.inductance, array.capacitance,
                                    array.ground_capacitance, self.loss_floor * array.characteristic_impedance)
        squid = circuit.SquidParams(float(circuit.ghz_energy(self.ej_zero_GHz)), self.asymmetry,
                                    self.junction_capacitance_fF * 1e-15)
        return circuit.DeviceParams(array, squid, self.feedline_ohm, self.feedline_reactance_ohm)


class GridConfig(_Strict):
    n_points: int = Field(2 ** 18, ge=8)
    cutoff_factor: float = Field(4.2, ge=4.0)

    @field_validator("n_points")
    @classmethod
    def _pow2(cls, v):
        if v & (v - 1):
            raise ValueError("n_points must be a power of two")
        return v


class SweepConfig(_Strict):
    flux: list[float] = Field(default_factory=lambda: [0.5])
    temperature_mK: float = Field(30.0, ge=0)
    band_GHz: tuple[float, float] = (2.5, 11.0)
    points: int = Field(200001, ge=16)
    grid: GridConfig = GridConfig()

    @field_validator("flux")
    @classmethod
    def _flux(cls, v):
        if len(v) == 0:
            raise ValueError("flux list must not be empty")
        return v

    @field_validator("band_GHz")
    @classmethod
    def _band(cls, v):
        if not 0 < v[0] < v[1]:
            raise ValueError("band must satisfy 0 < f_min < f_max")
        return v


class SolverConfig(_Strict):
    tol: float = Field(1e-6, gt=0, lt=1)
    max_iter: int = Field(200, ge=1)
    mixing: float = Field(0.3, gt=0, le=1)
    cutoff_fraction: float = Field(0.05, gt=0)
    scha_tol: float = Field(1e-6, gt=0, le=1e-2)


class LossConfig(_Strict):
    tan_delta_ref: float = Field(3.4e-4, ge=0)
    exponent: float = 0.5
    junction_tan_delta: float = Field(5e-2, ge=0)
    x_qp: float = Field(1e-3, ge=0, lt=1)
    gap_ueV: float = Field(210.0, gt=0)
    flux_noise: float = Field(1e-6, ge=0, description="A_Phi in units of the flux quantum")


class FitConfig(_Strict):
    traces: list[str] = Field(default_factory=list)
    prominence: float = Field(0.05, gt=0, lt=1)


class OutputConfig(_Strict):
    dir: str = "bsg_out"
    json_mirror: bool = False


class ScenarioConfig(_Strict):
    device: DeviceConfig = DeviceConfig()
    sweep: SweepConfig = SweepConfig()
    model: Literal["linear-scha", "self-energy"] = "linear-scha"
    solver: SolverConfig = SolverConfig()
    losses: LossConfig = LossConfig()
    fit: FitConfig = FitConfig()
    noise: float = Field(0.0, ge=0)
    outputs: OutputConfig = OutputConfig()
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        return self

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _line_of(text: str, loc) -> int | None:
    """Best-effort line number of the innermost key named in ``loc``."""
    keys = [k for k in loc if isinstance(k, str)]
    pos = 0
    line = None
    for k in keys:
        m = re.compile(r'"%s"\s*:' % re.escape(k)).search(text, pos)
        if not m:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def parse_config(text: str, source="<config>") -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}:{err.lineno}:{err.colno}: invalid JSON: {err.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be an object")
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as err:
        msgs = []
        for e in err.errors():
            loc = ".".join(str(x) for x in e["loc"]) or "<root>"
            line = _line_of(text, e["loc"])
            where = f"{source}:{line}" if line else source
            msgs.append(f"{where}: {loc}: {e['msg']}")
        raise ConfigError("\n".join(msgs)) from None


def load_config(path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config: {err.strerror}") from None
    return parse_config(text, str(path))


def json_schema() -> dict:
    return ScenarioConfig.model_json_schema()
