"""World configuration schema (YAML on disk, validated with pydantic)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .controller import Boxes, ControllerParams

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Configuration failed schema validation; the message names the offending key."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StrikeSpec(_Strict):
    count: int = Field(41, ge=2)
    moneyness_low: float = Field(0.7, gt=0)
    moneyness_high: float = Field(1.3, gt=0)

    @model_validator(mode="after")
    def _band(self):
        if not self.moneyness_low < 1.0 < self.moneyness_high:
            raise ValueError("moneyness band must bracket 1")
        return self


class SsviSpec(_Strict):
    atm_vols: list[float] = [0.165, 0.17, 0.175, 0.18, 0.185, 0.19]
    rho: float = Field(-0.7, gt=-1, lt=1)
    phi: float = Field(2.0, ge=0)


class TeacherSpec(_Strict):
    fd_step_h: float = Field(0.01, gt=0)
    vol_floor: float = Field(1e-4, gt=0)


class VixSpec(_Strict):
    days: tuple[float, float] = (14.0, 60.0)
    half_spread: float = Field(0.0, ge=0)
    variance_floor: float = Field(1e-6, gt=0)


class LocalVolSpec(_Strict):
    chi_floor: float = Field(1e-7, gt=0)
    time_coordinate: Literal["sqrt", "linear"] = "sqrt"
    # maturity nodes of the price tensor fed to the extractor; empty means the surface maturities
    maturities_days: list[float] = [7, 14, 21, 28, 35, 42, 49, 56, 63, 70, 77, 84, 91]


class CirSpec(_Strict):
    kappa: float = Field(5.0, gt=0)
    theta: float = Field(0.0306, gt=0)
    xi: float = Field(0.5, ge=0)
    rho: float = Field(-0.6, ge=-1, le=1)
    v0: float = Field(0.0306, gt=0)


class SimSpec(_Strict):
    steps_per_year: int = Field(252, ge=1)
    horizon_days: float = Field(60.0, gt=0)
    n_paths: int = Field(300, ge=1)
    n_seeds: int = Field(8, ge=1)
    base_seed: int = Field(1000, ge=0)


class HedgeSpec(_Strict):
    strike_moneyness: float = Field(1.0, gt=0)
    vix_multiplier: float = Field(1000.0, gt=0)
    impact_cash_scale: float = Field(100.0, ge=0)
    kappa_grid_days: list[float] = [1, 2, 4, 8, 12, 16, 20, 25, 30, 35, 40, 45, 50, 55, 60]


class KappaSpec(_Strict):
    eps: float = Field(1e-3, gt=0)
    masses: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kernel: tuple[float, ...] = (0.25, 0.5, 0.25)
    mu: float = Field(1.0, ge=0)
    T0_days: float = Field(60.0, gt=0)
    level: Literal["variance", "vix"] = "variance"


class BoxSpec(_Strict):
    err_s: float = 1.0
    err_v: float = 1.0
    inv_s: float = 1.5
    inv_v: float = 4.0
    rate_s: float = 0.25
    rate_v: float = 0.5
    cvar_s: float = 0.2
    cvar_v: float = 0.5


class ControllerSpec(_Strict):
    alpha_delta: float = 1.0
    alpha_v: float = 1.0
    alpha_cross: float | None = None
    eta_s: float = 0.05
    eta_v: float = 0.05
    gamma_smooth: float = 0.01
    w_vix_base: float = 1.0
    lambda_rho: float = 1.5
    band_radii: tuple[float, float] = (0.05, 0.1)
    guards: tuple[float, float, float] = (0.5, 0.25, 0.3)
    gate: tuple[float, float] = (0.6, 0.4)
    lambda_c: float = 0.5
    boxes: BoxSpec = BoxSpec()
    rho_soft: float = 10.0
    thresholds: tuple[float, float] = (0.01, 0.02)
    cooldown_steps: int = 3
    ewma_lambda: float = 0.94
    cbf_alpha: tuple[float, float] = (0.5, 0.5)
    cbf_sigma: tuple[float, float] = (0.0, 0.0)

    def to_params(self, T0: float) -> ControllerParams:
        d = self.model_dump()
        d["boxes"] = Boxes(**d["boxes"])
        return ControllerParams(T0=T0, **d)


class BootstrapSpec(_Strict):
    alpha: float = Field(0.975, gt=0, lt=1)
    resamples: int = Field(500, ge=100)
    paired_resamples: int = Field(2000, ge=100)
    seed: int = Field(7, ge=0)


class GridSpec(_Strict):
    xi_values: list[float] = [0.40, 0.45, 0.50]
    rho_values: list[float] = [-0.6, -0.5, -0.4]
    seeds_per_cell: int = Field(4, ge=1)
    paths_per_seed: int = Field(220, ge=1)

    @field_validator("xi_values", "rho_values")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("scenario axes must be nonempty")
        return v


class WorldConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    spot: float = Field(4800.0, gt=0)
    rate: float = 0.02
    div: float = 0.015
    maturities_days: list[float] = [7, 14, 30, 60, 90, 180]
    strikes: StrikeSpec = StrikeSpec()
    ssvi: SsviSpec = SsviSpec()
    teacher: TeacherSpec = TeacherSpec()
    vix: VixSpec = VixSpec()
    localvol: LocalVolSpec = LocalVolSpec()
    cir: CirSpec = CirSpec()
    sim: SimSpec = SimSpec()
    hedge: HedgeSpec = HedgeSpec()
    kappa: KappaSpec = KappaSpec()
    controller: ControllerSpec = ControllerSpec()
    bootstrap: BootstrapSpec = BootstrapSpec()
    grid: GridSpec = GridSpec()

    @model_validator(mode="after")
    def _consistency(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if len(self.ssvi.atm_vols) != len(self.maturities_days):
            raise ValueError("ssvi.atm_vols needs one entry per maturity")
        if any(b <= a for a, b in zip(self.maturities_days, self.maturities_days[1:])):
            raise ValueError("maturities_days must be strictly increasing")
        return self

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **sections) -> "WorldConfig":
        """Deep-merge dotted overrides such as {"cir": {"xi": 0.4}}."""
        data = self.model_dump(mode="python")
        for key, val in sections.items():
            if isinstance(val, dict):
                data[key] = {**data[key], **val}
            else:
                data[key] = val
        return WorldConfig.model_validate(data)


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: dict | None) -> WorldConfig:
    try:
        return WorldConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def load_config(path: str | Path | None) -> WorldConfig:
    if path is None:
        return WorldConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(yaml.safe_load(fh))


def dump_config(cfg: WorldConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
