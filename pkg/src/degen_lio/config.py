"""Run and campaign configuration (TOML), strict about unknown keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .iekf import FUSION_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    scenario: str = "corridor"  # corridor | room
    length: float = 40.0
    width: float = 4.0
    height: float = 3.0
    end_caps: bool = False
    duration: float = 21.0
    speed: float = 1.0
    start: tuple = (-10.0, 0.0, 1.0)
    t_still: float = 1.5
    ramp: float = 2.0
    sway_pos: float = 0.1
    sway_att_deg: float = 5.0
    lidar_sigma: float = 0.05
    imu_noise_on: bool = True  # False: noiseless IMU stream, filter keeps its densities
    distort: bool = True
    bias_gyro_std: float = 1e-3
    bias_acc_std: float = 1e-2
    odom_rate: float = 50.0
    odom_noise_rot: float = 1e-4
    odom_noise_pos: float = 0.05
    odom_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in ("corridor", "room"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")


@dataclass(frozen=True)
class RigConfig:
    n_beams: int = 16
    fov_deg: float = 15.0
    h_res_deg: float = 1.0
    lidar_rate: float = 10.0
    max_range: float = 20.0
    min_range: float = 0.3
    drop_prob: float = 0.0
    imu_rate: float = 200.0
    lidar_pos: tuple = (0.1, 0.0, 0.2)
    lidar_rpy_deg: tuple = (0.0, 0.0, 2.0)
    odom_pos: tuple = (-0.15, 0.0, -0.3)
    odom_rpy_deg: tuple = (0.0, 0.0, -3.0)


@dataclass(frozen=True)
class ImuNoiseConfig:
    sigma_g: float = 2e-3
    sigma_a: float = 2e-2
    sigma_wg: float = 2e-5
    sigma_wa: float = 3e-4


@dataclass(frozen=True)
class FilterConfig:
    fusion_mode: str = "degeneration_gated"
    init_mode: str = "stationary"  # stationary | truth
    init_window: float = 1.0
    max_iter: int = 4
    step_tol: float = 1e-6
    joseph: bool = False
    freeze_extrinsics: bool = True
    threshold_rot: float = 1.0e3
    threshold_trans: float = 8.0e3
    knn: int = 10
    plane_tol: float = 0.1
    plane_tol_sigmas: float = 3.0
    corr_gate: float = 1.0
    max_neighbor_dist: float = 1.0
    map_resolution: float = 0.25
    rebuild_threshold: int = 4096
    scan_voxel: float = 0.5
    lidar_noise_std: float = 0.0  # 0 -> use the sigma stored with each scan
    p0_rot: float = 1e-4
    p0_pos: float = 1e-4
    p0_vel: float = 1e-2
    p0_bias_g: float = 1e-4
    p0_bias_a: float = 1e-4
    p0_grav: float = 1e-4
    p0_ext: float = 1e-6
    odom_sigma_rot_deg: float = 0.02
    odom_sigma_pos_per_m: float = 0.025
    odom_sigma_pos_floor: float = 0.002
    odom_extrap_tol: float = 0.02

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.init_mode not in ("stationary", "truth"):
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")


@dataclass(frozen=True)
class RunConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    imu_noise: ImuNoiseConfig = field(default_factory=ImuNoiseConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)

    def with_changes(self, **sections) -> "RunConfig":
        """``cfg.with_changes(filter={"fusion_mode": "lidar_only"})``."""
        out = {}
        for name, changes in sections.items():
            out[name] = _build(type(getattr(self, name)), {**_plain(getattr(self, name)), **changes}, name)
        return dataclasses.replace(self, **out)


@dataclass(frozen=True)
class CampaignSpec:
    sigmas: tuple = (0.03, 0.05, 0.07, 0.09)
    runs: int = 20
    modes: tuple = ("degeneration_gated", "lidar_only")
    seed: int = 0
    workers: int = 1
    save_datasets: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        for m in self.modes:
            if m not in FUSION_MODES:
                raise ConfigError(f"unknown fusion mode {m!r}")


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{where}] {key} must be a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not float(value).is_integer():
                raise ConfigError(f"[{where}] {key} must be an integer")
            value = int(value)
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{where}] {key} must be a number")
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


SECTIONS = {
    "simulation": SimulationConfig,
    "rig": RigConfig,
    "imu_noise": ImuNoiseConfig,
    "filter": FilterConfig,
}


def run_config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return RunConfig(**{name: _build(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()})


def campaign_from_dict(data: dict) -> tuple[CampaignSpec, RunConfig]:
    data = dict(data)
    spec = _build(CampaignSpec, data.pop("campaign", {}), "campaign")
    return spec, run_config_from_dict(data)


def load_run_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return run_config_from_dict(tomli.load(fh))


def load_campaign(path) -> tuple[CampaignSpec, RunConfig]:
    with open(path, "rb") as fh:
        return campaign_from_dict(tomli.load(fh))


def to_dict(cfg) -> dict:
    return _plain(cfg)


def dump_toml(data, path) -> None:
    if dataclasses.is_dataclass(data):
        data = to_dict(data)
    Path(path).write_text(tomli_w.dumps(data))


def campaign_to_dict(spec: CampaignSpec, base: RunConfig) -> dict:
    return {"campaign": to_dict(spec), **to_dict(base)}
