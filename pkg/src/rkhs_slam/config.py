"""Run configuration: one TOML ``[section]`` per module, unknown keys rejected."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import TUM_INTRINSICS, CameraIntrinsics
from .frontend import FrontendConfig
from .loop_closure import LoopClosureConfig
from .pose_graph import RobustKernelConfig
from .registration import RegistrationConfig

MODES = ("odometry", "slam")


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class DatasetConfig:
    path: str = ""
    intrinsics: str = "fr1"
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    depth_scale: float = 5000.0
    width: int = 640
    height: int = 480
    association_tolerance: float = 0.02
    points_per_frame: int = 3000

    def camera(self) -> CameraIntrinsics:
        if self.intrinsics == "custom":
            return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.depth_scale, self.width, self.height)
        if self.intrinsics not in TUM_INTRINSICS:
            raise ConfigError(f"unknown intrinsics {self.intrinsics!r}; use fr1, fr2, fr3 or custom")
        return replace(TUM_INTRINSICS[self.intrinsics], depth_scale=self.depth_scale)


@dataclass(frozen=True)
class FrontendSection:
    t_thres: float = 0.15
    theta_thres_deg: float = 30.0
    gamma_thres: float = 0.7

    def build(self) -> FrontendConfig:
        return FrontendConfig(self.t_thres, float(np.deg2rad(self.theta_thres_deg)), self.gamma_thres)


@dataclass(frozen=True)
class LoopClosureSection:
    eta_thres: float = 0.3
    ratio: float = 0.7
    min_matches: int = 5
    ransac_iterations: int = 500
    inlier_threshold: float = 0.05
    early_exit_ratio: float = 0.8
    n_features: int = 1000
    vocabulary: str = ""
    vocabulary_stride: int = 10

    def build(self) -> LoopClosureConfig:
        return LoopClosureConfig(self.eta_thres, self.ratio, self.min_matches, self.ransac_iterations,
                                 self.inlier_threshold, self.early_exit_ratio, self.n_features)


@dataclass(frozen=True)
class PoseGraphSection:
    delta: float = 2.0
    term_tol: float = 1e-6
    max_iter_local: int = 50
    max_iter_global: int = 100

    def robust(self) -> RobustKernelConfig:
        return RobustKernelConfig(self.delta)


@dataclass(frozen=True)
class RunSection:
    mode: str = "slam"
    output: str = "output"
    seed: int = 0
    max_frames: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    loop_closure: LoopClosureSection = field(default_factory=LoopClosureSection)
    pose_graph: PoseGraphSection = field(default_factory=PoseGraphSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        try:
            self.validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def validate(self):
        if self.run.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.run.mode!r}")
        if self.run.max_frames < 0:
            raise ConfigError("run.max_frames must be >= 0 (0 = all frames)")
        for name in ("association_tolerance", "points_per_frame", "depth_scale"):
            if not getattr(self.dataset, name) > 0:
                raise ConfigError(f"dataset.{name} must be positive")
        for name in ("term_tol", "max_iter_local", "max_iter_global"):
            if not getattr(self.pose_graph, name) > 0:
                raise ConfigError(f"pose_graph.{name} must be positive")
        if self.loop_closure.vocabulary_stride < 1:
            raise ConfigError("loop_closure.vocabulary_stride must be >= 1")
        self.dataset.camera()
        self.frontend.build()
        self.loop_closure.build()
        self.pose_graph.robust()

    def with_overrides(self, **sections) -> RunConfig:
        """Copy with ``section={key: value}`` overrides applied."""
        updated = {}
        for name, values in sections.items():
            if values:
                updated[name] = replace(getattr(self, name), **values)
        return replace(self, **updated)

    def to_dict(self):
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "registration": RegistrationConfig,
    "frontend": FrontendSection,
    "loop_closure": LoopClosureSection,
    "pose_graph": PoseGraphSection,
    "run": RunSection,
}


def _coerce(section, key, value, default):
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"[{section}] {key}: booleans are not accepted here")
    if isinstance(default, int) and not isinstance(value, int):
        raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"[{section}] {key}: expected a string, got {value!r}")
    return value


def config_from_dict(data: dict, source="<config>") -> RunConfig:
    sections = {}
    for name, values in data.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"{source}: unknown section [{name}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: [{name}] must be a table")
        cls = _SECTION_TYPES[name]
        defaults = asdict(cls())
        unknown = sorted(set(values) - set(defaults))
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) in [{name}]: {', '.join(unknown)}")
        try:
            sections[name] = cls(**{k: _coerce(name, k, v, defaults[k]) for k, v in values.items()})
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    try:
        return RunConfig(**sections)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, str(path))


def default_config_text() -> str:
    return resources.files("rkhs_slam").joinpath("data/default.toml").read_text()
