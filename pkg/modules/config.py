"""
Run configuration: nested dataclasses loaded from JSON, `section.key=value`
overrides, validation and a stable config hash.
"""

import dataclasses
import hashlib
import json
import math
import os
import typing
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from .errors import ConfigError
from .planner import PlannerConfig

OUTPUT_DIR_ENV = "RENDERABILITY_OUTPUT_DIR"


@dataclass
class SceneConfig:
    preset: str = "box_room"
    seed: int = 0
    # scene file written by a previous run; overrides the preset
    path: Optional[str] = None


@dataclass
class PlannerSection:
    mode: str = "pinhole"
    lambda1: float = 1.0
    lambda2: float = 0.1
    candidate_count: int = 16
    candidate_radius: float = 1.5
    directions_per_position: int = 8
    probe_resolution: int = 128
    half_angle_deg: float = 39.2


@dataclass
class LatticeConfig:
    n_bins: int = 64
    pano_theta_deg: float = 10.0


@dataclass
class CameraConfig:
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0


@dataclass
class BudgetConfig:
    max_views: int = 20
    max_seconds: Optional[float] = None
    capture_every: int = 0


@dataclass
class MapConfig:
    voxel_size: float = 0.05
    cell_size: float = 0.2
    max_range: float = 4.0
    workers: int = 1


@dataclass
class EvalConfig:
    grid_step: int = 3
    prefixes: List[int] = field(default_factory=list)


@dataclass
class BenchConfig:
    voxel_counts: List[int] = field(default_factory=lambda: [1000, 10000, 100000])
    keyframe_counts: List[int] = field(default_factory=lambda: [10, 50, 100, 500])
    keyframe_voxels: int = 2000
    repeats: int = 5
    workers: int = 1


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    planner: PlannerSection = field(default_factory=PlannerSection)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    map: MapConfig = field(default_factory=MapConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def planner_config(self) -> PlannerConfig:
        p = self.planner
        return PlannerConfig(
            lambda1=p.lambda1,
            lambda2=p.lambda2,
            candidate_count=p.candidate_count,
            candidate_radius=p.candidate_radius,
            mode=p.mode,
            half_angle=math.radians(p.half_angle_deg),
            fov=math.radians(self.camera.fov_deg),
            max_range=self.map.max_range,
            directions_per_position=p.directions_per_position,
            probe_resolution=p.probe_resolution,
            rng_seed=self.seed,
        )


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value: Any, tp, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a section object, got {value!r}")
        return _build(tp, value, where)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Dict[str, Any], where: str = "config"):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {name: _coerce(value, hints[name], f"{where}.{name}") for name, value in data.items()}
    return cls(**kwargs)


def parse_override(text: str) -> tuple:
    """'a.b=value' -> (['a', 'b'], value); the value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    merged = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node = merged
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
        node[path[-1]] = value
    return merged


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = _build(RunConfig, apply_overrides(data, overrides))
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        cfg.output_dir = env_dir
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.lattice.n_bins >= 4, "lattice.n_bins must be >= 4"),
        (0.0 < cfg.lattice.pano_theta_deg < 180.0, "lattice.pano_theta_deg must lie in (0, 180)"),
        (cfg.camera.width >= 1 and cfg.camera.height >= 1, "camera size must be positive"),
        (0.0 < cfg.camera.fov_deg < 180.0, "camera.fov_deg must lie in (0, 180)"),
        (cfg.budget.max_views >= 1, "budget.max_views must be >= 1"),
        (cfg.budget.max_seconds is None or cfg.budget.max_seconds > 0, "budget.max_seconds must be positive"),
        (cfg.budget.capture_every >= 0, "budget.capture_every must be >= 0"),
        (cfg.map.voxel_size > 0 and cfg.map.cell_size > 0 and cfg.map.max_range > 0,
         "map sizes and max_range must be positive"),
        (cfg.map.workers >= 1 and cfg.bench.workers >= 1, "workers must be >= 1"),
        (0.0 < cfg.planner.half_angle_deg <= 90.0, "planner.half_angle_deg must lie in (0, 90]"),
        (cfg.eval.grid_step >= 1, "eval.grid_step must be >= 1"),
        (all(p >= 1 for p in cfg.eval.prefixes), "eval.prefixes must be positive"),
        (all(n >= 1 for n in cfg.bench.voxel_counts + cfg.bench.keyframe_counts), "bench sizes must be positive"),
        (cfg.bench.keyframe_voxels >= 1 and cfg.bench.repeats >= 1, "bench.keyframe_voxels and repeats must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    try:
        cfg.planner_config().validate()
    except ValueError as exc:
        raise ConfigError(f"planner: {exc}") from None


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """First 12 hex digits of SHA-256 over the canonical JSON; output_dir excluded."""
    data = to_dict(cfg)
    data.pop("output_dir", None)
    payload = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:12]
