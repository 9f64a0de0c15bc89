"""
Pipeline configuration.

A dataclass tree with defaults for every field, loaded from JSON, then
overridden by environment variables (``.env`` is read with python-dotenv) and
finally by command-line flags. The effective config is hashed and stored in
the run manifest.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from errors import ConfigError
from placement import PlacementStrategy
from render_composite import SHADOW_MODES
from scene_io import config_hash

logger = logging.getLogger(__name__)


@dataclass
class PlacementConfig:
    strategy: str = PlacementStrategy.FUTURE_CAMERA.value
    allowed_classes: List[Any] = field(default_factory=lambda: ["road", "lane"])
    yaw_degrees: Optional[float] = None
    ground_offset: float = 0.0
    plane_stride: int = 4


@dataclass
class StabilizationConfig:
    enabled: bool = True
    anchors: int = 16
    anchor_radius: Optional[float] = None
    pyramid_levels: int = 3
    window: int = 15
    confidence_threshold: float = 0.05
    max_iterations: int = 100
    residual_threshold: float = 2.0
    flow_dir: Optional[str] = None


@dataclass
class LightingConfig:
    tau: float = 1.0
    beta: float = 0.05
    gamma: float = 2.2
    scale: float = 1.0
    sun_exponent: float = 8.0
    panorama_height: int = 64
    inpaint_command: Optional[str] = None
    sky_hdr_command: Optional[str] = None
    ldr_to_hdr_command: Optional[str] = None

    def plugins(self) -> Dict[str, Optional[str]]:
        return {"inpaint": self.inpaint_command, "sky_hdr": self.sky_hdr_command,
                "ldr_to_hdr": self.ldr_to_hdr_command}


@dataclass
class RenderConfig:
    samples: int = 64
    shadow_strength: float = 0.7
    softness_samples: int = 16
    light_radius_deg: float = 0.5
    seed: int = 0
    shadow_enabled: bool = True
    shadow_mode: str = "sun"
    sky_weight: float = 0.0
    supersample: int = 2
    debug_layers: bool = False


@dataclass
class StyleConfig:
    enabled: bool = True
    command: Optional[str] = None
    working_size: Optional[List[int]] = field(default_factory=lambda: [256, 256])
    timeout: float = 300.0
    max_parallel: int = 1


@dataclass
class PipelineConfig:
    scene: str = ""
    mesh: str = ""
    output_dir: str = "output"
    mesh_albedo: Optional[List[float]] = None
    jobs: Optional[int] = None
    tmp_dir: Optional[str] = None
    min_frames: Optional[int] = None
    require_motion: bool = False
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    stabilization: StabilizationConfig = field(default_factory=StabilizationConfig)
    lighting: LightingConfig = field(default_factory=LightingConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    style: StyleConfig = field(default_factory=StyleConfig)

    # --- construction ------------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        config = cls()
        _update(config, data, "")
        return config

    @classmethod
    def from_file(cls, path: Path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def apply_env(self, dotenv_path: Optional[Path] = None) -> "PipelineConfig":
        """INSERT_PLUGIN_TIMEOUT, INSERT_TMPDIR and INSERT_MAX_PLUGIN_JOBS override the file."""
        load_dotenv(dotenv_path)
        timeout = os.getenv("INSERT_PLUGIN_TIMEOUT")
        if timeout:
            self.style.timeout = _number(timeout, "INSERT_PLUGIN_TIMEOUT", float)
        tmp_dir = os.getenv("INSERT_TMPDIR")
        if tmp_dir:
            self.tmp_dir = tmp_dir
        max_jobs = os.getenv("INSERT_MAX_PLUGIN_JOBS")
        if max_jobs:
            self.style.max_parallel = _number(max_jobs, "INSERT_MAX_PLUGIN_JOBS", int)
        return self

    def apply_overrides(self, overrides: Dict[str, Any]) -> "PipelineConfig":
        """Dotted keys ("render.seed") or top-level names; ``None`` values are skipped."""
        for key, value in overrides.items():
            if value is None:
                continue
            target: Any = self
            parts = key.split(".")
            for part in parts[:-1]:
                target = getattr(target, part)
            if not hasattr(target, parts[-1]):
                raise ConfigError(f"Unknown config key '{key}'")
            setattr(target, parts[-1], value)
        return self

    # --- validation ----------------------------------------------------------------------

    def validate(self, check_paths: bool = True) -> "PipelineConfig":
        problems: List[str] = []
        if check_paths:
            if not self.scene or not Path(self.scene).is_file():
                problems.append(f"scene manifest not found: '{self.scene}'")
            if not self.mesh or not Path(self.mesh).is_file():
                problems.append(f"mesh not found: '{self.mesh}'")
            if self.stabilization.flow_dir and not Path(self.stabilization.flow_dir).is_dir():
                problems.append(f"flow directory not found: '{self.stabilization.flow_dir}'")
        try:
            PlacementStrategy(self.placement.strategy)
        except ValueError:
            problems.append(f"placement.strategy must be one of {[s.value for s in PlacementStrategy]}")
        if self.placement.plane_stride < 1:
            problems.append("placement.plane_stride must be >= 1")
        s = self.stabilization
        if s.anchors < 4:
            problems.append("stabilization.anchors must be >= 4")
        if s.pyramid_levels < 1 or s.window < 3 or s.max_iterations < 1:
            problems.append("stabilization pyramid_levels/window/max_iterations out of range")
        if not 0.0 <= s.confidence_threshold <= 1.0:
            problems.append("stabilization.confidence_threshold must lie in [0, 1]")
        if s.residual_threshold <= 0:
            problems.append("stabilization.residual_threshold must be positive")
        l = self.lighting
        if l.tau <= 0 or l.beta <= 0:
            problems.append("lighting.tau and lighting.beta must be positive")
        if l.gamma <= 0 or l.scale <= 0 or l.sun_exponent <= 0:
            problems.append("lighting.gamma, scale and sun_exponent must be positive")
        if l.panorama_height < 4:
            problems.append("lighting.panorama_height must be >= 4")
        r = self.render
        if r.samples < 1 or r.softness_samples < 1 or r.supersample < 1:
            problems.append("render.samples, softness_samples and supersample must be >= 1")
        if not 0.0 <= r.shadow_strength <= 1.0:
            problems.append("render.shadow_strength must lie in [0, 1]")
        if not 0.0 <= r.light_radius_deg < 90.0:
            problems.append("render.light_radius_deg must lie in [0, 90)")
        if r.shadow_mode not in SHADOW_MODES:
            problems.append(f"render.shadow_mode must be one of {SHADOW_MODES}")
        if r.sky_weight < 0:
            problems.append("render.sky_weight must be >= 0")
        st = self.style
        if st.timeout <= 0 or st.max_parallel < 1:
            problems.append("style.timeout must be positive and style.max_parallel >= 1")
        if st.working_size is not None and (len(st.working_size) != 2 or min(st.working_size) < 1):
            problems.append("style.working_size must be [width, height] or null")
        if self.jobs is not None and self.jobs < 1:
            problems.append("jobs must be >= 1")
        if self.min_frames is not None and self.min_frames < 2:
            problems.append("min_frames must be >= 2")
        if problems:
            raise ConfigError("Invalid configuration: " + "; ".join(problems))
        return self

    # --- serialization ----------------------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _number(value: str, name: str, kind):
    try:
        return kind(value)
    except ValueError as e:
        raise ConfigError(f"{name}={value!r} is not a valid {kind.__name__}") from e


def _update(target: Any, data: Dict[str, Any], prefix: str) -> None:
    known = {f.name: f for f in fields(target)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"Unknown config key '{prefix}{key}'")
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"Config section '{prefix}{key}' must be an object")
            _update(current, value, f"{prefix}{key}.")
        else:
            setattr(target, key, value)


def configure_logging(verbose: bool = False) -> None:
    """Root logging setup shared by the entry points; INSERT_LOG_LEVEL wins over ``verbose``."""
    load_dotenv()
    level_name = os.getenv("INSERT_LOG_LEVEL", "DEBUG" if verbose else "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s')
    logging.getLogger().setLevel(level)
