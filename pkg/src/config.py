"""
Configuration module for sdfrecon.

Two layers of configuration live here:

* ``Config`` - process-wide runtime settings read from environment variables,
  kept as a Singleton so every service sees the same worker cap and log level.
* ``TrainConfig`` - the experiment description (loss weights, schedules,
  network sizes, preprocessing and evaluation parameters), stored on disk as
  a flat ``key = value`` text file whose keys are exactly the field names.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

from errors import ConfigError


class Config:
    """
    Runtime configuration that encapsulates process-level settings.

    Uses Singleton pattern to ensure only one configuration instance exists.
    All configuration values are loaded from environment variables with sensible defaults.

    Attributes:
        threads (int): Worker cap for torch, OpenCV and per-view thread pools
        log_level (str): Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        show_progress (bool): Whether training shows a progress bar
    """

    _instance: Optional[Config] = None

    def __new__(cls):
        """Implement Singleton pattern."""
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        """Initialize configuration from environment variables."""
        if self._initialized:
            return

        self.threads = int(os.getenv('SDFRECON_THREADS', str(os.cpu_count() or 1)))
        self.log_level = os.getenv('LOG_LEVEL', 'INFO')
        self.show_progress = os.getenv('SDFRECON_PROGRESS', '1') not in ('0', 'false', 'no')

        self._initialized = True

    def validate(self) -> bool:
        """
        Validate configuration values.

        Returns:
            bool: True if configuration is valid, raises ValueError otherwise

        Raises:
            ValueError: If any configuration value is invalid
        """
        if self.threads <= 0:
            raise ValueError(f"SDFRECON_THREADS must be positive, got {self.threads}")

        if self.log_level.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f"LOG_LEVEL is not a logging level: {self.log_level}")

        return True

    def apply_thread_limits(self) -> None:
        """Cap torch and OpenCV worker threads at ``threads``."""
        import cv2
        import torch

        torch.set_num_threads(self.threads)
        cv2.setNumThreads(self.threads)

    def __str__(self) -> str:
        """String representation of configuration."""
        return (
            f"Config(threads={self.threads}, "
            f"log_level={self.log_level}, "
            f"show_progress={self.show_progress})"
        )


# Global configuration instance
config = Config()


@dataclass
class TrainConfig:
    """
    Experiment configuration for one reconstruction run.

    The defaults are the ``desk`` preset. Loss weights follow
    ``L = lambda_c*L_c + lambda_geo*L_geo + lambda_j*L_j + lambda_eik*L_eik``
    with ``lambda_geo`` and the matched-pixel fraction decaying linearly over the
    first ``schedule_fraction`` of the iterations and constant afterwards.
    """

    # loss weights and schedules
    lambda_c: float = 1.0
    lambda_geo_start: float = 1.0
    lambda_geo_end: float = 0.05
    lambda_j: float = 0.05
    lambda_eik: float = 0.1
    schedule_fraction: float = 0.5
    matched_fraction_start: float = 0.5
    matched_fraction_end: float = 0.1

    # optimisation
    iterations: int = 5000
    batch_rays: int = 512
    samples_per_ray: int = 64
    learning_rate: float = 5e-4
    seed: int = 0
    deterministic: bool = True
    checkpoint_interval: int = 1000
    log_interval: int = 100

    # eikonal sampling
    eikonal_uniform: int = 512
    eikonal_near_surface: int = 512
    eikonal_noise: float = 0.01

    # near/far policy: 'box' ends rays at the scene box padded by `scene_radius`, 'fixed' uses `far`
    near: float = 0.02
    far_policy: str = 'box'
    far: float = 0.0
    scene_radius: float = 1.0

    # networks
    geo_hidden_layers: int = 4
    geo_width: int = 64
    geo_skips: Tuple[int, ...] = (2,)
    feature_dim: int = 64
    geo_num_freqs: int = 6
    softplus_beta: float = 100.0
    weight_norm: bool = False
    color_hidden_layers: int = 2
    color_width: int = 64
    color_dir_freqs: int = 4
    color_pos_freqs: int = 0
    plane_hidden_layers: int = 2
    plane_width: int = 64
    plane_num_freqs: int = 4
    sphere_radius: float = 1.0
    sphere_inside_out: bool = True
    sphere_refine_steps: int = 200
    beta_init: float = 0.1
    density_literal: bool = False

    # geometry and plane constraints
    depth_source: str = 'sparse'
    max_gap_fraction: float = 0.005
    match_window: int = 2
    max_corners: int = 400
    nms_radius: int = 3
    floor_normal: Tuple[float, ...] = (0.0, 0.0, 1.0)
    seg_k: float = 500.0
    seg_min_size: int = 20
    seg_sigma: float = 0.8
    plane_min_fraction: float = 0.01
    plane_bce_full: bool = False

    # meshing and evaluation
    mesh_resolution: int = 128
    mesh_padding: float = 0.05
    metric_threshold: float = 0.05
    metric_samples: int = 20000

    _DEPTH_SOURCES = ('sparse', 'dense', 'none')
    _FAR_POLICIES = ('box', 'fixed')

    def validate(self) -> bool:
        """
        Validate configuration values.

        Raises:
            ConfigError: naming the first offending field
        """
        for name in ('lambda_c', 'lambda_geo_start', 'lambda_geo_end', 'lambda_j', 'lambda_eik'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ('iterations', 'batch_rays', 'checkpoint_interval', 'log_interval',
                     'geo_hidden_layers', 'geo_width', 'color_hidden_layers', 'color_width',
                     'plane_hidden_layers', 'plane_width', 'mesh_resolution', 'metric_samples'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ('schedule_fraction', 'matched_fraction_start', 'matched_fraction_end',
                     'max_gap_fraction'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if not 0.0 < self.plane_min_fraction < 1.0:
            raise ConfigError(f"plane_min_fraction must be in (0, 1), got {self.plane_min_fraction}")
        if self.samples_per_ray < 2:
            raise ConfigError(f"samples_per_ray must be >= 2, got {self.samples_per_ray}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.eikonal_uniform < 0 or self.eikonal_near_surface < 0:
            raise ConfigError("eikonal sample counts must be >= 0")
        if self.near < 0:
            raise ConfigError(f"near must be >= 0, got {self.near}")
        if self.mesh_padding < 0:
            raise ConfigError(f"mesh_padding must be >= 0, got {self.mesh_padding}")
        if self.scene_radius < 0:
            raise ConfigError(f"scene_radius must be >= 0, got {self.scene_radius}")
        if self.far_policy not in self._FAR_POLICIES:
            raise ConfigError(f"far_policy must be one of {self._FAR_POLICIES}, got {self.far_policy}")
        if self.far_policy == 'fixed' and self.far <= self.near:
            raise ConfigError(f"far must exceed near with far_policy=fixed, got {self.far}")
        if self.depth_source not in self._DEPTH_SOURCES:
            raise ConfigError(
                f"depth_source must be one of {self._DEPTH_SOURCES}, got {self.depth_source}"
            )
        if self.beta_init <= 0:
            raise ConfigError(f"beta_init must be > 0, got {self.beta_init}")
        if self.seg_k <= 0:
            raise ConfigError(f"seg_k must be > 0, got {self.seg_k}")
        if self.metric_threshold <= 0:
            raise ConfigError(f"metric_threshold must be > 0, got {self.metric_threshold}")
        if len(self.floor_normal) != 3 or sum(c * c for c in self.floor_normal) == 0:
            raise ConfigError(f"floor_normal must be a nonzero 3-vector, got {self.floor_normal}")
        if any(not 0 < s <= self.geo_hidden_layers for s in self.geo_skips):
            raise ConfigError(f"geo_skips must index hidden layers 1..{self.geo_hidden_layers}")
        return True

    def lambda_geo_at(self, iteration: int) -> float:
        """Geometry weight for ``iteration`` (linear decay, then constant)."""
        return self._linear_schedule(self.lambda_geo_start, self.lambda_geo_end, iteration)

    def matched_fraction_at(self, iteration: int) -> float:
        """Fraction of each batch drawn from pixels with a sparse depth."""
        return self._linear_schedule(
            self.matched_fraction_start, self.matched_fraction_end, iteration
        )

    def _linear_schedule(self, start: float, end: float, iteration: int) -> float:
        window = self.schedule_fraction * self.iterations
        if window <= 0 or iteration >= window:
            return end
        alpha = max(iteration, 0) / window
        return start + (end - start) * alpha

    def to_dict(self) -> Dict[str, Any]:
        """Plain dictionary of every field."""
        return dataclasses.asdict(self)

    def replace(self, **overrides: Any) -> TrainConfig:
        """Copy with ``overrides`` applied; unknown names raise ConfigError."""
        known = {f.name for f in dataclasses.fields(self)}
        for key in overrides:
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
        return dataclasses.replace(self, **overrides)

    def dumps(self) -> str:
        """Serialize to the flat ``key = value`` format."""
        lines = ['# sdfrecon training configuration']
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return '\n'.join(lines) + '\n'

    @classmethod
    def loads(cls, text: str, base: Optional[TrainConfig] = None, source: str = '<string>') -> TrainConfig:
        """
        Parse ``key = value`` text on top of ``base`` (defaults if omitted).

        Args:
            text: Config file contents; ``#`` starts a comment
            base: Configuration providing values for keys not present
            source: Name used in error messages

        Raises:
            ConfigError: On unknown keys, malformed lines or unparsable values
        """
        base = base if base is not None else cls()
        defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
        overrides: Dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{source} line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            if key not in defaults:
                raise ConfigError(f"{source} line {lineno}: unknown config key: {key}")
            try:
                overrides[key] = _parse_value(value, defaults[key], cls._tuple_kind(key))
            except ValueError as e:
                raise ConfigError(f"{source} line {lineno}: bad value for {key}: {e}") from e
        return dataclasses.replace(base, **overrides)

    @classmethod
    def load(cls, path: str, base: Optional[TrainConfig] = None) -> TrainConfig:
        """Read a config file; see ``loads``."""
        try:
            with open(path, 'r') as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        return cls.loads(text, base=base, source=path)

    def dump(self, path: str) -> None:
        """Write the config file."""
        with open(path, 'w') as f:
            f.write(self.dumps())

    @staticmethod
    def _tuple_kind(key: str) -> type:
        return int if key == 'geo_skips' else float

    def __str__(self) -> str:
        return (
            f"TrainConfig(iterations={self.iterations}, batch_rays={self.batch_rays}, "
            f"samples_per_ray={self.samples_per_ray}, lambda_c={self.lambda_c}, "
            f"lambda_geo={self.lambda_geo_start}->{self.lambda_geo_end}, "
            f"lambda_j={self.lambda_j}, lambda_eik={self.lambda_eik}, "
            f"depth_source={self.depth_source}, seed={self.seed})"
        )


PRESETS: Dict[str, Dict[str, Any]] = {
    'desk': {},
    'large': {
        'iterations': 50000,
        'batch_rays': 1024,
        'samples_per_ray': 128,
        'checkpoint_interval': 5000,
        'eikonal_uniform': 1024,
        'eikonal_near_surface': 1024,
        'geo_hidden_layers': 8,
        'geo_width': 256,
        'geo_skips': (4,),
        'feature_dim': 256,
        'color_hidden_layers': 4,
        'color_width': 256,
        'mesh_resolution': 256,
        'metric_samples': 100000,
    },
}


def preset(name: str) -> TrainConfig:
    """Return the named preset configuration."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return TrainConfig().replace(**PRESETS[name])


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ', '.join(_format_value(v) for v in value)
    return str(value)


def _parse_value(text: str, default: Any, tuple_kind: type = float) -> Any:
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ('true', '1', 'yes', 'on'):
            return True
        if lowered in ('false', '0', 'no', 'off'):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.replace(',', ' ').split()]
        return tuple(tuple_kind(p) for p in parts)
    return text
