from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict

from config import settings

DURATION_MODELS = ("truncated-normal", "fixed-mean")
BACKGROUND_MODES = ("fold", "drop")


def _from_known_keys(cls, data: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    return cls(**{key: value for key, value in data.items() if key in known})


@dataclass(frozen=True)
class TrackerConfig:
    frame_length: float = settings.FRAME_LENGTH_S
    self_transition_floor: float = settings.SELF_TRANSITION_FLOOR
    emission_smoothing: float = settings.EMISSION_SMOOTHING
    detection_window: float = settings.DETECTION_WINDOW_S
    detection_smooth: float = settings.DETECTION_SMOOTH_S
    background: str = "fold"

    def __post_init__(self):
        if self.frame_length <= 0:
            raise ValueError("frame_length must be positive")
        if not 0.0 <= self.emission_smoothing < 0.5:
            raise ValueError("emission_smoothing must lie in [0, 0.5)")
        if not 0.0 <= self.self_transition_floor < 1.0:
            raise ValueError("self_transition_floor must lie in [0, 1)")
        if self.detection_window <= 0 or self.detection_smooth <= 0:
            raise ValueError("detection windows must be positive")
        if self.background not in BACKGROUND_MODES:
            raise ValueError(f"background must be one of {BACKGROUND_MODES}")

    @property
    def window_frames(self) -> int:
        return max(1, int(round(self.detection_window / self.frame_length)))

    @property
    def smooth_frames(self) -> int:
        return max(1, int(round(self.detection_smooth / self.frame_length)))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrackerConfig':
        return _from_known_keys(cls, data)


@dataclass(frozen=True)
class ForecastConfig:
    n_samples: int = settings.N_SAMPLES
    bin_width: float = settings.BIN_WIDTH_S
    duration_model: str = "truncated-normal"
    min_duration: float = settings.FRAME_LENGTH_S
    seed: int = 0
    max_paths: int = settings.MAX_PATHS
    chunk_size: int = settings.SAMPLE_CHUNK
    workers: int = settings.FORECAST_WORKERS

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.min_duration <= 0:
            raise ValueError("min_duration must be positive")
        if self.duration_model not in DURATION_MODELS:
            raise ValueError(f"duration_model must be one of {DURATION_MODELS}")
        if self.max_paths < 1 or self.chunk_size < 1 or self.workers < 1:
            raise ValueError("max_paths, chunk_size and workers must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ForecastConfig':
        return _from_known_keys(cls, data)


@dataclass(frozen=True)
class PolicyConfig:
    stability_horizon: float = settings.STABILITY_HORIZON_S
    stability_tolerance: float = settings.STABILITY_TOLERANCE_S
    entropy_smooth: float = settings.ENTROPY_SMOOTH_S
    tick: float = settings.FRAME_LENGTH_S

    def __post_init__(self):
        for name in ("stability_horizon", "stability_tolerance", "entropy_smooth", "tick"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PolicyConfig':
        return _from_known_keys(cls, data)


@dataclass(frozen=True)
class GraphBuildConfig:
    min_edge_count: int = settings.MIN_EDGE_COUNT
    edge_smoothing: float = settings.EDGE_SMOOTHING

    def __post_init__(self):
        if self.min_edge_count < 1:
            raise ValueError("min_edge_count must be at least 1")
        if self.edge_smoothing < 0:
            raise ValueError("edge_smoothing must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GraphBuildConfig':
        return _from_known_keys(cls, data)


@dataclass(frozen=True)
class EngineConfig:
    """Bundle of everything a session engine needs besides the graph and the specs."""
    name: str
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def with_seed(self, seed: int) -> 'EngineConfig':
        return replace(self, forecast=replace(self.forecast, seed=seed))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "tracker": self.tracker.to_dict(),
            "forecast": self.forecast.to_dict(),
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EngineConfig':
        return cls(
            name=data.get("name", "custom"),
            tracker=TrackerConfig.from_dict(data.get("tracker", {})),
            forecast=ForecastConfig.from_dict(data.get("forecast", {})),
            policy=PolicyConfig.from_dict(data.get("policy", {})),
        )


LAPTOP_ENGINE_CONFIG = EngineConfig("laptop")
WATCH_ENGINE_CONFIG = EngineConfig("watch", policy=PolicyConfig(tick=3.0))
EVALUATION_ENGINE_CONFIG = EngineConfig(
    "evaluation",
    forecast=ForecastConfig(n_samples=1_000),
    policy=PolicyConfig(tick=1.0),
)


ENGINE_PRESETS = {
    "laptop": LAPTOP_ENGINE_CONFIG,
    "watch": WATCH_ENGINE_CONFIG,
    "evaluation": EVALUATION_ENGINE_CONFIG,
}


def get_engine_config(preset: str) -> EngineConfig:
    """Get the engine configuration for a named preset."""
    try:
        return ENGINE_PRESETS[preset]
    except KeyError:
        raise ValueError(f"Unknown preset '{preset}', expected one of {sorted(ENGINE_PRESETS)}") from None
