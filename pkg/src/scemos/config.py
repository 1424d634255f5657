"""Experiment configuration: JSON-serializable, hashed into every checkpoint."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .planner import PlannerConfig
from .refiner import RefinerConfig
from .tokenizer import TokenizerConfig


@dataclass
class DataConfig:
    n_scenes: tuple = (20, 4, 8)  # train / val / test scene counts
    tasks_per_scene: int = 4
    seed: int = 0
    window: int = 80
    stride: int = 40

    def __post_init__(self):
        self.n_scenes = tuple(int(n) for n in self.n_scenes)
        if len(self.n_scenes) != 3 or min(self.n_scenes) < 1:
            raise ValueError("n_scenes must be three positive counts")


@dataclass
class TrainSettings:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50


@dataclass
class GenerateDefaults:
    cycles: int = 3
    guidance_scale: float = 2.0
    mode: str = "greedy"
    seed: int = 0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    tokenizer_train: TrainSettings = field(default_factory=TrainSettings)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    planner_train: TrainSettings = field(default_factory=TrainSettings)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    refiner_train: TrainSettings = field(default_factory=TrainSettings)
    feature_seed: int = 0
    use_refiner: bool = True
    # refiner training corruption: per-frame root drift noise, meters
    corruption_sigma: float = 0.01

    def __post_init__(self):
        if self.tokenizer.K != self.planner.K:
            raise ValueError("tokenizer and planner must agree on K")
        if self.planner.max_tokens != self.tokenizer.n_tokens:
            raise ValueError("planner max_tokens must equal tokenizer n_tokens")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def desk_config():
    """Small profile sized for a single CPU: minutes per model, not hours."""
    return ExperimentConfig(
        data=DataConfig(n_scenes=(160, 12, 16), tasks_per_scene=5, seed=0, stride=80),
        tokenizer=TokenizerConfig(
            K=128, D_z=64, channels=128, heightmap_feature_dim=32, heightmap_g=16
        ),
        tokenizer_train=TrainSettings(steps=12_000, batch_size=16, lr=6e-4),
        planner=PlannerConfig(K=128, layers=4, heads=4, hidden=128, max_tokens=20, dropout=0.1),
        planner_train=TrainSettings(steps=6000, batch_size=32, lr=3e-4, weight_decay=0.01),
        refiner=RefinerConfig(hidden=128),
        refiner_train=TrainSettings(steps=4000, batch_size=16, lr=5e-4),
    )


def paper_config():
    """Full-size profile mirroring the published training recipe; not the
    tested path on desk hardware."""
    return ExperimentConfig(
        data=DataConfig(n_scenes=(60, 10, 20), tasks_per_scene=5),
        tokenizer=TokenizerConfig(),
        tokenizer_train=TrainSettings(steps=10_000, batch_size=32, lr=1e-5),
        planner=PlannerConfig(),
        planner_train=TrainSettings(steps=10_000, batch_size=32, lr=1e-5),
        refiner=RefinerConfig(),
        refiner_train=TrainSettings(steps=3_000, batch_size=32, lr=1e-5),
    )


_PROFILES = {"desk": desk_config, "paper": paper_config}


def _merge(base, overrides, path="config"):
    for key, value in overrides.items():
        if not hasattr(base, key):
            raise KeyError(f"unknown field {path}.{key}")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge(current, value, f"{path}.{key}")
        else:
            setattr(base, key, type_coerce(current, value))
    return base


def type_coerce(current, value):
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def config_from_dict(data):
    """Build a config from a dict: optional "profile" plus field overrides."""
    data = dict(data)
    profile = data.pop("profile", "desk")
    if profile not in _PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(_PROFILES)}")
    cfg = _PROFILES[profile]()
    _merge(cfg, data)
    # re-run field validation after overrides
    for sub in (cfg.data, cfg.tokenizer, cfg.planner):
        sub.__post_init__()
    cfg.__post_init__()
    return cfg


def load_config(path):
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(cfg.to_json())
