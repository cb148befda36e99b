"""Pipeline configuration: nested dataclasses loaded from YAML and validated."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .embedding import TrainConfig
from .evaluation import SplitSpec
from .reasoner import ReasonerConfig
from .synthetic import SyntheticSpec
from .temporal_features import FEATURE_DIM, TREND_GAPS
from .time_clustering import GmmConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    interactions: Optional[str] = None
    kg: Optional[str] = None
    reviews: Optional[str] = None
    name: str = "synthetic"


@dataclass
class SynthConfig:
    n_users: int = 200
    n_items: int = 100
    horizon_days: int = 730
    base_rate: float = 0.05
    in_season: float = 4.0
    off_season: float = 0.25
    user_focus: float = 3.0


@dataclass
class FeatureConfig:
    dim: int = FEATURE_DIM
    gaps: list = field(default_factory=lambda: list(TREND_GAPS))


@dataclass
class ClusterConfig:
    l_min: int = 2
    l_max: int = 32
    max_iter: int = 200
    tol: float = 1e-6
    variance_floor: float = 1e-6
    n_init: int = 1
    fixed_l: Optional[int] = None  # skip BIC selection and use this many clusters


@dataclass
class EmbedConfig:
    d: int = 100
    learning_rate: float = 0.01
    batch_size: int = 256
    epochs: int = 50
    negatives_per_positive: int = 1
    max_grad_norm: float = 10.0
    bias_aux_weight: float = 1.0


@dataclass
class PolicySection:
    epsilon: int = 250
    max_steps: int = 3
    history_hops: int = 1
    gamma: float = 0.99
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    hidden: int = 256
    state_dim: int = 256
    dropout: float = 0.5
    encoder: str = "lstm"
    dtype: str = "float32"
    reward_mode: str = "personalized"


@dataclass
class RecommendConfig:
    beam: list = field(default_factory=lambda: [25, 5, 1])
    top_k: int = 10


@dataclass
class SplitConfig:
    mode: str = "normal"
    train_frac: float = 0.7
    valid_frac_of_train: float = 0.1
    sequential: list = field(default_factory=lambda: [0.6, 0.1, 0.3])
    min_interactions: int = 5


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    embedding: EmbedConfig = field(default_factory=EmbedConfig)
    policy: PolicySection = field(default_factory=PolicySection)
    recommend: RecommendConfig = field(default_factory=RecommendConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    output: str = "out"
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.features.dim != FEATURE_DIM:
            raise ConfigError(f"features.dim must be {FEATURE_DIM}")
        if not self.features.gaps or any(int(g) < 1 for g in self.features.gaps):
            raise ConfigError("features.gaps must be positive day counts")
        if len(self.features.gaps) != 4:
            raise ConfigError("features.gaps needs four gaps (the structural block is 9 wide)")
        if not 1 <= self.cluster.l_min <= self.cluster.l_max:
            raise ConfigError("need 1 <= cluster.l_min <= cluster.l_max")
        if self.cluster.fixed_l is not None and self.cluster.fixed_l < 1:
            raise ConfigError("cluster.fixed_l must be positive")
        if self.embedding.d < 1 or self.embedding.epochs < 0 or self.embedding.batch_size < 1:
            raise ConfigError("embedding sizes must be positive")
        if len(self.recommend.beam) != self.policy.max_steps:
            raise ConfigError(f"recommend.beam needs {self.policy.max_steps} widths, one per hop")
        if self.recommend.top_k < 1:
            raise ConfigError("recommend.top_k must be at least 1")
        if not 0 < self.policy.gamma <= 1:
            raise ConfigError("policy.gamma must be in (0, 1]")
        if self.policy.reward_mode not in ("personalized", "average"):
            raise ConfigError("policy.reward_mode must be 'personalized' or 'average'")
        if self.policy.dtype not in ("float32", "float64"):
            raise ConfigError("policy.dtype must be float32 or float64")
        if (self.data.kg or self.data.reviews) and not self.data.interactions:
            raise ConfigError("data.kg/data.reviews given without data.interactions")
        try:
            self.split_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # -- views for the modules --

    def gmm_config(self, seed: int) -> GmmConfig:
        c = self.cluster
        return GmmConfig(max_iter=c.max_iter, tol=c.tol, seed=seed, variance_floor=c.variance_floor, n_init=c.n_init)

    def embed_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **dataclasses.asdict(self.embedding))

    def reasoner_config(self, seed: int) -> ReasonerConfig:
        return ReasonerConfig(beam=tuple(self.recommend.beam), seed=seed, **dataclasses.asdict(self.policy))

    def split_spec(self) -> SplitSpec:
        s = self.split
        return SplitSpec(
            mode=s.mode,
            train_frac=s.train_frac,
            valid_frac_of_train=s.valid_frac_of_train,
            sequential=tuple(s.sequential),
            seed=self.seed,
            min_interactions=s.min_interactions,
        )

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(seed=seed, **dataclasses.asdict(self.synthetic))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else known[name].default
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, path)
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{path} must be a list")
            kwargs[name] = value
        elif isinstance(default, bool) or default is None or isinstance(default, str):
            kwargs[name] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path} must be a number, got {value!r}")
            if isinstance(default, int) and not isinstance(default, bool) and not float(value).is_integer():
                raise ConfigError(f"{path} must be an integer, got {value!r}")
            kwargs[name] = type(default)(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> PipelineConfig:
    return _build(PipelineConfig, doc or {}, "").validate()


def load_config(path) -> PipelineConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(doc or {})
    base = Path(path).parent
    for key in ("interactions", "kg", "reviews"):
        value = getattr(cfg.data, key)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, key, str(base / value))
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
