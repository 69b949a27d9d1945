"""Run configuration: YAML documents, presets, overrides and environment settings."""

import copy
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from continual_learner import Objective, PrototypeMode, TrainConfig
from episodes import (
    ClassPool,
    Regime,
    load_pool,
    make_multi_domain_pools,
    make_synthetic_pool,
    pool_statistics,
    split_pool,
)
from eval_harness import EvalConfig
from target_cnn import Arch
from weight_generator import GeneratorConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a run document is invalid; the message names the key path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    """Where class pools come from."""
    source: Literal["synthetic", "multi_domain_synthetic", "directory"] = "synthetic"
    root: Optional[str] = None  # directory source: pool dir, or parent of the domain dirs
    domains: List[str] = Field(default_factory=list)
    format: Literal["png", "npy"] = "png"
    image_size: Tuple[int, int, int] = (28, 28, 1)
    normalize: Literal["none", "pool", "auto"] = "auto"
    num_classes: int = Field(40, ge=1)
    samples_per_class: int = Field(20, ge=2)
    num_domains: int = Field(2, ge=1)
    family: Literal["blob", "stripe", "checker", "ring"] = "blob"
    noise: float = Field(0.1, ge=0.0)
    split_ratio: float = Field(0.8, gt=0.0, lt=1.0)
    seed: int = 0


class ArchSection(_Section):
    num_blocks: int = 4
    channels: int = 8
    embed_dim: int = 20
    final_channels: Optional[int] = None
    dense_bias: bool = True


class GeneratorSection(_Section):
    feat_channels: int = 32
    act_channels: int = 16
    num_layers: int = 3
    num_heads: int = 2
    model_dim: int = 64
    ff_dim: int = 128
    label_embed_dim: int = 16
    weight_slice_dim: int = 0
    max_way: int = 128
    seed: int = 0


class TrainSection(_Section):
    T: int = 2
    K: int = 5
    N: int = 1
    N_query: int = 5
    learning_rate: float = 1e-4
    lr_decay_steps: int = 100_000
    lr_decay_rate: float = 0.97
    total_steps: int = 1000
    objective: Objective = Objective.CLASS_INCREMENTAL
    prototype_mode: PrototypeMode = PrototypeMode.FROZEN
    regime: Regime = Regime.SINGLE_DOMAIN
    episodes_per_step: int = 1
    final_task_only: bool = False
    divergence_threshold: float = 1e4
    checkpoint_every: int = 0
    eval_every: int = 0
    log_every: int = 100
    seed: int = 0


class EvalSection(_Section):
    T_test: Optional[int] = None  # defaults to train.T
    N_query: Optional[int] = None  # defaults to train.N_query
    episodes: int = 1024
    runs_per_episode: int = 16
    hook_episodes: int = 16  # episodes per periodic training-time evaluation
    workers: int = 4
    seed: int = 1


class BaselinesSection(_Section):
    constpn_steps: Optional[int] = None  # defaults to train.total_steps


class RunSection(_Section):
    name: str = "default"
    dir: Optional[str] = None  # defaults to $CHT_RUN_DIR/<name>


class RunConfig(_Section):
    """The complete, reproducible description of a run."""
    data: DataSection = Field(default_factory=DataSection)
    arch: ArchSection = Field(default_factory=ArchSection)
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    baselines: BaselinesSection = Field(default_factory=BaselinesSection)
    run: RunSection = Field(default_factory=RunSection)

    def to_arch(self) -> Arch:
        return Arch(input_shape=tuple(self.data.image_size), **self.arch.model_dump())

    def to_generator(self) -> GeneratorConfig:
        return GeneratorConfig(**self.generator.model_dump(exclude={"seed"}))

    def to_train(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump())

    def to_eval(self, T_test: Optional[int] = None, seed: Optional[int] = None) -> EvalConfig:
        return EvalConfig(
            T_test=T_test or self.eval.T_test or self.train.T,
            K=self.train.K,
            N=self.train.N,
            N_query=self.eval.N_query or self.train.N_query,
            episodes=self.eval.episodes,
            runs_per_episode=self.eval.runs_per_episode,
            regime=self.train.regime,
            prototype_mode=self.train.prototype_mode,
            workers=self.eval.workers,
            seed=self.eval.seed if seed is None else seed,
        )

    def document(self) -> Dict[str, Any]:
        """Plain nested dict suitable for the config.yaml snapshot."""
        return self.model_dump(mode="json")

    def validate_runtime(self, check_paths: bool = True) -> None:
        """Build every dataclass config and check paths before a run starts.

        Raises:
            ConfigError: On an invalid value or a missing data path
        """
        try:
            self.to_arch().validate()
            self.to_generator().validate()
            self.to_train().validate()
            self.to_eval().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if check_paths and self.data.source == "directory":
            if not self.data.root:
                raise ConfigError("data.root is required for the directory source")
            root = Path(self.data.root)
            for path in [root / d for d in self.data.domains] or [root]:
                if not path.is_dir():
                    raise ConfigError(f"data.root: directory not found: {path}")


_DESK_GENERATOR = {
    "feat_channels": 16, "act_channels": 8, "num_layers": 1, "num_heads": 2,
    "model_dim": 32, "ff_dim": 64, "label_embed_dim": 8, "max_way": 64,
}
_OMNIGLOT_GENERATOR = {"num_layers": 3, "num_heads": 2}

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk_synthetic": {
        "data": {"source": "synthetic", "image_size": [16, 16, 1], "num_classes": 40, "samples_per_class": 20},
        "arch": {"num_blocks": 3, "channels": 8, "embed_dim": 16},
        "generator": _DESK_GENERATOR,
        "train": {"T": 2, "K": 5, "N": 1, "N_query": 5, "learning_rate": 1e-4, "total_steps": 2000,
                  "log_every": 100, "checkpoint_every": 500},
        "eval": {"episodes": 64, "runs_per_episode": 4},
        "run": {"name": "desk_synthetic"},
    },
    "tiered_t5": {
        "data": {"source": "directory", "root": "data/tiered_imagenet", "image_size": [84, 84, 3], "normalize": "pool"},
        "arch": {"num_blocks": 4, "channels": 64, "embed_dim": 40},
        "generator": {"num_layers": 1, "num_heads": 8},
        "train": {"T": 5, "K": 5, "N": 5, "learning_rate": 5e-6, "total_steps": 4_000_000},
        "run": {"name": "tiered_t5"},
    },
    "multidomain_t2": {
        "data": {"source": "multi_domain_synthetic", "num_domains": 4},
        "arch": {"channels": 16, "final_channels": 32, "embed_dim": 20},
        "generator": _OMNIGLOT_GENERATOR,
        "train": {"T": 2, "K": 5, "N": 1, "regime": "multi_domain", "learning_rate": 1e-4},
        "run": {"name": "multidomain_t2"},
    },
}
for _T in (2, 3, 4, 5):
    PRESETS[f"omniglot_t{_T}"] = {
        "data": {"source": "directory", "root": "data/omniglot", "image_size": [28, 28, 1], "normalize": "pool"},
        "arch": {"num_blocks": 4, "channels": 8, "embed_dim": 20},
        "generator": _OMNIGLOT_GENERATOR,
        "train": {"T": _T, "K": 20, "N": 1, "learning_rate": 5e-5 if _T == 5 else 1e-4, "total_steps": 4_000_000},
        "run": {"name": f"omniglot_t{_T}"},
    }


def load_document(source: str) -> Dict[str, Any]:
    """Read a YAML file, or a preset when no such file exists."""
    path = Path(source)
    if path.is_file():
        document = yaml.safe_load(path.read_text()) or {}
        if not isinstance(document, dict):
            raise ConfigError(f"{path} must hold a mapping at the top level")
        return document
    if source in PRESETS:
        return copy.deepcopy(PRESETS[source])
    raise ConfigError(f"No config file or preset named {source!r} (presets: {', '.join(sorted(PRESETS))})")


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``a.b=c`` overrides; values are parsed as YAML scalars."""
    document = copy.deepcopy(document)
    for override in overrides:
        key, sep, raw = override.partition("=")
        if not sep or not key:
            raise ConfigError(f"Override must look like a.b=value, got {override!r}")
        parts = key.strip().split(".")
        node = document
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {part} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return document


def _error_message(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    return f"{location}: {first['msg']}"


def load_run_config(
    source: Optional[str] = None,
    overrides: Sequence[str] = (),
    check_paths: bool = True,
) -> RunConfig:
    """Resolve a run document from a file or preset plus overrides.

    Args:
        source: YAML path or preset name; defaults only when omitted
        overrides: ``a.b=c`` strings
        check_paths: Require data directories to exist

    Returns:
        Validated run config
    """
    document = load_document(source) if source else {}
    document = apply_overrides(document, overrides)
    try:
        config = RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(_error_message(e)) from e
    config.validate_runtime(check_paths)
    return config


@dataclass
class RunSettings:
    """Settings from the environment."""

    run_root: str = "runs"
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "RunSettings":
        """Load settings from environment variables."""
        return cls(
            run_root=os.getenv("CHT_RUN_DIR", "runs"),
            log_level=os.getenv("LOG_LEVEL", "INFO"),
        )

    def run_dir(self, config: RunConfig) -> Path:
        return Path(config.run.dir) if config.run.dir else Path(self.run_root) / config.run.name


def _normalize(data: DataSection, loaded: bool) -> bool:
    if data.normalize == "auto":
        return loaded
    return data.normalize == "pool"


def build_pools(data: DataSection) -> Tuple[List[ClassPool], List[ClassPool]]:
    """Class-disjoint train and test pools for the configured source."""
    if data.source == "synthetic":
        pools = [make_synthetic_pool(
            data.num_classes, data.samples_per_class, tuple(data.image_size),
            seed=data.seed, family=data.family, noise=data.noise,
        )]
    elif data.source == "multi_domain_synthetic":
        pools = make_multi_domain_pools(
            data.num_domains, data.num_classes, data.samples_per_class, tuple(data.image_size), seed=data.seed,
        )
    else:
        root = Path(data.root)
        roots = [root / domain for domain in data.domains] or [root]
        pools = [
            load_pool(path, fmt=data.format, image_size=tuple(data.image_size), normalize=_normalize(data, True))
            for path in roots
        ]
    if data.source != "directory" and _normalize(data, False):
        pools = [replace(pool, norm=pool_statistics(pool)) for pool in pools]

    train_pools, test_pools = [], []
    for pool in pools:
        train_pool, test_pool = split_pool(pool, data.split_ratio, data.seed)
        train_pools.append(train_pool)
        test_pools.append(test_pool)
    logger.info(
        f"Pools ready: {len(pools)} domain(s), "
        f"{sum(p.num_classes for p in train_pools)} train / {sum(p.num_classes for p in test_pools)} test classes"
    )
    return train_pools, test_pools
