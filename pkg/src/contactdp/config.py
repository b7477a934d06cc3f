"""Experiment configuration: dataclasses, JSON round-trip, and config hashing.

One JSON file configures everything; nested sections map onto the dataclasses
below (``compliance.k_max``, ``diffusion.train_steps``, ``task.kind``, ...).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .compliance import ConfigurationError, StiffnessParams
from .simworld import TaskSpec

AUX_MODES = ("none", "force", "virtual_target")
CONTROL_MODES = ("closed_loop", "open_loop")
PARAMETERIZATIONS = ("epsilon", "sample", "velocity")


@dataclass(frozen=True)
class HorizonConfig:
    """Chunk geometry: slow-observation, action, execution and latency horizons."""

    obs_steps: int = 2
    chunk_steps: int = 16
    exec_steps: int = 8
    latency_steps: int = 0

    def __post_init__(self):
        if self.obs_steps < 1:
            raise ConfigurationError("obs_steps must be >= 1")
        if self.exec_steps < 1:
            raise ConfigurationError("exec_steps must be >= 1")
        if self.latency_steps < 0:
            raise ConfigurationError("latency_steps must be >= 0")
        if self.obs_steps + self.exec_steps + self.latency_steps > self.chunk_steps:
            raise ConfigurationError(
                "need obs_steps + exec_steps + latency_steps <= chunk_steps"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HorizonConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class DiffusionConfig:
    train_steps: int = 100
    inference_steps: int = 10
    schedule: str = "squared_cosine"
    parameterization: str = "velocity"
    eta: float = 0.0
    clip_sample: float = 1.3

    def __post_init__(self):
        if self.train_steps < 1:
            raise ConfigurationError("train_steps must be >= 1")
        if self.inference_steps < 1:
            raise ConfigurationError("inference_steps must be >= 1")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigurationError(f"unknown parameterization {self.parameterization!r}")
        if self.eta != 0.0:
            raise ConfigurationError("only eta=0 (deterministic sampling) is supported")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_mult: int = 4
    obs_mode: str = "state"  # "state" or "grid"
    grid_size: int = 32

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.obs_mode not in ("state", "grid"):
            raise ConfigurationError(f"unknown obs_mode {self.obs_mode!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-4
    ema_decay: float = 0.999
    log_every: int = 50
    checkpoint_every: int = 500
    val_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 50
    mode: str = "closed_loop"
    seed: int = 10_000
    export_attention: bool = False

    def __post_init__(self):
        if self.mode not in CONTROL_MODES:
            raise ConfigurationError(f"unknown control mode {self.mode!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    horizons: HorizonConfig = field(default_factory=HorizonConfig)
    compliance: StiffnessParams = field(default_factory=StiffnessParams)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    aux: str = "virtual_target"

    def __post_init__(self):
        if self.aux not in AUX_MODES:
            raise ConfigurationError(f"unknown aux mode {self.aux!r}")

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "horizons": self.horizons.to_dict(),
            "compliance": self.compliance.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "aux": self.aux,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        defaults = cls()
        return cls(
            task=TaskSpec.from_dict(d["task"]) if "task" in d else defaults.task,
            horizons=HorizonConfig.from_dict(d["horizons"]) if "horizons" in d else defaults.horizons,
            compliance=StiffnessParams.from_dict(d["compliance"]) if "compliance" in d else defaults.compliance,
            diffusion=DiffusionConfig.from_dict(d["diffusion"]) if "diffusion" in d else defaults.diffusion,
            model=ModelConfig.from_dict(d["model"]) if "model" in d else defaults.model,
            train=TrainConfig.from_dict(d["train"]) if "train" in d else defaults.train,
            eval=EvalConfig.from_dict(d["eval"]) if "eval" in d else defaults.eval,
            aux=d.get("aux", defaults.aux),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()) + "\n", encoding="utf-8")

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    def config_hash(self) -> str:
        return hash_dict(self.to_dict())

    # sections that must agree between a checkpoint and an evaluation config
    TRAINING_SECTIONS = ("task", "horizons", "compliance", "diffusion", "model", "aux")

    def training_signature(self) -> str:
        d = self.to_dict()
        return hash_dict({k: d[k] for k in self.TRAINING_SECTIONS})


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def hash_dict(d: dict) -> str:
    return hashlib.sha256(canonical_json(d).encode("utf-8")).hexdigest()[:16]
