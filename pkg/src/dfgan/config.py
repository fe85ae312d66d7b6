"""Run configuration (YAML on disk, dataclasses in memory).

Defaults reproduce the published training protocol: Adam at 8e-6 with
cosine annealing, 50 epochs per stage, dropout 0.1, loss weights 0.8 / 0.001
and 20 MC passes at test time.  Desk-scale configs override these.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .ggd import BETA_MAX, BETA_MIN


@dataclass
class ModelConfig:
    n_stages: int = 3
    base_width: int = 32
    levels: int = 4
    dropout_rate: float = 0.1
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX
    alpha_init: float = 0.1
    disc_width: int = 32
    disc_downsamplings: int = 3

    def __post_init__(self):
        if self.n_stages < 1 or self.levels < 1:
            raise ValueError("n_stages and levels must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")


@dataclass
class LossWeights:
    lambda_fidelity: float = 0.8
    lambda_residual: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v!r}")


@dataclass
class AugmentConfig:
    # probabilities of the joint geometric op drawn per sample
    probs: dict = field(default_factory=lambda: {
        "identity": 0.3, "hflip": 0.2, "vflip": 0.1,
        "rot90_1": 0.1, "rot90_2": 0.1, "rot90_3": 0.1, "small_rotation": 0.1,
    })
    small_angle_deg: float = 10.0
    jitter: float = 0.1   # contrast factor ~ U[1 - jitter, 1 + jitter]

    def __post_init__(self):
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-9 or any(p < 0 for p in self.probs.values()):
            raise ValueError(f"augmentation probabilities must be >= 0 and sum to 1, got {total}")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")


@dataclass
class StageTrainConfig:
    stage_index: int = 1
    epochs: int = 50
    learning_rate: float = 8e-6
    lr_floor: float = 1e-7
    weights: LossWeights = field(default_factory=LossWeights)
    dropout_rate: float = 0.1
    batch_size: int = 4
    adam_betas: tuple = (0.5, 0.999)
    residual_kernel: int = 5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage_index < 1:
            raise ValueError("stage_index must be >= 1")

    @property
    def scheduler(self) -> dict:
        return {"type": "cosine_annealing", "t_max": self.epochs, "eta_min": self.lr_floor}


@dataclass
class TrainDefaults:
    epochs: int = 50
    learning_rate: float = 8e-6
    lr_floor: float = 1e-7
    lambda_fidelity: float = 0.8
    lambda_residual: float = 0.001
    batch_size: int = 4
    adam_betas: tuple = (0.5, 0.999)
    residual_kernel: int = 5
    max_train_pairs: int | None = None   # use only the first N training pairs (desk runs)

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.max_train_pairs is not None and self.max_train_pairs < 1:
            raise ValueError("max_train_pairs must be >= 1 or null")


@dataclass
class RunConfig:
    seed: int = 0
    split_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainDefaults = field(default_factory=TrainDefaults)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stages: dict = field(default_factory=dict)   # {stage_index: {field: override}}
    passes: int = 20
    val_passes: int = 1

    def stage_config(self, k: int) -> StageTrainConfig:
        t = self.train
        base = dict(
            stage_index=k, epochs=t.epochs, learning_rate=t.learning_rate, lr_floor=t.lr_floor,
            weights=LossWeights(t.lambda_fidelity, t.lambda_residual),
            dropout_rate=self.model.dropout_rate, batch_size=t.batch_size,
            adam_betas=tuple(t.adam_betas), residual_kernel=t.residual_kernel, seed=self.seed,
        )
        override = dict(self.stages.get(k, self.stages.get(str(k), {})))
        if "lambda_fidelity" in override or "lambda_residual" in override:
            base["weights"] = LossWeights(override.pop("lambda_fidelity", t.lambda_fidelity),
                                          override.pop("lambda_residual", t.lambda_residual))
        base.update(override)
        return StageTrainConfig(**base)

    def stage_configs(self) -> list[StageTrainConfig]:
        return [self.stage_config(k) for k in range(1, self.model.n_stages + 1)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["adam_betas"] = list(self.train.adam_betas)
        d["stages"] = {int(k): dict(v) for k, v in self.stages.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"phantom"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for name, kind in (("model", ModelConfig), ("train", TrainDefaults), ("augment", AugmentConfig)):
            extra = set(d.get(name) or {}) - {f.name for f in fields(kind)}
            if extra:
                raise ValueError(f"unknown keys in '{name}': {sorted(extra)}")
        stage_keys = {f.name for f in fields(StageTrainConfig)} | {"lambda_fidelity", "lambda_residual"}
        for k, override in (d.get("stages") or {}).items():
            extra = set(override or {}) - stage_keys
            if extra:
                raise ValueError(f"unknown keys in stage {k} override: {sorted(extra)}")
        return cls(
            seed=int(d.get("seed", 0)),
            split_seed=int(d.get("split_seed", 0)),
            model=ModelConfig(**(d.get("model") or {})),
            train=TrainDefaults(**(d.get("train") or {})),
            augment=AugmentConfig(**(d.get("augment") or {})),
            stages={int(k): dict(v or {}) for k, v in (d.get("stages") or {}).items()},
            passes=int(d.get("passes", 20)),
            val_passes=int(d.get("val_passes", 1)),
        )


def load_yaml(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return data


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(load_yaml(path))


def save_yaml(data: dict, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path
