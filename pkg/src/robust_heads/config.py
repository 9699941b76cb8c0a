"""Run configuration: schema, loading, dotted overrides and stage hashes."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator, model_validator

from .errors import ConfigurationError

OUTPUT_ENV = "ROBUST_HEADS_OUT"

EVAL_KINDS = ["shot_noise", "impulse_noise", "box_blur", "motion_blur", "jpeg", "pixelate", "fog"]
TRAIN_KINDS = ["gaussian_noise", "speckle_noise", "gaussian_blur", "contrast", "brightness"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    dataset: Literal["shapes10", "digits"] = "shapes10"
    path: Optional[str] = None
    image_size: int = 16
    n_train: int = 8000
    n_test: int = 1000
    n_augment_source: int = 4000
    transfer_dataset: Literal["shapes10", "digits"] = "digits"
    transfer_path: Optional[str] = None
    n_transfer_train: int = 1000
    n_transfer_test: int = 500


class StudentConfig(_Strict):
    pretrain_epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 64


class TeacherConfig(_Strict):
    pretrain_epochs: int = 15
    robust_epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 64


class PartitionSection(_Strict):
    fraction_tuned: float = Field(0.10, ge=0.0, le=1.0)
    head_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    dropout_rate: float = Field(0.25, ge=0.0, lt=1.0)


class DistillSection(_Strict):
    temperature: float = Field(2.0, gt=0.0)
    lambda_c: float = Field(1.0, ge=0.0)
    lambda_d: float = Field(1.0, ge=0.0)
    learning_rate: float = 1e-3
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(10, ge=0)
    data_fraction: float = Field(0.5, gt=0.0, le=1.0)
    mode: Literal["ours", "apt", "only_kd", "combined_head", "single_teacher", "no_kd"] = "ours"
    checkpoint_every: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _weights(self):
        if self.lambda_c + self.lambda_d <= 0:
            raise ValueError("lambda_c + lambda_d must be > 0")
        return self


class AugmentationSection(_Strict):
    kinds: list[str] = Field(default_factory=lambda: list(TRAIN_KINDS))
    severities: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    chain_prob: float = Field(0.3, ge=0.0, le=1.0)
    chain_width: int = Field(3, ge=1, le=3)
    chain_depth: int = Field(3, ge=1, le=3)
    aug_ratio: float = Field(1.0, gt=0.0, le=1.0)

    @field_validator("severities")
    @classmethod
    def _sev(cls, v):
        if not v or any(not 1 <= s <= 5 for s in v):
            raise ValueError("severities must be a nonempty subset of 1..5")
        return v


class EvaluationSection(_Strict):
    kinds: list[str] = Field(default_factory=lambda: list(EVAL_KINDS))
    overlap_training_kinds: bool = False
    n_test: Optional[int] = 500
    mc_samples: int = Field(10, ge=2)
    selector: Literal["full", "no_kld", "no_umc", "max_logit"] = "full"
    aggregation: Literal["mean_std", "max_class_std"] = "mean_std"
    sequence_kinds: list[str] = Field(default_factory=lambda: ["noise-walk", "brightness-walk", "blur-walk"])
    n_sequences: int = Field(30, ge=0)
    sequence_length: int = Field(10, ge=2)
    transfer: bool = True
    mce_baseline: str = "base"
    seed: int = 1234


class AblationSection(_Strict):
    modes: list[str] = Field(default_factory=lambda: ["ours", "apt", "only_kd", "combined_head", "single_teacher", "no_kd"])
    selectors: list[str] = Field(default_factory=lambda: ["full", "no_kld", "no_umc", "max_logit"])
    fractions: list[float] = Field(default_factory=lambda: [0.10])
    seeds: list[int] = Field(default_factory=lambda: [0])


class RunConfig(_Strict):
    experiment: str = "default"
    seed: int = Field(0, ge=0)
    output_dir: str = "runs"
    data: DataConfig = Field(default_factory=DataConfig)
    student: StudentConfig = Field(default_factory=StudentConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    distill: DistillSection = Field(default_factory=DistillSection)
    augmentation: AugmentationSection = Field(default_factory=AugmentationSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    ablation: AblationSection = Field(default_factory=AblationSection)

    @model_validator(mode="after")
    def _disjoint_kinds(self):
        if not self.evaluation.overlap_training_kinds:
            shared = sorted(set(self.evaluation.kinds) & set(self.augmentation.kinds))
            if shared:
                raise ValueError(
                    f"evaluation kinds overlap training kinds {shared}; set evaluation.overlap_training_kinds"
                )
        return self


class ConfigError(ConfigurationError):
    """Invalid run configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


def _format_pydantic(exc: PydanticValidationError) -> ConfigError:
    err = exc.errors()[0]
    field = ".".join(str(p) for p in err["loc"])
    return ConfigError(err["msg"], field)


def set_dotted(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError("cannot override inside a scalar", dotted)
    cur[keys[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def build_config(raw: dict | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = copy.deepcopy(raw or {})
    for item in overrides or []:
        key, value = parse_override(item)
        set_dotted(data, key, value)
    try:
        cfg = RunConfig.model_validate(data)
    except PydanticValidationError as exc:
        raise _format_pydantic(exc) from None
    check_paths(cfg)
    return cfg


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a mapping")
    return build_config(raw, overrides)


def check_paths(cfg: RunConfig) -> None:
    for field in ("path", "transfer_path"):
        value = getattr(cfg.data, field)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"dataset file {value} does not exist", f"data.{field}")


def config_dict(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


def hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def config_hash(cfg: RunConfig) -> str:
    d = config_dict(cfg)
    d.pop("output_dir")
    return hash_dict(d)


STAGE_KEYS = {
    "pretrain": ("data", "student", "teacher"),
    "teacher": ("data", "teacher", "augmentation"),
    "distill": ("data", "student", "teacher", "augmentation", "partition", "distill"),
    "eval": ("data", "student", "teacher", "augmentation", "partition", "distill", "evaluation"),
}


def stage_hash(cfg: RunConfig, stage: str) -> str:
    """Hash of only the config sections a stage depends on (plus the seed)."""
    d = config_dict(cfg)
    sub = {k: d[k] for k in STAGE_KEYS[stage]}
    sub["seed"] = d["seed"]
    sub["stage"] = stage
    if stage in ("pretrain", "teacher"):
        # transfer settings never affect training artifacts
        sub["data"] = {k: v for k, v in sub["data"].items() if not k.startswith(("transfer", "n_transfer"))}
    if stage == "teacher":
        sub["augmentation"] = d["augmentation"]
    return hash_dict(sub)


def output_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def run_dir(cfg: RunConfig, stage: str) -> Path:
    """``<out>/<experiment>/<hash>/`` with checkpoints, logs, reports and plots subdirectories."""
    d = output_root(cfg) / cfg.experiment / stage_hash(cfg, stage)
    for sub in ("checkpoints", "logs", "reports", "plots"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    return d
