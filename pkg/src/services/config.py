"""Configuration models for the lab, plus YAML loading of run configs."""

import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .. import settings


class AttentionVariant(str, Enum):
    """Self-attention mechanisms the encoder can be built with."""
    MULTI_HEAD_SOFTMAX = "multi_head_softmax"
    PART_MASK = "part_mask"
    ONE_HEAD_SOFTMAX = "one_head_softmax"
    ONE_HEAD_SIGMOID = "one_head_sigmoid"
    PART_BIAS = "part_bias"
    SHATTER = "shatter"
    RPE = "rpe"
    RAB = "rab"

    @property
    def has_key_projection(self) -> bool:
        return self in (AttentionVariant.MULTI_HEAD_SOFTMAX, AttentionVariant.PART_MASK,
                        AttentionVariant.RPE, AttentionVariant.RAB)

    @property
    def multi_head_scores(self) -> bool:
        return self in (AttentionVariant.MULTI_HEAD_SOFTMAX, AttentionVariant.PART_MASK,
                        AttentionVariant.RAB)

    @property
    def uses_partition_mask(self) -> bool:
        return self in (AttentionVariant.PART_MASK, AttentionVariant.ONE_HEAD_SOFTMAX,
                        AttentionVariant.ONE_HEAD_SIGMOID, AttentionVariant.PART_BIAS, AttentionVariant.SHATTER)

    @property
    def sigmoid_scores(self) -> bool:
        return self in (AttentionVariant.ONE_HEAD_SIGMOID, AttentionVariant.PART_BIAS,
                        AttentionVariant.SHATTER)

    @property
    def has_partition_embeddings(self) -> bool:
        return self in (AttentionVariant.PART_BIAS, AttentionVariant.SHATTER)

    @property
    def allows_position_embeddings(self) -> bool:
        return self in (AttentionVariant.MULTI_HEAD_SOFTMAX, AttentionVariant.RAB)


class ClassificationStrategy(str, Enum):
    """Sequence classification readout."""
    CLS_TOKEN = "cls_token"
    POOLED = "pooled"


# name -> (variant, use_position_embeddings)
PRESETS: Dict[str, Tuple[AttentionVariant, bool]] = {
    "BERT": (AttentionVariant.MULTI_HEAD_SOFTMAX, True),
    "No_Position": (AttentionVariant.MULTI_HEAD_SOFTMAX, False),
    "Part_Mask": (AttentionVariant.PART_MASK, False),
    "1H_Softmax": (AttentionVariant.ONE_HEAD_SOFTMAX, False),
    "1H_Sigmoid": (AttentionVariant.ONE_HEAD_SIGMOID, False),
    "Part_Bias": (AttentionVariant.PART_BIAS, False),
    "Shatter": (AttentionVariant.SHATTER, False),
    "RPE": (AttentionVariant.RPE, False),
    "RAB": (AttentionVariant.RAB, True),
}

ABLATION_LADDER: List[str] = [
    "BERT", "No_Position", "Part_Mask", "1H_Softmax", "1H_Sigmoid", "Part_Bias", "Shatter",
]


class PartitionSpec(BaseModel):
    """Bernstein partition of unity over relative positions, one schedule entry per layer."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    n: int = Field(..., ge=2, description="Number of parts (even)")
    num_layers: int = Field(..., ge=1, description="Layer count L")
    alphas: Optional[Tuple[float, ...]] = Field(None, description="Per-layer alpha override")
    betas: Optional[Tuple[float, ...]] = Field(None, description="Per-layer beta override")

    @field_validator("n")
    @classmethod
    def _even_parts(cls, value: int) -> int:
        if value % 2:
            raise ValueError("part count n must be even")
        return value

    @model_validator(mode="after")
    def _check_overrides(self) -> "PartitionSpec":
        for label, values in (("alphas", self.alphas), ("betas", self.betas)):
            if values is None:
                continue
            if len(values) != self.num_layers:
                raise ValueError(f"{label} needs one entry per layer ({self.num_layers})")
            if any(v >= 0 for v in values):
                raise ValueError(f"{label} must all be negative")
        return self

    @property
    def degree(self) -> int:
        return self.n // 2 - 1

    def cache_key(self) -> str:
        return hashlib.md5(self.model_dump_json().encode()).hexdigest()


class RabConfig(BaseModel):
    """Relative attention bias buckets (T5-style by default)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_buckets: int = Field(32, ge=1)
    max_distance: int = Field(128, ge=1)
    boundaries: Optional[Tuple[float, ...]] = Field(
        None, description="Full boundary list b_0=-inf < ... < b_m=inf; overrides the T5 rule")

    @field_validator("boundaries")
    @classmethod
    def _increasing(cls, value):
        if value is None:
            return value
        if len(value) < 2 or value[0] != -math.inf or value[-1] != math.inf:
            raise ValueError("boundaries must start at -inf and end at inf")
        if any(b >= c for b, c in zip(value, value[1:])):
            raise ValueError("boundaries must be strictly increasing")
        return value


class ModelConfig(BaseModel):
    """Full encoder description."""
    model_config = ConfigDict(extra="forbid")

    variant: AttentionVariant = AttentionVariant.SHATTER
    num_layers: int = Field(12, ge=0, description="L")
    hidden_size: int = Field(768, ge=1, description="d")
    num_heads: int = Field(12, ge=1, description="Heads or parts n")
    intermediate_size: Optional[int] = Field(None, ge=1, description="d_ff, defaults to 4d")
    vocab_size: int = Field(32000, ge=6)
    max_len: int = Field(512, ge=1)
    use_position_embeddings: Optional[bool] = Field(
        None, description="Defaults to True for multi_head_softmax and rab, False otherwise")
    partition: Optional[PartitionSpec] = None
    rpe_clip: int = Field(128, ge=1, description="Relative offsets clip radius c")
    rab: RabConfig = Field(default_factory=RabConfig)
    classification: ClassificationStrategy = ClassificationStrategy.POOLED
    num_labels: int = Field(2, ge=1)
    attention_dropout: float = Field(0.0, ge=0.0, lt=1.0)
    init_range: float = Field(0.02, gt=0.0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelConfig":
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.use_position_embeddings is None:
            self.use_position_embeddings = self.variant.allows_position_embeddings
        elif self.use_position_embeddings and not self.variant.allows_position_embeddings:
            raise ValueError(f"position embeddings are not allowed for variant {self.variant.value}")
        if self.partition is None and self.variant.uses_partition_mask and self.num_layers > 0:
            if self.num_heads % 2:
                raise ValueError("partition variants need an even num_heads")
            self.partition = PartitionSpec(n=self.num_heads, num_layers=self.num_layers)
        if self.partition is not None:
            if self.partition.n != self.num_heads:
                raise ValueError("partition.n must equal num_heads")
            if self.partition.num_layers != self.num_layers:
                raise ValueError("partition.num_layers must equal num_layers")
        return self

    @property
    def d_ff(self) -> int:
        return self.intermediate_size or 4 * self.hidden_size

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def rpe_rows(self) -> int:
        return 2 * self.rpe_clip - 1

    def with_preset(self, name: str) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset {name!r}; choose from {sorted(PRESETS)}")
        variant, positions = PRESETS[name]
        data = self.model_dump()
        data.update(variant=variant, use_position_embeddings=positions)
        return ModelConfig(**data)

    def preset_name(self) -> Optional[str]:
        for name, (variant, positions) in PRESETS.items():
            if variant == self.variant and positions == self.use_position_embeddings:
                return name
        return None


class MaskingConfig(BaseModel):
    """MLM masking: fraction of positions selected and how they are replaced."""
    model_config = ConfigDict(extra="forbid")

    fraction: float = Field(0.15, ge=0.0, le=1.0)
    mask_prob: float = Field(0.8, ge=0.0, le=1.0)
    random_prob: float = Field(0.1, ge=0.0, le=1.0)
    keep_prob: float = Field(0.1, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _split_sums_to_one(self) -> "MaskingConfig":
        if abs(self.mask_prob + self.random_prob + self.keep_prob - 1.0) > 1e-9:
            raise ValueError("mask_prob + random_prob + keep_prob must equal 1")
        return self


class OptimizerConfig(BaseModel):
    """Adam with decoupled weight decay."""
    model_config = ConfigDict(extra="forbid")

    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.999, gt=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)


class ScheduleConfig(BaseModel):
    """Linear warmup to peak, then linear decay to zero at total_steps."""
    model_config = ConfigDict(extra="forbid")

    peak_lr: float = Field(1e-4, gt=0.0)
    warmup_steps: int = Field(10000, ge=0)
    total_steps: int = Field(1000000, ge=0)

    @model_validator(mode="after")
    def _warmup_within_total(self) -> "ScheduleConfig":
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        return self


class TrainingConfig(BaseModel):
    """Desk-scale training loop settings."""
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(8, ge=1)
    seq_len: Optional[int] = Field(None, ge=2, description="Defaults to model.max_len")
    eval_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(200, ge=1)
    valid_batches: int = Field(4, ge=1)
    valid_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    seed: int = 0
    deterministic: bool = False
    prefetch: int = Field(2, ge=0, description="Prefetch queue size; 0 disables the worker")
    masking: MaskingConfig = Field(default_factory=MaskingConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)


class RunConfig(BaseModel):
    """What a config file holds."""
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)

    @property
    def seq_len(self) -> int:
        return self.training.seq_len or self.model.max_len


class RunManifest(BaseModel):
    """Everything needed to rerun a command."""
    model_config = ConfigDict(extra="forbid")

    command: List[str]
    config: Dict
    seeds: Dict[str, int]
    partition: Optional[Dict] = None
    data_hashes: Dict[str, str] = Field(default_factory=dict)
    code_version: str
    deterministic: bool = False
    notes: Dict[str, Union[str, int, float, bool, None]] = Field(default_factory=dict)


def config_to_dict(model: BaseModel) -> Dict:
    """Plain builtin types (enums as values, infinities kept) for JSON and YAML output."""
    return json.loads(json.dumps(model.model_dump()))


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        lines.append(f"{location}: {item.get('msg', 'invalid')}")
    return "; ".join(lines)


def resolve_config_path(name: Union[str, Path]) -> Path:
    """Accept a path, a file name, or a bare name under the config directory."""
    candidates = [Path(name), Path(f"{name}.yaml"),
                  settings.CONFIG_DIR / str(name), settings.CONFIG_DIR / f"{name}.yaml"]
    for candidate in candidates:
        if candidate.is_file():
            return candidate
    raise ConfigError(f"Config not found: {name}")


def load_run_config(name: Union[str, Path]) -> RunConfig:
    """
    Load a YAML run config; unknown keys and bad values raise ConfigError.
    A run manifest is accepted too, in which case its recorded config is used.
    """
    path = resolve_config_path(name)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    if "command" in data and "config" in data:
        data = data["config"]
    return parse_run_config(data, source=str(path))


def parse_run_config(data: Dict, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {format_validation_error(e)}") from e
    except TypeError as e:
        raise ConfigError(f"{source}: {e}") from e
