"""Pydantic models for the Shatter inspection API."""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

from ..services.config import AttentionVariant, ModelConfig


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class VariantInfo(BaseModel):
    """One named preset of the ablation ladder."""
    name: str
    variant: AttentionVariant
    use_position_embeddings: bool
    in_ablation_ladder: bool


class VariantsResponse(BaseModel):
    variants: List[VariantInfo]


class ParamsResponse(BaseModel):
    convention: str
    per_layer: Dict[str, int]
    total: int
    human: str = Field(..., description="Count in millions, one decimal (e.g. '84.9M')")
    xlnet_formula: int
    flags: List[str] = Field(default_factory=list)


class BenchRequest(BaseModel):
    """Analytic cost report request (no timing)."""
    model: ModelConfig
    batch: int = Field(1, ge=1, le=4096)
    seq_len: Optional[int] = Field(None, ge=1, le=65536, description="Defaults to model.max_len")

    class Config:
        json_schema_extra = {
            "example": {
                "model": {"variant": "shatter", "num_layers": 12, "hidden_size": 768, "num_heads": 12},
                "batch": 1,
                "seq_len": 512,
            }
        }


class PartitionRequest(BaseModel):
    n: int = Field(4, ge=2, le=64)
    num_layers: int = Field(12, ge=1, le=48)
    x_min: int = Field(-64, ge=-4096)
    x_max: int = Field(64, le=4096)

    @model_validator(mode="after")
    def _ordered(self) -> "PartitionRequest":
        if self.x_min > self.x_max:
            raise ValueError("x_min must not exceed x_max")
        return self


class PartitionRow(BaseModel):
    layer: int
    part: int
    x: int
    weight: float


class PartitionResponse(BaseModel):
    n: int
    num_layers: int
    rows: List[PartitionRow]
