"""API routes for the Shatter inspection service."""

import logging

from fastapi import APIRouter, HTTPException
from pydantic import ValidationError

from .models import (
    BenchRequest,
    HealthResponse,
    ParamsResponse,
    PartitionRequest,
    PartitionResponse,
    PartitionRow,
    VariantInfo,
    VariantsResponse,
)
from .. import __version__
from ..services.benchkit import CostReport, build_cost_report
from ..services.config import ABLATION_LADDER, PRESETS, ModelConfig, PartitionSpec, format_validation_error
from ..services.errors import ShatterError
from ..services.partition import partition_curve_rows

logger = logging.getLogger(__name__)

router = APIRouter()


@router.get("/health", response_model=HealthResponse)
async def health() -> HealthResponse:
    return HealthResponse(version=__version__)


@router.get("/variants", response_model=VariantsResponse)
async def get_variants() -> VariantsResponse:
    """Named presets with their attention variant and position-embedding flag."""
    return VariantsResponse(variants=[
        VariantInfo(name=name, variant=variant, use_position_embeddings=positions,
                    in_ablation_ladder=name in ABLATION_LADDER)
        for name, (variant, positions) in PRESETS.items()
    ])


@router.post("/params", response_model=ParamsResponse)
async def get_params(config: ModelConfig) -> ParamsResponse:
    """Parameter count under the weights-only convention."""
    try:
        report = build_cost_report(config, 1, config.max_len)
    except ShatterError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return ParamsResponse(
        convention=report.convention,
        per_layer=report.per_layer,
        total=report.totals["params"],
        human=report.totals["human"],
        xlnet_formula=report.totals["xlnet_formula"],
        flags=report.flags,
    )


@router.post("/bench", response_model=CostReport)
async def bench(request: BenchRequest) -> CostReport:
    """Analytic parameter, FLOP and activation-memory report."""
    try:
        return build_cost_report(request.model, request.batch, request.seq_len or request.model.max_len)
    except ShatterError as e:
        raise HTTPException(status_code=422, detail=str(e))


@router.post("/partition", response_model=PartitionResponse)
async def partition(request: PartitionRequest) -> PartitionResponse:
    """Sampled partition-of-unity curves, one row per (layer, part, x)."""
    try:
        spec = PartitionSpec(n=request.n, num_layers=request.num_layers)
    except ValidationError as e:
        raise HTTPException(status_code=422, detail=format_validation_error(e))
    rows = [PartitionRow(layer=layer, part=part, x=x, weight=weight)
            for layer, part, x, weight in partition_curve_rows(spec, request.x_min, request.x_max)]
    logger.debug("Served %d partition rows for n=%d L=%d", len(rows), spec.n, spec.num_layers)
    return PartitionResponse(n=spec.n, num_layers=spec.num_layers, rows=rows)
