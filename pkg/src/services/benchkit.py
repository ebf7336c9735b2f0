"""
Benchkit - analytic parameter, FLOP and activation-memory accounting plus
wall-clock timing of training steps.

Parameter convention: weight matrices only. Attention projections, partition
embeddings, relative tables, bucket biases and FFN matrices count; word and
position embeddings, biases and layer-norm parameters do not. FLOP
convention: a multiply-add is 2 FLOPs, an elementwise op is 1.
"""

import logging
import statistics
import time
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from .config import AttentionVariant, ModelConfig, OptimizerConfig
from .encoder import NUM_SPECIAL, EncoderParams, mlm_loss, rab_boundaries
from .numerics import IGNORE_INDEX, backward
from .pretrain import TrainState, adam_step, derive_seed, pretraining_parameters

logger = logging.getLogger(__name__)

CONVENTION = (
    "weight matrices only: attention projections, partition embeddings, relative position tables, "
    "bucket biases and FFN matrices; excludes word and position embeddings, biases and layer-norm parameters"
)
FLOP_CONVENTION = "multiply-add = 2 FLOPs, elementwise = 1 FLOP; per layer, per sequence"
BYTES_PER_ELEMENT = 4

# (layers, hidden) -> published large-size counts that do not follow the weights-only convention
_LARGE_REFERENCE = {(24, 1024): "151.0M (BERT) / 138.6M (Shatter)"}


def format_millions(count: int) -> str:
    return f"{count / 1e6:.1f}M"


def layer_param_terms(config: ModelConfig) -> Dict[str, int]:
    d, d_ff, n = config.hidden_size, config.d_ff, config.num_heads
    variant = config.variant
    terms = {"query": d * d}
    if variant.has_key_projection:
        terms["key"] = d * d
    terms["value"] = d * d
    terms["output"] = d * d
    if variant.has_partition_embeddings:
        terms["partition_embeddings"] = n * d
    if variant == AttentionVariant.RPE:
        terms["relative_embeddings"] = config.rpe_rows * d
    if variant == AttentionVariant.RAB:
        terms["rab_weights"] = (len(rab_boundaries(config.rab)) - 1) * n
    terms["ffn"] = 2 * d * d_ff
    return terms


def count_params(config: ModelConfig) -> int:
    return config.num_layers * sum(layer_param_terms(config).values())


def count_xlnet_params(config: ModelConfig) -> int:
    """BERT-formula count plus the extra d x d matrix per layer."""
    bert = config.model_copy(update={"variant": AttentionVariant.MULTI_HEAD_SOFTMAX})
    return count_params(bert) + config.num_layers * config.hidden_size ** 2


def counted_by_convention(name: str) -> bool:
    return name.startswith("layers.") and not name.endswith(".bias") and "norm" not in name


def count_allocated_params(params: EncoderParams) -> int:
    """Walk the real parameter inventory and apply the convention."""
    return int(sum(t.size for name, t in params.named().items() if counted_by_convention(name)))


def attention_flop_terms(config: ModelConfig, length: int) -> Dict[str, int]:
    """Itemized attention FLOPs for one layer over one sequence of `length`."""
    d, n, l = config.hidden_size, config.num_heads, length
    variant = config.variant
    terms: Dict[str, int] = {"query_projection": 2 * l * d * d}
    if variant.has_key_projection:
        terms["key_projection"] = 2 * l * d * d
    terms["value_projection"] = 2 * l * d * d

    if variant.multi_head_scores or variant == AttentionVariant.RPE:
        sheets = 1 if variant == AttentionVariant.RPE else n
        terms["scores"] = 2 * l * l * d
        terms["score_scaling"] = sheets * l * l
        if variant == AttentionVariant.RAB:
            terms["bucket_bias"] = n * l * l
        if variant == AttentionVariant.RPE:
            rows = config.rpe_rows
            terms["relative_key_projection"] = 2 * rows * d * d
            terms["relative_value_projection"] = 2 * rows * d * d
            terms["relative_scores"] = 2 * l * rows * d
            terms["relative_gather"] = l * l
            terms["relative_scatter"] = l * l
            terms["relative_values"] = 2 * l * rows * d
        terms["softmax"] = 3 * sheets * l * l
        if variant == AttentionVariant.PART_MASK:
            terms["partition_mask"] = n * l * l
    else:
        terms["scores"] = 2 * l * l * d
        terms["score_scaling"] = l * l
        if variant.has_partition_embeddings:
            terms["partition_scores"] = 2 * l * d * n
            terms["partition_bias"] = 2 * n * l * l
            terms["bias_add"] = l * l
        if variant.sigmoid_scores:
            terms["sigmoid"] = l * l
            terms["l2_normalize"] = 3 * l * l
        else:
            terms["softmax"] = 3 * l * l
        terms["partition_mask"] = n * l * l
        if variant == AttentionVariant.SHATTER:
            terms["partition_weights"] = n * l * l
            terms["partition_value_projection"] = 2 * n * d * d
            terms["partition_values"] = 2 * l * n * d

    terms["weighted_values"] = 2 * l * l * d
    terms["output_projection"] = 2 * l * d * d
    return terms


def count_attention_flops(config: ModelConfig, length: int) -> int:
    return sum(attention_flop_terms(config, length).values())


def activation_memory_terms(config: ModelConfig, batch: int, length: int) -> Dict[str, int]:
    """Bytes of 32-bit activations kept for backward, summed over layers."""
    d, n, l, d_ff = config.hidden_size, config.num_heads, length, config.d_ff
    variant = config.variant
    per_layer: Dict[str, int] = {
        "layer_input": l * d,
        "query": l * d,
        "value": l * d,
    }
    if variant.has_key_projection:
        per_layer["key"] = l * d
    if variant.multi_head_scores:
        per_layer["attention_logits"] = n * l * l
        per_layer["attention_weights"] = n * l * l
        if variant == AttentionVariant.PART_MASK:
            per_layer["masked_weights"] = n * l * l
    elif variant == AttentionVariant.RPE:
        per_layer["attention_logits"] = l * l
        per_layer["attention_weights"] = l * l
        per_layer["relative_scores"] = l * config.rpe_rows
        per_layer["relative_weights"] = l * config.rpe_rows
    else:
        per_layer["score_sheet"] = l * l
        per_layer["normalized_sheet"] = l * l
        per_layer["masked_weights"] = n * l * l
        if variant.has_partition_embeddings:
            per_layer["partition_scores"] = l * n
            per_layer["partition_bias"] = n * l * l
    per_layer.update({
        "context": l * d,
        "attention_output": l * d,
        "attention_norm": l * d,
        "ffn_inner": 2 * l * d_ff,
        "ffn_output": l * d,
        "output_norm": l * d,
    })
    scale = batch * BYTES_PER_ELEMENT
    terms = {name: config.num_layers * count * scale for name, count in per_layer.items()}
    terms["embeddings"] = l * d * scale
    return terms


def estimate_activation_memory(config: ModelConfig, batch: int, length: int) -> int:
    return int(sum(activation_memory_terms(config, batch, length).values()))


class TimingStats(BaseModel):
    steps: int = 0
    median_ms: Optional[float] = None
    min_ms: Optional[float] = None
    max_ms: Optional[float] = None
    stdev_ms: Optional[float] = None
    samples_ms: List[float] = Field(default_factory=list)


def time_steps(config: ModelConfig, batch: int, length: int, steps: int, *, warmup: int = 1,
               seed: int = 0) -> TimingStats:
    """Wall time of forward + backward + Adam update; warmup iterations are discarded."""
    params = EncoderParams.init(config, seed)
    state = TrainState.fresh(pretraining_parameters(params))
    optimizer = OptimizerConfig()
    rng = np.random.default_rng(derive_seed(seed, 4))
    tokens = rng.integers(NUM_SPECIAL, config.vocab_size, size=(batch, length)).astype(np.int32)
    labels = np.where(rng.random((batch, length)) < 0.15, tokens, IGNORE_INDEX)
    pad = np.ones((batch, length), dtype=bool)

    samples: List[float] = []
    for i in range(warmup + steps):
        started = time.perf_counter()
        loss = mlm_loss(params, config, tokens, labels, pad)
        gradients = backward(loss)
        adam_step(state, {name: gradients.get(t, np.zeros_like(t.data)) for name, t in state.params.items()},
                  optimizer, 1e-4)
        if i >= warmup:
            samples.append((time.perf_counter() - started) * 1000.0)

    if not samples:
        logger.info("No timed steps after %d warmup iterations", warmup)
        return TimingStats()
    return TimingStats(
        steps=len(samples),
        median_ms=statistics.median(samples),
        min_ms=min(samples),
        max_ms=max(samples),
        stdev_ms=statistics.stdev(samples) if len(samples) > 1 else 0.0,
        samples_ms=samples,
    )


class CostReport(BaseModel):
    """What `bench` and `params` emit."""
    convention: str = CONVENTION
    flop_convention: str = FLOP_CONVENTION
    variant: str
    per_layer: Dict[str, int]
    totals: Dict[str, Any]
    flops: Dict[str, Any]
    memory_bytes: int
    memory_terms: Dict[str, int]
    ms_per_step: Optional[TimingStats] = None
    flags: List[str] = Field(default_factory=list)


def discrepancy_flags(config: ModelConfig) -> List[str]:
    reference = _LARGE_REFERENCE.get((config.num_layers, config.hidden_size))
    if reference is None:
        return []
    flag = (f"reference large-size count {reference} does not follow the weights-only convention; "
            f"reporting {format_millions(count_params(config))} under the convention")
    logger.warning(flag)
    return [flag]


def build_cost_report(config: ModelConfig, batch: int = 1, length: Optional[int] = None,
                      timing: Optional[TimingStats] = None) -> CostReport:
    length = length or config.max_len
    per_layer = layer_param_terms(config)
    total = count_params(config)
    flop_terms = attention_flop_terms(config, length)
    memory_terms = activation_memory_terms(config, batch, length)
    return CostReport(
        variant=config.variant.value,
        per_layer=per_layer,
        totals={
            "layers": config.num_layers,
            "per_layer": sum(per_layer.values()),
            "params": total,
            "human": format_millions(total),
            "xlnet_formula": count_xlnet_params(config),
        },
        flops={
            "seq_len": length,
            "terms": flop_terms,
            "per_layer": sum(flop_terms.values()),
            "total": config.num_layers * sum(flop_terms.values()),
        },
        memory_bytes=sum(memory_terms.values()),
        memory_terms=memory_terms,
        ms_per_step=timing,
        flags=discrepancy_flags(config),
    )
