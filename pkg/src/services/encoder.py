"""
Encoder - embeddings, the post-layer-norm layer stack, the tied MLM head and
both sequence-classification readouts.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import AttentionParams, attend, classify_attend
from .config import AttentionVariant, ClassificationStrategy, ModelConfig, RabConfig
from .errors import ConfigError, DataError, ShapeError, VariantContractError
from .numerics import (
    IGNORE_INDEX, Tensor, cross_entropy, dropout, gather_rows, gelu, get_default_dtype, layer_norm, matmul,
)
from .partition import PartitionMask, build_mask, t5_bucket_boundaries

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ["[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]"]
CLS_ID, SEP_ID, PAD_ID, MASK_ID, UNK_ID = range(len(SPECIAL_TOKENS))
NUM_SPECIAL = len(SPECIAL_TOKENS)


def rab_boundaries(rab: RabConfig) -> List[float]:
    if rab.boundaries is not None:
        return list(rab.boundaries)
    return t5_bucket_boundaries(rab.num_buckets, rab.max_distance)


def _normal(rng: np.random.Generator, scale: float, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape).astype(get_default_dtype()), requires_grad=True)


def _filled(value: float, *shape) -> Tensor:
    return Tensor(np.full(shape, value, dtype=get_default_dtype()), requires_grad=True)


@dataclass
class LayerParams:
    """One encoder layer: attention, FFN and the two layer norms."""
    attention: AttentionParams
    attention_norm_gain: Tensor
    attention_norm_bias: Tensor
    ffn_inner_weight: Tensor
    ffn_inner_bias: Tensor
    ffn_outer_weight: Tensor
    ffn_outer_bias: Tensor
    output_norm_gain: Tensor
    output_norm_bias: Tensor

    _NAMES = {
        "attention_norm_gain": "attention_norm.gain", "attention_norm_bias": "attention_norm.bias",
        "ffn_inner_weight": "ffn.inner.weight", "ffn_inner_bias": "ffn.inner.bias",
        "ffn_outer_weight": "ffn.outer.weight", "ffn_outer_bias": "ffn.outer.bias",
        "output_norm_gain": "output_norm.gain", "output_norm_bias": "output_norm.bias",
    }

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "LayerParams":
        d, d_ff = config.hidden_size, config.d_ff
        attention = AttentionParams.init(
            config.variant, d, config.num_heads, rng, config.init_range,
            rpe_rows=config.rpe_rows, rab_buckets=len(rab_boundaries(config.rab)) - 1)
        return cls(
            attention=attention,
            attention_norm_gain=_filled(1.0, d), attention_norm_bias=_filled(0.0, d),
            ffn_inner_weight=_normal(rng, config.init_range, d, d_ff), ffn_inner_bias=_filled(0.0, d_ff),
            ffn_outer_weight=_normal(rng, config.init_range, d_ff, d), ffn_outer_bias=_filled(0.0, d),
            output_norm_gain=_filled(1.0, d), output_norm_bias=_filled(0.0, d),
        )

    def named(self, prefix: str) -> Dict[str, Tensor]:
        tensors = {f"{prefix}attention.{suffix}": t for suffix, t in self.attention.named().items()}
        for attr, suffix in self._NAMES.items():
            tensors[f"{prefix}{suffix}"] = getattr(self, attr)
        return tensors

    @classmethod
    def from_named(cls, tensors: Dict[str, Tensor], prefix: str) -> "LayerParams":
        head = f"{prefix}attention."
        attention = AttentionParams.from_named(
            {name[len(head):]: t for name, t in tensors.items() if name.startswith(head)})
        return cls(attention=attention,
                   **{attr: tensors[f"{prefix}{suffix}"] for attr, suffix in cls._NAMES.items()})


@dataclass
class EncoderParams:
    """All trainable tensors; the MLM output projection reads `word` directly (tied)."""
    word: Tensor
    position: Optional[Tensor]
    embed_norm_gain: Tensor
    embed_norm_bias: Tensor
    layers: List[LayerParams]
    mlm_transform_weight: Tensor
    mlm_transform_bias: Tensor
    mlm_norm_gain: Tensor
    mlm_norm_bias: Tensor
    mlm_bias: Tensor
    pooler_seed: Tensor
    classifier_weight: Tensor
    classifier_bias: Tensor

    _NAMES = {
        "word": "embeddings.word", "position": "embeddings.position",
        "embed_norm_gain": "embeddings.norm.gain", "embed_norm_bias": "embeddings.norm.bias",
        "mlm_transform_weight": "mlm.transform.weight", "mlm_transform_bias": "mlm.transform.bias",
        "mlm_norm_gain": "mlm.norm.gain", "mlm_norm_bias": "mlm.norm.bias", "mlm_bias": "mlm.bias",
        "pooler_seed": "pooler.seed",
        "classifier_weight": "classifier.weight", "classifier_bias": "classifier.bias",
    }

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "EncoderParams":
        """Normal(0, init_range) weights, unit gains and zero biases from one seeded stream."""
        rng = np.random.default_rng(seed)
        d, scale = config.hidden_size, config.init_range
        word = _normal(rng, scale, config.vocab_size, d)
        position = _normal(rng, scale, config.max_len, d) if config.use_position_embeddings else None
        layers = [LayerParams.init(config, rng) for _ in range(config.num_layers)]
        params = cls(
            word=word, position=position,
            embed_norm_gain=_filled(1.0, d), embed_norm_bias=_filled(0.0, d),
            layers=layers,
            mlm_transform_weight=_normal(rng, scale, d, d), mlm_transform_bias=_filled(0.0, d),
            mlm_norm_gain=_filled(1.0, d), mlm_norm_bias=_filled(0.0, d),
            mlm_bias=_filled(0.0, config.vocab_size),
            pooler_seed=_normal(rng, scale, d),
            classifier_weight=_normal(rng, scale, d, config.num_labels),
            classifier_bias=_filled(0.0, config.num_labels),
        )
        params.check(config)
        return params

    def named(self) -> Dict[str, Tensor]:
        """Every tensor under its checkpoint name, in a fixed order."""
        tensors: Dict[str, Tensor] = {}
        for attr in ("word", "position", "embed_norm_gain", "embed_norm_bias"):
            if getattr(self, attr) is not None:
                tensors[self._NAMES[attr]] = getattr(self, attr)
        for k, layer in enumerate(self.layers):
            tensors.update(layer.named(f"layers.{k}."))
        for attr in ("mlm_transform_weight", "mlm_transform_bias", "mlm_norm_gain", "mlm_norm_bias",
                     "mlm_bias", "pooler_seed", "classifier_weight", "classifier_bias"):
            tensors[self._NAMES[attr]] = getattr(self, attr)
        return tensors

    @classmethod
    def from_named(cls, tensors: Dict[str, Tensor], config: ModelConfig) -> "EncoderParams":
        try:
            fields_ = {attr: tensors.get(name) for attr, name in cls._NAMES.items()}
            layers = [LayerParams.from_named(tensors, f"layers.{k}.") for k in range(config.num_layers)]
        except KeyError as e:
            raise DataError(f"Checkpoint is missing parameter {e}") from e
        missing = [name for attr, name in cls._NAMES.items() if fields_[attr] is None and attr != "position"]
        if missing:
            raise DataError(f"Checkpoint is missing parameters: {', '.join(missing)}")
        params = cls(layers=layers, **fields_)
        params.check(config)
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named().values())

    def check(self, config: ModelConfig) -> None:
        """Parameter inventory must match the configured variant exactly."""
        if (self.position is not None) != bool(config.use_position_embeddings):
            raise VariantContractError("position embeddings present/absent contrary to the config")
        if len(self.layers) != config.num_layers:
            raise VariantContractError(f"expected {config.num_layers} layers, found {len(self.layers)}")
        for layer in self.layers:
            layer.attention.check(config.variant)


@dataclass
class HiddenStates:
    """X^0 .. X^L for one batch, plus the pad mask they were computed under."""
    layers: List[Tensor]
    pad: np.ndarray

    @property
    def final(self) -> Tensor:
        return self.layers[-1]


@dataclass
class LayerContext:
    """Per-call constants shared by every layer: masks, buckets and dropout."""
    masks: List[Optional[PartitionMask]] = field(default_factory=list)
    boundaries: Optional[List[float]] = None
    dropout: Optional[Callable[[Tensor], Tensor]] = None


def layer_context(config: ModelConfig, length: int, rng: Optional[np.random.Generator] = None) -> LayerContext:
    masks: List[Optional[PartitionMask]] = [None] * config.num_layers
    if config.variant.uses_partition_mask:
        masks = [build_mask(length, k, config.partition) for k in range(config.num_layers)]
    boundaries = rab_boundaries(config.rab) if config.variant == AttentionVariant.RAB else None
    drop = None
    if config.attention_dropout > 0 and rng is not None:
        rate = config.attention_dropout
        drop = lambda t: dropout(t, rate, rng)  # noqa: E731
    return LayerContext(masks=masks, boundaries=boundaries, dropout=drop)


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.dtype.kind not in "iu":
        raise DataError(f"token ids must be integers, got {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise DataError(f"token id out of range [0, {config.vocab_size})")
    if tokens.shape[1] > config.max_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_len {config.max_len}")
    return tokens


def embed_input(tokens: np.ndarray, config: ModelConfig, params: EncoderParams) -> Tensor:
    """x0_i = layernorm(E[w_i] + P[i]); the position term is absent when disabled."""
    tokens = _check_tokens(tokens, config)
    x = gather_rows(params.word, tokens)
    if params.position is not None:
        x = x + gather_rows(params.position, np.arange(tokens.shape[1]))
    return layer_norm(x, params.embed_norm_gain, params.embed_norm_bias)


def feed_forward(h: Tensor, layer: LayerParams) -> Tensor:
    inner = gelu(matmul(h, layer.ffn_inner_weight) + layer.ffn_inner_bias)
    return matmul(inner, layer.ffn_outer_weight) + layer.ffn_outer_bias


def residual_block(x: Tensor, update: Tensor, layer: LayerParams) -> Tensor:
    """h = LN(x + update); out = LN(h + FFN(h)). Shared by the token path and pooling."""
    h = layer_norm(x + update, layer.attention_norm_gain, layer.attention_norm_bias)
    return layer_norm(h + feed_forward(h, layer), layer.output_norm_gain, layer.output_norm_bias)


def layer_forward(X: Tensor, layer: LayerParams, config: ModelConfig, pad: Optional[np.ndarray],
                  mask: Optional[PartitionMask] = None, *, boundaries: Optional[Sequence[float]] = None,
                  dropout_fn: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    """X^{k+1} = F^k(attend(X^k), X^k) with post-layer-norm residuals."""
    update = attend(X, layer.attention, config.variant, pad, heads=config.num_heads, mask=mask,
                    clip=config.rpe_clip, boundaries=boundaries, dropout=dropout_fn)
    return residual_block(X, update, layer)


def encode(tokens: np.ndarray, pad: Optional[np.ndarray], config: ModelConfig, params: EncoderParams,
           *, rng: Optional[np.random.Generator] = None) -> HiddenStates:
    tokens = _check_tokens(tokens, config)
    if pad is None:
        pad = np.ones(tokens.shape, dtype=bool)
    pad = np.asarray(pad, dtype=bool).reshape(tokens.shape)
    context = layer_context(config, tokens.shape[1], rng)

    states = [embed_input(tokens, config, params)]
    for k, layer in enumerate(params.layers):
        states.append(layer_forward(states[-1], layer, config, pad, context.masks[k],
                                    boundaries=context.boundaries, dropout_fn=context.dropout))
    return HiddenStates(layers=states, pad=pad)


def mlm_logits(hidden: Tensor, positions: Optional[np.ndarray], params: EncoderParams) -> Tensor:
    """
    Logits over the vocabulary for the selected slots.

    `positions` is a boolean mask shaped like hidden.shape[:-1] (None selects
    every row). Transform, layer norm, then the tied word-embedding projection
    plus the vocabulary bias.
    """
    if positions is not None:
        selected = np.nonzero(np.asarray(positions, dtype=bool))
        hidden = hidden[selected]
    transformed = matmul(hidden, params.mlm_transform_weight) + params.mlm_transform_bias
    normed = layer_norm(transformed, params.mlm_norm_gain, params.mlm_norm_bias)
    return matmul(normed, params.word.swap_last()) + params.mlm_bias


def mlm_loss(params: EncoderParams, config: ModelConfig, inputs: np.ndarray, labels: np.ndarray,
             pad: np.ndarray, *, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean cross-entropy over positions whose label is not the ignore sentinel."""
    states = encode(inputs, pad, config, params, rng=rng)
    selected = np.asarray(labels) != IGNORE_INDEX
    logits = mlm_logits(states.final, selected, params)
    return cross_entropy(logits, np.asarray(labels)[selected])


def classify_cls(final: Tensor, params: EncoderParams) -> Tensor:
    """Scores from the hidden state at position 0 ([CLS])."""
    first = final[..., 0, :]
    return matmul(first, params.classifier_weight) + params.classifier_bias


def classify_pooled(states: HiddenStates, params: EncoderParams, config: ModelConfig,
                    pad: Optional[np.ndarray] = None) -> Tensor:
    """
    Pooled readout: starting from the learnt seed y0, every layer recomputes a
    weighted average of its input states with that layer's attention weights,
    then y^{k+1} = F^k(ybar, y^k) reuses the layer's W_O, FFN and layer norms
    on the single row. Returns y^L times the classifier.
    """
    pad = states.pad if pad is None else np.asarray(pad, dtype=bool)
    batch, d = pad.shape[0], config.hidden_size
    y = params.pooler_seed.reshape(1, 1, d) + Tensor(np.zeros((batch, 1, d), dtype=get_default_dtype()))
    heads = 1 if config.variant == AttentionVariant.RPE else config.num_heads
    for k, layer in enumerate(params.layers):
        pooled = classify_attend(y, states.layers[k], layer.attention, config.variant, pad, heads)
        update = matmul(pooled, layer.attention.w_o) + layer.attention.b_o
        y = residual_block(y, update, layer)
    return matmul(y.reshape(batch, d), params.classifier_weight) + params.classifier_bias


def classify(tokens: np.ndarray, pad: Optional[np.ndarray], config: ModelConfig, params: EncoderParams,
             strategy: Optional[ClassificationStrategy] = None,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    strategy = ClassificationStrategy(strategy or config.classification)
    states = encode(tokens, pad, config, params, rng=rng)
    if strategy == ClassificationStrategy.CLS_TOKEN:
        return classify_cls(states.final, params)
    return classify_pooled(states, params, config)


def resolve_strategies(value: str) -> List[ClassificationStrategy]:
    """
    Readouts named by a CLI value: one strategy or "both".

    Both readouts are defined for every variant (pooling uses the layer's own
    attention parameters, single-head for RPE), so only unknown names are
    rejected.
    """
    if value == "both":
        return [ClassificationStrategy.CLS_TOKEN, ClassificationStrategy.POOLED]
    try:
        return [ClassificationStrategy(value)]
    except ValueError:
        known = ", ".join([s.value for s in ClassificationStrategy] + ["both"])
        raise ConfigError(f"unknown classification strategy {value!r} (expected one of: {known})") from None


def extend_max_length(params: EncoderParams, config: ModelConfig, new_length: int,
                      seed: int = 0) -> Tuple[EncoderParams, ModelConfig]:
    """
    Grow max_len. Partition variants only rebuild their masks at the new
    length; RPE reuses the clipped edge embeddings; RAB buckets already cover
    every offset. Absolute position tables grow with seeded random rows.
    """
    old_length = config.max_len
    if new_length < old_length:
        raise ConfigError(f"new length {new_length} is shorter than the current max_len {old_length}")
    new_config = config.model_copy(update={"max_len": new_length})

    position = params.position
    if position is not None and new_length > old_length:
        rng = np.random.default_rng(seed)
        extra = rng.normal(0.0, config.init_range, size=(new_length - old_length, config.hidden_size))
        grown = np.concatenate([position.data, extra.astype(position.dtype)], axis=0)
        position = Tensor(grown, requires_grad=True)
        logger.info("Extended position embeddings %d -> %d with random rows (seed %d)",
                    old_length, new_length, seed)

    if config.variant.uses_partition_mask:
        for k in range(config.num_layers):
            build_mask(new_length, k, config.partition)
        logger.info("Rebuilt partition masks at length %d; no new parameters", new_length)

    return replace(params, position=position), new_config
