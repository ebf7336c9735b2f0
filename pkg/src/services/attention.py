"""
Attention - every self-attention variant as a pure layer computation.

Inputs are batched: X is (B, l, d) and the pad mask is a boolean (B, l)
array that is True on valid positions. A 2-D X of shape (l, d) is accepted
and returned unbatched. Softmax variants push padded keys to -inf; sigmoid
variants zero padded scores before the L2 normalization. Rows of padded
queries come out as zeros.
"""

import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .config import AttentionVariant
from .errors import ShapeError, VariantContractError
from .numerics import (
    Tensor, gather_rows, get_default_dtype, l2_normalize, matmul, relative_gather,
    relative_scatter, sigmoid, softmax,
)
from .partition import PartitionMask, bucket_index

MaskLike = Union[PartitionMask, np.ndarray]
Dropout = Optional[Callable[[Tensor], Tensor]]

_OPTIONAL_FIELDS = ("w_k", "b_k", "partition", "relative", "rab_weights")

_REQUIRED: Dict[AttentionVariant, Tuple[str, ...]] = {
    AttentionVariant.MULTI_HEAD_SOFTMAX: ("w_k", "b_k"),
    AttentionVariant.PART_MASK: ("w_k", "b_k"),
    AttentionVariant.ONE_HEAD_SOFTMAX: (),
    AttentionVariant.ONE_HEAD_SIGMOID: (),
    AttentionVariant.PART_BIAS: ("partition",),
    AttentionVariant.SHATTER: ("partition",),
    AttentionVariant.RPE: ("w_k", "b_k", "relative"),
    AttentionVariant.RAB: ("w_k", "b_k", "rab_weights"),
}


@dataclass
class AttentionParams:
    """Trainable state of one attention layer; optional fields depend on the variant."""
    w_q: Tensor
    b_q: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    w_k: Optional[Tensor] = None
    b_k: Optional[Tensor] = None
    partition: Optional[Tensor] = None
    relative: Optional[Tensor] = None
    rab_weights: Optional[Tensor] = None

    _NAMES = {
        "w_q": "query.weight", "b_q": "query.bias", "w_k": "key.weight", "b_k": "key.bias",
        "w_v": "value.weight", "b_v": "value.bias", "w_o": "output.weight", "b_o": "output.bias",
        "partition": "partition_embeddings", "relative": "relative_embeddings",
        "rab_weights": "rab_weights",
    }

    @classmethod
    def init(cls, variant: AttentionVariant, d: int, n: int, rng: np.random.Generator,
             init_range: float = 0.02, rpe_rows: int = 0, rab_buckets: int = 0) -> "AttentionParams":
        dtype = get_default_dtype()

        def weight(*shape):
            return Tensor(rng.normal(0.0, init_range, size=shape).astype(dtype), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        params = cls(w_q=weight(d, d), b_q=zeros(d), w_v=weight(d, d), b_v=zeros(d),
                     w_o=weight(d, d), b_o=zeros(d))
        required = _REQUIRED[variant]
        if "w_k" in required:
            params.w_k, params.b_k = weight(d, d), zeros(d)
        if "partition" in required:
            params.partition = weight(n, d)
        if "relative" in required:
            params.relative = weight(rpe_rows, d)
        if "rab_weights" in required:
            params.rab_weights = weight(rab_buckets, n)
        return params

    def named(self) -> Dict[str, Tensor]:
        """Present tensors keyed by their checkpoint suffix."""
        return {self._NAMES[f.name]: getattr(self, f.name)
                for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_named(cls, tensors: Dict[str, Tensor]) -> "AttentionParams":
        reverse = {suffix: attr for attr, suffix in cls._NAMES.items()}
        return cls(**{reverse[suffix]: t for suffix, t in tensors.items()})

    def check(self, variant: AttentionVariant) -> None:
        """Exactly the fields the variant demands must be present."""
        required = _REQUIRED[variant]
        for name in _OPTIONAL_FIELDS:
            present = getattr(self, name) is not None
            if name in required and not present:
                raise VariantContractError(f"{variant.value} attention requires {name}")
            if name not in required and present:
                raise VariantContractError(f"{variant.value} attention must not have {name}")


def pad_mask(lengths: Sequence[int], length: int) -> np.ndarray:
    """Boolean (B, l) validity mask from per-sequence lengths."""
    return np.arange(length)[None, :] < np.asarray(lengths)[:, None]


def _batched(X: Tensor, pad: Optional[np.ndarray]) -> Tuple[Tensor, np.ndarray, bool]:
    squeeze = X.ndim == 2
    if squeeze:
        X = X.reshape(1, *X.shape)
    if pad is None:
        pad = np.ones(X.shape[:2], dtype=bool)
    pad = np.asarray(pad, dtype=bool).reshape(X.shape[:2])
    return X, pad, squeeze


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return out.reshape(*out.shape[1:]) if squeeze else out


def _project(X: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return matmul(X, weight) + bias


def _split_heads(t: Tensor, n: int) -> Tensor:
    B, l, d = t.shape
    return t.reshape(B, l, n, d // n).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    B, n, l, h = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, l, n * h)


def _key_bias(pad: np.ndarray, ndim: int) -> Tensor:
    """Additive 0 / -inf over keys, shaped to broadcast against (B, ..., l_q, l_k) logits."""
    bias = np.where(pad, 0.0, -np.inf)
    return Tensor(bias.reshape(pad.shape[0], *([1] * (ndim - 2)), pad.shape[1]))


def _key_keep(pad: np.ndarray) -> Tensor:
    return Tensor(pad[:, None, :].astype(get_default_dtype()))


def _query_keep(pad: np.ndarray) -> Tensor:
    return Tensor(pad[:, :, None].astype(get_default_dtype()))


def _mask_values(mask: MaskLike, length: int) -> np.ndarray:
    values = mask.values if isinstance(mask, PartitionMask) else np.asarray(mask)
    if values.ndim != 3 or values.shape[1:] != (length, length):
        raise ShapeError(f"mask shape {values.shape} does not match sequence length {length}")
    return values


def _check_heads(d: int, n: int) -> None:
    if n < 1 or d % n:
        raise ShapeError(f"hidden size {d} is not divisible by {n} heads")


def _finish(context: Tensor, params: AttentionParams, pad: np.ndarray, squeeze: bool) -> Tensor:
    out = _project(context, params.w_o, params.b_o) * _query_keep(pad)
    return _unbatch(out, squeeze)


def _apply_dropout(weights: Tensor, dropout: Dropout) -> Tensor:
    return dropout(weights) if dropout is not None else weights


def _multihead_weights(X: Tensor, params: AttentionParams, pad: np.ndarray, n: int,
                       extra_bias: Optional[Tensor] = None) -> Tensor:
    d = X.shape[-1]
    _check_heads(d, n)
    q = _split_heads(_project(X, params.w_q, params.b_q), n)
    k = _split_heads(_project(X, params.w_k, params.b_k), n)
    logits = matmul(q, k.swap_last()) * (1.0 / math.sqrt(d / n))
    if extra_bias is not None:
        logits = logits + extra_bias
    return softmax(logits + _key_bias(pad, 4), axis=-1)


def _values_context(weights: Tensor, X: Tensor, params: AttentionParams, n: int) -> Tensor:
    v = _split_heads(_project(X, params.w_v, params.b_v), n)
    return _merge_heads(matmul(weights, v))


def attend_multihead_softmax(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray] = None,
                             n: int = 1, *, dropout: Dropout = None) -> Tensor:
    """BERT attention: per-head softmax(Q K^T / sqrt(d/n)) V, merged and projected by W_O."""
    params.check(AttentionVariant.MULTI_HEAD_SOFTMAX)
    X, pad, squeeze = _batched(X, pad)
    weights = _apply_dropout(_multihead_weights(X, params, pad, n), dropout)
    return _finish(_values_context(weights, X, params, n), params, pad, squeeze)


def attend_part_mask(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], mask: MaskLike,
                     *, dropout: Dropout = None) -> Tensor:
    """Multi-head softmax scores multiplied elementwise by the partition mask N."""
    params.check(AttentionVariant.PART_MASK)
    X, pad, squeeze = _batched(X, pad)
    N = _mask_values(mask, X.shape[1])
    n = N.shape[0]
    weights = _multihead_weights(X, params, pad, n) * Tensor(N)
    weights = _apply_dropout(weights, dropout)
    return _finish(_values_context(weights, X, params, n), params, pad, squeeze)


def _one_head_sheet(X: Tensor, params: AttentionParams, pad: np.ndarray, use_sigmoid: bool,
                    bias: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Single l x l score sheet from Q X^T / sqrt(d); returns (sheet, Q)."""
    d = X.shape[-1]
    q = _project(X, params.w_q, params.b_q)
    logits = matmul(q, X.swap_last()) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    if use_sigmoid:
        sheet = l2_normalize(sigmoid(logits) * _key_keep(pad), axis=-1)
    else:
        sheet = softmax(logits + _key_bias(pad, 3), axis=-1)
    return sheet, q


def _broadcast_sheet(sheet: Tensor, N: np.ndarray) -> Tensor:
    B, l, _ = sheet.shape
    return sheet.reshape(B, 1, l, l) * Tensor(N)


def _one_head(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], mask: MaskLike,
              variant: AttentionVariant, dropout: Dropout) -> Tensor:
    params.check(variant)
    X, pad, squeeze = _batched(X, pad)
    N = _mask_values(mask, X.shape[1])
    n = N.shape[0]
    _check_heads(X.shape[-1], n)
    sheet, _ = _one_head_sheet(X, params, pad, use_sigmoid=variant.sigmoid_scores)
    weights = _apply_dropout(_broadcast_sheet(sheet, N), dropout)
    return _finish(_values_context(weights, X, params, n), params, pad, squeeze)


def attend_onehead_softmax(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], mask: MaskLike,
                           *, dropout: Dropout = None) -> Tensor:
    """One softmax score sheet broadcast against N, rank-3 values."""
    return _one_head(X, params, pad, mask, AttentionVariant.ONE_HEAD_SOFTMAX, dropout)


def attend_onehead_sigmoid(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], mask: MaskLike,
                           *, dropout: Dropout = None) -> Tensor:
    """A = l2norm(sigmoid(Q X^T / sqrt(d))) * N, rank-3 values; no key projection."""
    return _one_head(X, params, pad, mask, AttentionVariant.ONE_HEAD_SIGMOID, dropout)


def partition_bias(Q: Tensor, R: Tensor, mask: MaskLike) -> Tensor:
    """B[i, :] = sum_h (Q R^T)[i, h] * N[h, i, :]; works on (l, d) or (B, l, d) queries."""
    N = _mask_values(mask, Q.shape[-2])
    if R.shape != (N.shape[0], Q.shape[-1]):
        raise ShapeError(f"partition embeddings {R.shape} do not match mask {N.shape} / queries {Q.shape}")
    scores = matmul(Q, R.swap_last()).swap_last()          # (..., n, l)
    weighted = scores.reshape(*scores.shape, 1) * Tensor(N)  # (..., n, l, l)
    return weighted.sum(axis=-3)


def _partition_attention(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], mask: MaskLike,
                         variant: AttentionVariant, dropout: Dropout) -> Tensor:
    params.check(variant)
    X, pad, squeeze = _batched(X, pad)
    N = _mask_values(mask, X.shape[1])
    n = N.shape[0]
    _check_heads(X.shape[-1], n)
    R = params.partition
    q = _project(X, params.w_q, params.b_q)
    bias = partition_bias(q, R, N)
    sheet, _ = _one_head_sheet(X, params, pad, use_sigmoid=True, bias=bias)
    weights = _apply_dropout(_broadcast_sheet(sheet, N), dropout)
    context = _values_context(weights, X, params, n)
    if variant == AttentionVariant.SHATTER:
        part_weights = weights.sum(axis=-1).swap_last()      # (B, l, n)
        part_values = matmul(R, params.w_v)                  # (n, d)
        context = context + matmul(part_weights, part_values)
    return _finish(context, params, pad, squeeze)


def attend_part_bias(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], mask: MaskLike,
                     *, dropout: Dropout = None) -> Tensor:
    """One-head sigmoid attention with the partition bias B added to the scores."""
    return _partition_attention(X, params, pad, mask, AttentionVariant.PART_BIAS, dropout)


def attend_shatter(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], mask: MaskLike,
                   *, dropout: Dropout = None) -> Tensor:
    """Partition-bias attention plus the partition-value term A_part (R W_V)."""
    return _partition_attention(X, params, pad, mask, AttentionVariant.SHATTER, dropout)


def relative_index(length: int, clip: int) -> np.ndarray:
    """index[i, j] = clip(j - i) + c - 1, a row of the (2c-1)-row relative table."""
    positions = np.arange(length)
    offsets = np.clip(positions[None, :] - positions[:, None], -(clip - 1), clip - 1)
    return offsets + clip - 1


def attend_rpe(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray] = None,
               clip: Optional[int] = None, *, dropout: Dropout = None) -> Tensor:
    """
    Relative position embeddings: the pair (i, j) uses x_j + R[clip(j - i)] for
    key and value. Relative scores Q K_rel^T are gathered onto the absolute
    axis and the weights are scattered back onto the relative axis for V_rel.
    """
    params.check(AttentionVariant.RPE)
    X, pad, squeeze = _batched(X, pad)
    rows = params.relative.shape[0]
    if rows % 2 == 0:
        raise ShapeError(f"relative table needs 2c-1 rows, got {rows}")
    clip = clip or (rows + 1) // 2
    if 2 * clip - 1 != rows:
        raise ShapeError(f"relative table has {rows} rows, expected {2 * clip - 1} for clip {clip}")
    d = X.shape[-1]
    index = relative_index(X.shape[1], clip)

    q = _project(X, params.w_q, params.b_q)
    k = _project(X, params.w_k, params.b_k)
    v = _project(X, params.w_v, params.b_v)
    k_rel = matmul(params.relative, params.w_k)
    v_rel = matmul(params.relative, params.w_v)

    logits = matmul(q, k.swap_last()) + relative_gather(matmul(q, k_rel.swap_last()), index)
    weights = softmax(logits * (1.0 / math.sqrt(d)) + _key_bias(pad, 3), axis=-1)
    weights = _apply_dropout(weights, dropout)
    context = matmul(weights, v) + matmul(relative_scatter(weights, index, rows), v_rel)
    return _finish(context, params, pad, squeeze)


def rab_bias(rab_weights: Tensor, boundaries: Sequence[float], length: int) -> Tensor:
    """B[h, i, j] = W_B[g(j - i), h] as an (n, l, l) tensor."""
    if len(boundaries) - 1 != rab_weights.shape[0]:
        raise ShapeError(
            f"{len(boundaries) - 1} buckets from boundaries but rab_weights has {rab_weights.shape[0]} rows")
    positions = np.arange(length)
    buckets = bucket_index(boundaries, positions[None, :] - positions[:, None])
    return gather_rows(rab_weights, buckets).transpose(2, 0, 1)


def attend_rab(X: Tensor, params: AttentionParams, pad: Optional[np.ndarray], boundaries: Sequence[float],
               *, dropout: Dropout = None) -> Tensor:
    """Multi-head softmax with a learnt per-bucket, per-head bias added to the logits."""
    params.check(AttentionVariant.RAB)
    X, pad, squeeze = _batched(X, pad)
    n = params.rab_weights.shape[1]
    bias = rab_bias(params.rab_weights, boundaries, X.shape[1])
    weights = _apply_dropout(_multihead_weights(X, params, pad, n, extra_bias=bias), dropout)
    return _finish(_values_context(weights, X, params, n), params, pad, squeeze)


def attend(X: Tensor, params: AttentionParams, variant: AttentionVariant, pad: Optional[np.ndarray], *,
           heads: int, mask: Optional[MaskLike] = None, clip: Optional[int] = None,
           boundaries: Optional[Sequence[float]] = None, dropout: Dropout = None) -> Tensor:
    """Dispatch to the variant's layer computation."""
    if variant == AttentionVariant.MULTI_HEAD_SOFTMAX:
        return attend_multihead_softmax(X, params, pad, heads, dropout=dropout)
    if variant == AttentionVariant.RPE:
        return attend_rpe(X, params, pad, clip, dropout=dropout)
    if variant == AttentionVariant.RAB:
        return attend_rab(X, params, pad, boundaries, dropout=dropout)
    if mask is None:
        raise VariantContractError(f"{variant.value} attention needs a partition mask")
    handlers = {
        AttentionVariant.PART_MASK: attend_part_mask,
        AttentionVariant.ONE_HEAD_SOFTMAX: attend_onehead_softmax,
        AttentionVariant.ONE_HEAD_SIGMOID: attend_onehead_sigmoid,
        AttentionVariant.PART_BIAS: attend_part_bias,
        AttentionVariant.SHATTER: attend_shatter,
    }
    return handlers[variant](X, params, pad, mask, dropout=dropout)


def classify_attend(y: Tensor, X: Tensor, params: AttentionParams, variant: AttentionVariant,
                    pad: Optional[np.ndarray], heads: int) -> Tensor:
    """
    Weighted average of one layer's states for the pooled classification query.

    Softmax family with a key projection pools with multi-head softmax; the
    one-head variants compute a single weight row (softmax, or L2-normalized
    sigmoid for the sigmoid family) shared by all value blocks. The pooled
    query has no sequence position, so no partition mask or bias applies.
    """
    X, pad, squeeze = _batched(X, pad)
    if y.ndim == 2:
        y = y.reshape(1, *y.shape)
    B, l, d = X.shape
    if y.shape[0] != B:
        y = y + Tensor(np.zeros((B, 1, d), dtype=get_default_dtype()))
    q = _project(y, params.w_q, params.b_q)

    if variant.has_key_projection:
        _check_heads(d, heads)
        qh = _split_heads(q, heads)
        k = _split_heads(_project(X, params.w_k, params.b_k), heads)
        logits = matmul(qh, k.swap_last()) * (1.0 / math.sqrt(d / heads))
        weights = softmax(logits + _key_bias(pad, 4), axis=-1)
        return _unbatch(_values_context(weights, X, params, heads), squeeze)

    logits = matmul(q, X.swap_last()) * (1.0 / math.sqrt(d))
    if variant.sigmoid_scores:
        row = l2_normalize(sigmoid(logits) * _key_keep(pad), axis=-1)
    else:
        row = softmax(logits + _key_bias(pad, 3), axis=-1)
    weights = row.reshape(B, 1, 1, l)
    return _unbatch(_values_context(weights, X, params, heads), squeeze)
