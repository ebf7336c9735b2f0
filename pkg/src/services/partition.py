"""
Partition - soft partition of unity over relative positions.

Parts 0..D cover x >= 0 with the Bernstein basis of degree D evaluated at
u(x); parts D+1..n-1 mirror them onto x < 0. Every relative offset gets a
weight vector that is nonnegative and sums to one. Masks N[h, i, j] = f_h(j - i)
are built from a per-offset table, so a mask for a longer sequence contains
the shorter one bit-for-bit.
"""

import logging
import math
import threading
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .config import PartitionSpec
from .errors import ConfigError

logger = logging.getLogger(__name__)

__all__ = [
    "PartitionSpec", "PartitionMask", "bernstein_basis", "u_transform", "layer_schedule",
    "eval_parts", "build_mask", "hard_bucket_parts", "build_bucket_mask", "bucket_index",
    "t5_bucket_boundaries", "partition_curve_rows",
]


@dataclass(frozen=True)
class PartitionMask:
    """Constant n x l x l mask for one layer."""
    values: np.ndarray
    layer: int
    spec: PartitionSpec

    @property
    def num_parts(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[-1]


def bernstein_basis(degree: int, u: float) -> np.ndarray:
    """B_v(u) = C(D, v) u^v (1-u)^(D-v) for v = 0..D; u is clamped into [0, 1]."""
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    u = min(max(float(u), 0.0), 1.0)
    return np.array(
        [math.comb(degree, v) * u ** v * (1.0 - u) ** (degree - v) for v in range(degree + 1)],
        dtype=np.float64,
    )


def u_transform(x: float, alpha: float, beta: float) -> float:
    """
    u = ln(e^(beta x) (1 - e^alpha) + e^alpha) / alpha, evaluated as a
    log-sum-exp so large beta*x does not underflow. Maps [0, inf) onto [0, 1].
    """
    if alpha >= 0 or beta >= 0:
        raise ValueError(f"alpha and beta must be negative (got alpha={alpha}, beta={beta})")
    if x < 0:
        raise ValueError(f"relative distance must be >= 0, got {x}")
    if x == 0:
        return 0.0
    log_mix = np.logaddexp(beta * x + math.log1p(-math.exp(alpha)), alpha)
    return min(max(float(log_mix) / alpha, 0.0), 1.0)


def layer_schedule(k: int, num_layers: int, degree: int) -> Tuple[float, float]:
    """alpha = -((k+1)/L) D, beta = -(1/D) (D/12)^((k+1)/L); D = 0 falls back to (-(k+1)/L, -1)."""
    if not 0 <= k < num_layers:
        raise ValueError(f"layer index {k} outside [0, {num_layers})")
    ratio = (k + 1) / num_layers
    if degree == 0:
        return -ratio, -1.0
    alpha = -ratio * degree
    beta = -(1.0 / degree) * (degree / 12.0) ** ratio
    return alpha, beta


def _layer_params(k: int, spec: PartitionSpec) -> Tuple[float, float]:
    alpha, beta = layer_schedule(k, spec.num_layers, spec.degree)
    if spec.alphas is not None:
        alpha = spec.alphas[k]
    if spec.betas is not None:
        beta = spec.betas[k]
    return alpha, beta


def eval_parts(x: float, k: int, spec: PartitionSpec) -> np.ndarray:
    """Weights of all n parts at signed offset x; right half owns x >= 0."""
    alpha, beta = _layer_params(k, spec)
    half = spec.degree + 1
    weights = np.zeros(spec.n, dtype=np.float64)
    if x >= 0:
        weights[:half] = bernstein_basis(spec.degree, u_transform(x, alpha, beta))
    else:
        weights[half:] = bernstein_basis(spec.degree, u_transform(-x, alpha, beta))
    return weights


class _MaskCache:
    """Per-offset tables and masks keyed by (spec hash, layer[, length])."""

    def __init__(self):
        self._lock = threading.Lock()
        self._tables: Dict[Tuple[str, int], np.ndarray] = {}
        self._masks: Dict[Tuple[str, int, int], PartitionMask] = {}

    def offset_table(self, max_offset: int, k: int, spec: PartitionSpec) -> np.ndarray:
        """(2*max_offset + 1) x n table; row r holds eval_parts(r - max_offset)."""
        key = (spec.cache_key(), k)
        table = self._tables.get(key)
        if table is None or (table.shape[0] - 1) // 2 < max_offset:
            if spec.degree == 0:
                logger.warning("Degree-0 partition (n=2) at layer %d: alpha=-(k+1)/L, beta=-1", k)
            table = np.stack([eval_parts(x, k, spec) for x in range(-max_offset, max_offset + 1)])
            with self._lock:
                current = self._tables.get(key)
                if current is None or current.shape[0] < table.shape[0]:
                    self._tables[key] = table
        return table

    def mask(self, length: int, k: int, spec: PartitionSpec) -> PartitionMask:
        key = (spec.cache_key(), k, length)
        cached = self._masks.get(key)
        if cached is not None:
            return cached
        table = self.offset_table(length - 1, k, spec)
        centre = (table.shape[0] - 1) // 2
        positions = np.arange(length)
        offsets = positions[None, :] - positions[:, None]
        values = np.ascontiguousarray(np.transpose(table[offsets + centre], (2, 0, 1)))
        values.setflags(write=False)
        mask = PartitionMask(values=values, layer=k, spec=spec)
        logger.debug("Built partition mask n=%d l=%d layer=%d", spec.n, length, k)
        with self._lock:
            self._masks.setdefault(key, mask)
        return self._masks[key]

    def clear(self) -> None:
        with self._lock:
            self._tables.clear()
            self._masks.clear()


mask_cache = _MaskCache()


def build_mask(length: int, k: int, spec: PartitionSpec) -> PartitionMask:
    """N[h, i, j] = f_h(j - i) for layer k; cached per (spec, layer, length)."""
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    if not 0 <= k < spec.num_layers:
        raise ConfigError(f"layer {k} outside partition spec with {spec.num_layers} layers")
    return mask_cache.mask(length, k, spec)


def hard_bucket_parts(boundaries: Sequence[float], x: float) -> np.ndarray:
    """Indicator of the bucket g with b_g <= x < b_{g+1}."""
    weights = np.zeros(len(boundaries) - 1, dtype=np.float64)
    weights[int(bucket_index(boundaries, np.asarray(x)))] = 1.0
    return weights


def bucket_index(boundaries: Sequence[float], x: np.ndarray) -> np.ndarray:
    """Vectorized bucket lookup (half-open on the right)."""
    inner = np.asarray(boundaries[1:-1], dtype=np.float64)
    return np.searchsorted(inner, x, side="right")


def build_bucket_mask(length: int, boundaries: Sequence[float]) -> np.ndarray:
    """Hard partition mask m x l x l with N[g, i, j] = 1 iff j - i falls in bucket g."""
    positions = np.arange(length)
    buckets = bucket_index(boundaries, positions[None, :] - positions[:, None])
    m = len(boundaries) - 1
    return (np.arange(m)[:, None, None] == buckets[None, :, :]).astype(np.float64)


def t5_bucket_boundaries(num_buckets: int = 32, max_distance: int = 128) -> List[float]:
    """
    Boundaries for T5's bidirectional log-spaced buckets.

    Each half gets num_buckets / 2 buckets: exact offsets up to half of them,
    then logarithmic bins up to max_distance. Returns b_0=-inf < ... < b_m=inf.
    """
    if num_buckets < 2:
        return [-math.inf, math.inf]
    half = num_buckets // 2
    max_exact = max(half // 2, 1)

    def half_bucket(distance: int) -> int:
        if distance < max_exact:
            return distance
        scaled = math.log(distance / max_exact) / math.log(max(max_distance / max_exact, 1.0 + 1e-9))
        return min(max_exact + int(scaled * (half - max_exact)), half - 1)

    starts = [0]
    for distance in range(1, max_distance + 1):
        if half_bucket(distance) > half_bucket(distance - 1):
            starts.append(distance)
    inner = sorted({-float(s) for s in starts[1:]} | {0.0} | {float(s) for s in starts[1:]})
    return [-math.inf] + inner + [math.inf]


def partition_curve_rows(spec: PartitionSpec, x_min: int = -64, x_max: int = 64) -> Iterator[Tuple[int, int, int, float]]:
    """(layer, part, x, weight) samples of every f_h on integer x."""
    max_offset = max(abs(x_min), abs(x_max))
    for k in range(spec.num_layers):
        table = mask_cache.offset_table(max_offset, k, spec)
        centre = (table.shape[0] - 1) // 2
        for h in range(spec.n):
            for x in range(x_min, x_max + 1):
                yield k, h, x, float(table[x + centre, h])
