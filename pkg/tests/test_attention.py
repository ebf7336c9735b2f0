import math
from dataclasses import replace

import numpy as np
import pytest

from src.services import attention as attention_module
from src.services.attention import (
    AttentionParams, attend, attend_multihead_softmax, attend_onehead_sigmoid, attend_part_mask,
    attend_rab, attend_rpe, attend_shatter, classify_attend, pad_mask, partition_bias, rab_bias,
)
from src.services.config import AttentionVariant, PartitionSpec
from src.services.errors import ShapeError, VariantContractError
from src.services.numerics import Tensor, finite_diff_check, precision, tensor
from src.services.partition import build_mask, t5_bucket_boundaries

V = AttentionVariant
BOUNDARIES = [-math.inf, -2.0, 0.0, 1.0, math.inf]
MASKED_VARIANTS = [V.PART_MASK, V.ONE_HEAD_SOFTMAX, V.ONE_HEAD_SIGMOID, V.PART_BIAS, V.SHATTER]


def _params(variant, d, n, rng, clip=3, buckets=4, scale=0.5):
    params = AttentionParams.init(variant, d, n, rng, init_range=scale, rpe_rows=2 * clip - 1, rab_buckets=buckets)
    for name in ("b_q", "b_k", "b_v", "b_o"):
        t = getattr(params, name)
        if t is not None:
            t.data[:] = rng.normal(0.0, 0.3, size=t.shape)
    return params


def _np(params):
    return {name: (t.data if t is not None else None) for name, t in params.__dict__.items()}


def _softmax_row(logits):
    out = np.zeros_like(logits)
    finite = np.isfinite(logits)
    if finite.any():
        e = np.exp(logits[finite] - logits[finite].max())
        out[finite] = e / e.sum()
    return out


def _finish(ctx, p, pad):
    return (ctx @ p["w_o"] + p["b_o"]) * pad[:, None]


def _bucket(x):
    for g in range(len(BOUNDARIES) - 1):
        if BOUNDARIES[g] <= x < BOUNDARIES[g + 1]:
            return g
    raise AssertionError(x)


def oracle_multihead(x, pad, p, n, mask=None, rab=None):
    l, d = x.shape
    hd = d // n
    q, k, v = x @ p["w_q"] + p["b_q"], x @ p["w_k"] + p["b_k"], x @ p["w_v"] + p["b_v"]
    ctx = np.zeros((l, d))
    for h in range(n):
        cols = slice(h * hd, (h + 1) * hd)
        for i in range(l):
            logits = np.full(l, -np.inf)
            for j in range(l):
                if pad[j]:
                    logits[j] = np.dot(q[i, cols], k[j, cols]) / math.sqrt(hd)
                    if rab is not None:
                        logits[j] += rab[_bucket(j - i), h]
            a = _softmax_row(logits)
            for j in range(l):
                weight = a[j] * (mask[h, i, j] if mask is not None else 1.0)
                ctx[i, cols] += weight * v[j, cols]
    return _finish(ctx, p, pad)


def oracle_one_head(x, pad, p, N, use_sigmoid, with_bias=False, with_values=False):
    l, d = x.shape
    n = N.shape[0]
    hd = d // n
    R = p["partition"]
    q, v = x @ p["w_q"] + p["b_q"], x @ p["w_v"] + p["b_v"]
    sheet = np.zeros((l, l))
    for i in range(l):
        scores = np.zeros(l)
        for j in range(l):
            scores[j] = np.dot(q[i], x[j]) / math.sqrt(d)
            if with_bias:
                scores[j] += sum(np.dot(q[i], R[h]) * N[h, i, j] for h in range(n))
        if use_sigmoid:
            sig = np.array([1.0 / (1.0 + math.exp(-scores[j])) if pad[j] else 0.0 for j in range(l)])
            sheet[i] = sig / math.sqrt(np.sum(sig * sig) + 1e-12)
        else:
            sheet[i] = _softmax_row(np.where(pad, scores, -np.inf))
    ctx = np.zeros((l, d))
    for h in range(n):
        cols = slice(h * hd, (h + 1) * hd)
        for i in range(l):
            for j in range(l):
                ctx[i, cols] += sheet[i, j] * N[h, i, j] * v[j, cols]
    if with_values:
        part_values = R @ p["w_v"]
        for i in range(l):
            for h in range(n):
                ctx[i] += sum(sheet[i, j] * N[h, i, j] for j in range(l)) * part_values[h]
    return _finish(ctx, p, pad)


def oracle_rpe(x, pad, p, clip):
    l, d = x.shape
    R = p["relative"]
    q = x @ p["w_q"] + p["b_q"]
    ctx = np.zeros((l, d))
    for i in range(l):
        logits = np.full(l, -np.inf)
        rows = [min(max(j - i, -(clip - 1)), clip - 1) + clip - 1 for j in range(l)]
        for j in range(l):
            if pad[j]:
                key = (x[j] + R[rows[j]]) @ p["w_k"] + p["b_k"]
                logits[j] = np.dot(q[i], key) / math.sqrt(d)
        a = _softmax_row(logits)
        for j in range(l):
            ctx[i] += a[j] * ((x[j] + R[rows[j]]) @ p["w_v"] + p["b_v"])
    return _finish(ctx, p, pad)


def oracle(variant, x, pad, p, n, N, clip):
    if variant == V.MULTI_HEAD_SOFTMAX:
        return oracle_multihead(x, pad, p, n)
    if variant == V.PART_MASK:
        return oracle_multihead(x, pad, p, n, mask=N)
    if variant == V.RAB:
        return oracle_multihead(x, pad, p, n, rab=p["rab_weights"])
    if variant == V.RPE:
        return oracle_rpe(x, pad, p, clip)
    if variant == V.ONE_HEAD_SOFTMAX:
        return oracle_one_head(x, pad, p, N, use_sigmoid=False)
    if variant == V.ONE_HEAD_SIGMOID:
        return oracle_one_head(x, pad, p, N, use_sigmoid=True)
    if variant == V.PART_BIAS:
        return oracle_one_head(x, pad, p, N, use_sigmoid=True, with_bias=True)
    return oracle_one_head(x, pad, p, N, use_sigmoid=True, with_bias=True, with_values=True)


@pytest.mark.parametrize("variant", list(AttentionVariant))
def test_matches_per_pair_oracle(f64, variant):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        l, d, n = int(rng.integers(1, 7)), 8, int(rng.choice([2, 4]))
        clip = int(rng.integers(1, 5))
        params = _params(variant, d, n, rng, clip=clip)
        x = rng.normal(size=(2, l, d))
        pad = np.stack([np.arange(l) < rng.integers(1, l + 1) for _ in range(2)])
        mask = build_mask(l, seed % 2, PartitionSpec(n=n, num_layers=2))

        out = attend(tensor(x), params, variant, pad, heads=n, mask=mask, clip=clip, boundaries=BOUNDARIES).data
        p = _np(params)
        for b in range(2):
            expected = oracle(variant, x[b], pad[b], p, n, mask.values, clip)
            np.testing.assert_allclose(out[b], expected, atol=1e-10, rtol=0)


@pytest.mark.parametrize("variant", list(AttentionVariant))
def test_gradients_match_finite_differences(f64, variant):
    rng = np.random.default_rng(11)
    l, d, n = 8, 16, 4
    boundaries = t5_bucket_boundaries(4, 4)
    params = _params(variant, d, n, rng, clip=4, buckets=len(boundaries) - 1)
    x = tensor(rng.normal(size=(2, l, d)), requires_grad=True)
    pad = pad_mask([8, 6], l)
    mask = build_mask(l, 1, PartitionSpec(n=n, num_layers=2))
    weights = rng.normal(size=(2, l, d))

    def loss():
        out = attend(x, params, variant, pad, heads=n, mask=mask, clip=4, boundaries=boundaries)
        return (out * Tensor(weights)).sum()

    tensors = [x] + list(params.named().values())
    assert finite_diff_check(loss, tensors, max_coords=12, seed=3) < 1e-4


@pytest.mark.parametrize("variant", MASKED_VARIANTS + [V.RPE, V.RAB])
def test_content_shift_invariance(variant):
    rng = np.random.default_rng(5)
    l, d, n, m, shift = 6, 8, 4, 3, 2
    params = _params(variant, d, n, rng, clip=4, scale=0.3)
    content = rng.normal(size=(m, d))
    x = rng.normal(size=(2, l, d))
    x[0, :m] = content
    x[1, shift:shift + m] = content
    pad = np.zeros((2, l), dtype=bool)
    pad[0, :m] = True
    pad[1, shift:shift + m] = True
    mask = build_mask(l, 0, PartitionSpec(n=n, num_layers=1))

    out = attend(tensor(x), params, variant, pad, heads=n, mask=mask, clip=4, boundaries=BOUNDARIES).data
    np.testing.assert_allclose(out[0, :m], out[1, shift:shift + m], atol=1e-5, rtol=0)


def test_single_position_returns_value_projection(f64):
    rng = np.random.default_rng(0)
    params = _params(V.MULTI_HEAD_SOFTMAX, 4, 2, rng)
    x = rng.normal(size=(1, 4))
    out = attend_multihead_softmax(tensor(x), params, None, 2).data
    p = _np(params)
    np.testing.assert_allclose(out, (x @ p["w_v"] + p["b_v"]) @ p["w_o"] + p["b_o"], atol=1e-12)


def test_multihead_permutation_equivariance(f64):
    rng = np.random.default_rng(1)
    params = _params(V.MULTI_HEAD_SOFTMAX, 8, 2, rng)
    x = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    out = attend_multihead_softmax(tensor(x), params, None, 2).data
    permuted = attend_multihead_softmax(tensor(x[perm]), params, None, 2).data
    np.testing.assert_allclose(permuted, out[perm], atol=1e-12)


def test_part_mask_with_ones_equals_multihead(f64):
    rng = np.random.default_rng(2)
    params = _params(V.PART_MASK, 8, 4, rng)
    x = tensor(rng.normal(size=(2, 5, 8)))
    pad = pad_mask([5, 3], 5)
    masked = attend_part_mask(x, params, pad, np.ones((4, 5, 5))).data
    plain = attend_multihead_softmax(x, params, pad, 4).data
    np.testing.assert_allclose(masked, plain, atol=1e-12)


def test_part_mask_hard_buckets_restrict_heads(f64):
    rng = np.random.default_rng(3)
    l, d, n = 5, 8, 4
    params = _params(V.PART_MASK, d, n, rng)
    params.w_o.data[:] = np.eye(d)
    params.b_o.data[:] = 0.0
    buckets = np.zeros((n, l, l))
    buckets[0] = np.eye(l)
    x = rng.normal(size=(l, d))
    out = attend_part_mask(tensor(x), params, None, buckets).data
    v = x @ params.w_v.data + params.b_v.data
    np.testing.assert_allclose(out[:, d // n:], 0.0, atol=1e-12)
    weights = attention_module._multihead_weights(tensor(x).reshape(1, l, d), params, np.ones((1, l), bool), n)
    diag = np.diagonal(weights.data[0, 0])
    np.testing.assert_allclose(out[:, :d // n], diag[:, None] * v[:, :d // n], atol=1e-12)


def test_shared_softmax_sheet_row_mass_is_one(f64):
    rng = np.random.default_rng(4)
    l, d, n = 6, 8, 4
    params = _params(V.ONE_HEAD_SOFTMAX, d, n, rng)
    pad = pad_mask([6, 4], l)
    mask = build_mask(l, 0, PartitionSpec(n=n, num_layers=1))
    x = tensor(rng.normal(size=(2, l, d)))
    sheet, _ = attention_module._one_head_sheet(x, params, pad, use_sigmoid=False)
    weights = attention_module._broadcast_sheet(sheet, mask.values).data
    mass = weights.sum(axis=(1, 3))
    np.testing.assert_allclose(mass[0], 1.0, atol=1e-9)
    np.testing.assert_allclose(mass[1, :4], 1.0, atol=1e-9)


def test_part_mask_per_head_row_mass_at_most_one(f64):
    rng = np.random.default_rng(4)
    l, d, n = 6, 8, 4
    params = _params(V.PART_MASK, d, n, rng)
    pad = pad_mask([6, 4], l)
    mask = build_mask(l, 0, PartitionSpec(n=n, num_layers=1))
    x = tensor(rng.normal(size=(2, l, d)))
    weights = attention_module._multihead_weights(x, params, pad, n).data * mask.values
    per_head = weights.sum(axis=3)
    assert np.all(per_head >= 0.0)
    assert np.all(per_head <= 1.0 + 1e-12)


def test_part_mask_row_mass_is_one_when_heads_share_scores(f64):
    rng = np.random.default_rng(5)
    l, d, n = 6, 8, 4
    params = _params(V.PART_MASK, d, n, rng)
    params.w_q.data[:] = 0.0
    params.b_q.data[:] = 0.0
    mask = build_mask(l, 0, PartitionSpec(n=n, num_layers=1))
    x = tensor(rng.normal(size=(1, l, d)))
    weights = attention_module._multihead_weights(x, params, pad_mask([l], l), n).data * mask.values
    np.testing.assert_allclose(weights.sum(axis=(1, 3)), 1.0, atol=1e-9)


def test_sigmoid_padded_keys_do_not_leak(f64):
    rng = np.random.default_rng(6)
    params = _params(V.ONE_HEAD_SIGMOID, 8, 2, rng)
    mask = build_mask(5, 0, PartitionSpec(n=2, num_layers=1))
    pad = pad_mask([3], 5)
    x = rng.normal(size=(1, 5, 8))
    changed = x.copy()
    changed[0, 3:] = rng.normal(size=(2, 8)) * 10.0
    first = attend_onehead_sigmoid(tensor(x), params, pad, mask).data
    second = attend_onehead_sigmoid(tensor(changed), params, pad, mask).data
    np.testing.assert_allclose(first[0, :3], second[0, :3], atol=1e-12)
    assert np.all(first[0, 3:] == 0.0)


def test_sigmoid_constant_scores_normalize_to_inverse_sqrt_length(f64):
    rng = np.random.default_rng(7)
    params = _params(V.ONE_HEAD_SIGMOID, 8, 2, rng)
    params.w_q.data[:] = 0.0
    params.b_q.data[:] = 0.0
    x = tensor(rng.normal(size=(1, 4, 8)))
    sheet, _ = attention_module._one_head_sheet(x, params, pad_mask([3], 4), use_sigmoid=True)
    np.testing.assert_allclose(sheet.data[0, :, :3], 1.0 / math.sqrt(3), atol=1e-9)
    assert np.all(sheet.data[0, :, 3] == 0.0)


def test_onehead_softmax_uniform_rows(f64):
    rng = np.random.default_rng(8)
    params = _params(V.ONE_HEAD_SOFTMAX, 8, 2, rng)
    row = rng.normal(size=8)
    x = tensor(np.tile(row, (1, 4, 1)))
    sheet, _ = attention_module._one_head_sheet(x, params, np.ones((1, 4), bool), use_sigmoid=False)
    np.testing.assert_allclose(sheet.data, 0.25, atol=1e-12)


def test_partition_bias_examples(f64):
    rng = np.random.default_rng(9)
    l, d, n = 5, 8, 4
    mask = build_mask(l, 0, PartitionSpec(n=n, num_layers=1))
    R = rng.normal(size=(n, d))
    np.testing.assert_array_equal(partition_bias(tensor(np.zeros((l, d))), tensor(R), mask).data, 0.0)

    ones = partition_bias(tensor(np.full((l, d), 1.0 / d)), tensor(np.ones((n, d))), mask).data
    np.testing.assert_allclose(ones, 1.0, atol=1e-12)

    Q = rng.normal(size=(l, d))
    out = partition_bias(tensor(Q), tensor(R), mask).data
    expected = np.zeros((l, l))
    for h in range(n):
        for i in range(l):
            for j in range(l):
                expected[i, j] += np.dot(Q[i], R[h]) * mask.values[h, i, j]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_partition_bias_rejects_mismatched_embeddings(f64):
    mask = build_mask(3, 0, PartitionSpec(n=4, num_layers=1))
    with pytest.raises(ShapeError):
        partition_bias(tensor(np.ones((3, 8))), tensor(np.ones((2, 8))), mask)


def test_shatter_with_zero_partition_equals_onehead_sigmoid(f64):
    rng = np.random.default_rng(10)
    params = _params(V.SHATTER, 8, 4, rng)
    params.partition.data[:] = 0.0
    mask = build_mask(5, 1, PartitionSpec(n=4, num_layers=2))
    x = tensor(rng.normal(size=(2, 5, 8)))
    pad = pad_mask([5, 2], 5)
    shatter = attend_shatter(x, params, pad, mask).data
    sigmoid = attend_onehead_sigmoid(x, replace(params, partition=None), pad, mask).data
    np.testing.assert_allclose(shatter, sigmoid, atol=1e-12)


def test_shatter_zero_mask_gives_zero_output(f64):
    rng = np.random.default_rng(11)
    params = AttentionParams.init(V.SHATTER, 8, 4, rng, init_range=0.5)
    out = attend_shatter(tensor(rng.normal(size=(4, 8))), params, None, np.zeros((4, 4, 4))).data
    np.testing.assert_array_equal(out, 0.0)


def test_rpe_with_zero_table_equals_single_head(f64):
    rng = np.random.default_rng(12)
    params = _params(V.RPE, 8, 1, rng, clip=3)
    params.relative.data[:] = 0.0
    x = tensor(rng.normal(size=(2, 5, 8)))
    pad = pad_mask([5, 3], 5)
    rpe = attend_rpe(x, params, pad, 3).data
    plain = attend_multihead_softmax(x, replace(params, relative=None), pad, 1).data
    np.testing.assert_allclose(rpe, plain, atol=1e-12)


def test_rpe_rejects_bad_table_shape(f64):
    rng = np.random.default_rng(13)
    params = AttentionParams.init(V.RPE, 8, 1, rng, rpe_rows=4)
    with pytest.raises(ShapeError):
        attend_rpe(tensor(rng.normal(size=(3, 8))), params)
    params = AttentionParams.init(V.RPE, 8, 1, rng, rpe_rows=5)
    with pytest.raises(ShapeError):
        attend_rpe(tensor(rng.normal(size=(3, 8))), params, None, clip=2)


def test_rab_with_zero_or_single_bucket_equals_multihead(f64):
    rng = np.random.default_rng(14)
    x = tensor(rng.normal(size=(2, 5, 8)))
    pad = pad_mask([5, 4], 5)
    params = _params(V.RAB, 8, 2, rng)
    baseline = attend_multihead_softmax(x, replace(params, rab_weights=None), pad, 2).data

    params.rab_weights.data[:] = 0.0
    np.testing.assert_allclose(attend_rab(x, params, pad, BOUNDARIES).data, baseline, atol=1e-12)

    single = replace(params, rab_weights=tensor(rng.normal(size=(1, 2))))
    np.testing.assert_allclose(attend_rab(x, single, pad, [-math.inf, math.inf]).data, baseline, atol=1e-12)


def test_rab_bias_layout_and_boundary_mismatch(f64):
    weights = tensor(np.arange(8.0).reshape(4, 2))
    bias = rab_bias(weights, BOUNDARIES, 3).data
    assert bias.shape == (2, 3, 3)
    assert bias[1, 0, 2] == weights.data[3, 1]
    assert bias[0, 2, 0] == weights.data[1, 0]
    with pytest.raises(ShapeError):
        rab_bias(weights, [-math.inf, 0.0, math.inf], 3)


def test_classify_attend_identical_rows(f64):
    rng = np.random.default_rng(15)
    params = _params(V.MULTI_HEAD_SOFTMAX, 8, 2, rng)
    row = rng.normal(size=8)
    x = tensor(np.tile(row, (4, 1)))
    y = tensor(rng.normal(size=(1, 8)))
    out = classify_attend(y, x, params, V.MULTI_HEAD_SOFTMAX, None, 2).data
    np.testing.assert_allclose(out[0], row @ params.w_v.data + params.b_v.data, atol=1e-12)

    single = classify_attend(y, tensor(row[None, :]), params, V.MULTI_HEAD_SOFTMAX, None, 2).data
    np.testing.assert_allclose(single[0], row @ params.w_v.data + params.b_v.data, atol=1e-12)


def test_classify_attend_sigmoid_family_uniform_weights(f64):
    rng = np.random.default_rng(16)
    params = _params(V.SHATTER, 8, 4, rng)
    params.w_q.data[:] = 0.0
    params.b_q.data[:] = 0.0
    x = rng.normal(size=(5, 8))
    out = classify_attend(tensor(rng.normal(size=(1, 8))), tensor(x), params, V.SHATTER, None, 4).data
    values = x @ params.w_v.data + params.b_v.data
    np.testing.assert_allclose(out[0], values.sum(axis=0) / math.sqrt(5), atol=1e-9)


def test_classify_attend_ignores_padded_rows(f64):
    rng = np.random.default_rng(17)
    params = _params(V.ONE_HEAD_SOFTMAX, 8, 2, rng)
    x = rng.normal(size=(1, 5, 8))
    changed = x.copy()
    changed[0, 4] += 5.0
    pad = pad_mask([4], 5)
    y = tensor(rng.normal(size=(1, 8)))
    first = classify_attend(y, tensor(x), params, V.ONE_HEAD_SOFTMAX, pad, 2).data
    second = classify_attend(y, tensor(changed), params, V.ONE_HEAD_SOFTMAX, pad, 2).data
    np.testing.assert_allclose(first, second, atol=1e-12)


def test_variant_contract():
    rng = np.random.default_rng(18)
    shatter = AttentionParams.init(V.SHATTER, 8, 4, rng)
    assert shatter.w_k is None and shatter.partition is not None
    assert "partition_embeddings" in shatter.named() and "key.weight" not in shatter.named()
    with pytest.raises(VariantContractError):
        shatter.check(V.MULTI_HEAD_SOFTMAX)
    with pytest.raises(VariantContractError):
        attend_shatter(tensor(np.ones((3, 8))), replace(shatter, partition=None), None, np.ones((4, 3, 3)))

    sigmoid = AttentionParams.init(V.ONE_HEAD_SIGMOID, 8, 4, rng)
    with_key = replace(sigmoid, w_k=tensor(np.eye(8)), b_k=tensor(np.zeros(8)))
    with pytest.raises(VariantContractError):
        attend_onehead_sigmoid(tensor(np.ones((3, 8))), with_key, None, np.ones((4, 3, 3)))
    with pytest.raises(VariantContractError):
        attend(tensor(np.ones((3, 8))), sigmoid, V.ONE_HEAD_SIGMOID, None, heads=4)


def test_named_round_trip():
    rng = np.random.default_rng(19)
    params = AttentionParams.init(V.RAB, 8, 2, rng, rab_buckets=4)
    rebuilt = AttentionParams.from_named(params.named())
    assert rebuilt.named().keys() == params.named().keys()
    rebuilt.check(V.RAB)


def test_shape_errors():
    rng = np.random.default_rng(20)
    params = AttentionParams.init(V.MULTI_HEAD_SOFTMAX, 8, 3, rng)
    with pytest.raises(ShapeError):
        attend_multihead_softmax(tensor(np.ones((2, 8))), params, None, 3)
    mask_params = AttentionParams.init(V.PART_MASK, 8, 4, rng)
    with pytest.raises(ShapeError):
        attend_part_mask(tensor(np.ones((4, 8))), mask_params, None, np.ones((4, 5, 5)))


def test_pad_mask():
    np.testing.assert_array_equal(pad_mask([2, 3], 4), [[True, True, False, False], [True, True, True, False]])


@pytest.mark.parametrize("variant", list(AttentionVariant))
def test_fully_padded_sequence_is_zero(variant):
    with precision(np.float32):
        rng = np.random.default_rng(21)
        params = _params(variant, 8, 4, rng, clip=3)
        mask = build_mask(3, 0, PartitionSpec(n=4, num_layers=1))
        out = attend(tensor(rng.normal(size=(1, 3, 8))), params, variant, np.zeros((1, 3), bool), heads=4,
                     mask=mask, clip=3, boundaries=BOUNDARIES).data
        assert np.all(np.isfinite(out))
        assert np.all(out == 0.0)


def test_unbatched_input_returns_unbatched_output():
    rng = np.random.default_rng(22)
    params = AttentionParams.init(V.SHATTER, 8, 4, rng)
    mask = build_mask(3, 0, PartitionSpec(n=4, num_layers=1))
    assert attend_shatter(tensor(np.ones((3, 8))), params, None, mask).shape == (3, 8)
