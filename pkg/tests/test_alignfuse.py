import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from meddet_kit import numcore as nc
from meddet_kit.alignfuse import (AlignmentError, AlignSpec, FusionParams, afa_apply, fuse_baselines,
                                  lwff_fuse, lwff_weight, mean_partition)
from meddet_kit.numcore import DimensionError, Tensor


def lwff_literal(feats, heads, biases, merge_w, merge_b):
    """Scalar-loop fusion: per-channel sigmoid weight of the pooled input, scale, stack, 1x1 merge."""
    n, c, h, w = feats[0].shape
    k = len(feats)
    stacked = np.zeros((n, k * c, h, w))
    for j in range(k):
        for i in range(n):
            pooled = [feats[j][i, ch].sum() / (h * w) for ch in range(c)]
            for o in range(c):
                z = sum(heads[j][o, ch, 0, 0] * pooled[ch] for ch in range(c)) + biases[j][o]
                a = 1.0 / (1.0 + math.exp(-z))
                stacked[i, j * c + o] = a * feats[j][i, o]
    out = np.zeros((n, c, h, w))
    for i in range(n):
        for o in range(c):
            acc = np.full((h, w), merge_b[o])
            for q in range(k * c):
                acc = acc + merge_w[o, q, 0, 0] * stacked[i, q]
            out[i, o] = acc
    return out


def _random_fusion(r, c, k):
    heads = [r.normal(size=(c, c, 1, 1)) for _ in range(k)]
    biases = [r.normal(size=c) for _ in range(k)]
    return heads, biases, r.normal(size=(c, k * c, 1, 1)), r.normal(size=c)


def test_lwff_matches_literal_oracle_100_cases(f64):
    r = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        c, k = int(r.integers(1, 5)), int(r.integers(1, 4))
        h, w = int(r.integers(1, 5)), int(r.integers(1, 5))
        feats = [r.normal(size=(2, c, h, w)) for _ in range(k)]
        heads, biases, mw, mb = _random_fusion(r, c, k)
        params = FusionParams([Tensor(x) for x in heads], [Tensor(x) for x in biases], Tensor(mw), Tensor(mb))
        got = lwff_fuse([Tensor(f) for f in feats], params).data
        worst = max(worst, np.abs(got - lwff_literal(feats, heads, biases, mw, mb)).max())
    assert worst <= 1e-6


def test_lwff_weights_in_open_unit_interval(f64, rng):
    a = lwff_weight(Tensor(rng.normal(size=(2, 3, 4, 4)) * 50), Tensor(rng.normal(size=(3, 3, 1, 1))),
                    Tensor(np.zeros(3))).data
    assert a.shape == (2, 3, 1, 1) and np.all((a >= 0) & (a <= 1))


def test_default_init_is_half_weighted_mean(f64, rng):
    feats = [rng.normal(size=(1, 3, 2, 2)) for _ in range(3)]
    out = lwff_fuse([Tensor(f) for f in feats], FusionParams.init(3, 3)).data
    np.testing.assert_allclose(out, 0.5 * sum(feats) / 3, atol=1e-14)


@given(seed=st.integers(0, 2**16), perm=st.permutations([0, 1, 2]))
def test_lwff_permutation_covariance(seed, perm):
    """Permuting inputs together with their heads and merge blocks leaves the output unchanged."""
    with nc.precision(64):
        r = np.random.default_rng(seed)
        c, k = 2, 3
        feats = [r.normal(size=(1, c, 3, 3)) for _ in range(k)]
        heads, biases, mw, mb = _random_fusion(r, c, k)
        base = lwff_fuse([Tensor(f) for f in feats],
                         FusionParams([Tensor(x) for x in heads], [Tensor(x) for x in biases], Tensor(mw), Tensor(mb)))
        blocks = [mw[:, j * c:(j + 1) * c] for j in range(k)]
        pmw = np.concatenate([blocks[j] for j in perm], axis=1)
        permuted = lwff_fuse([Tensor(feats[j]) for j in perm],
                             FusionParams([Tensor(heads[j]) for j in perm], [Tensor(biases[j]) for j in perm],
                                          Tensor(pmw), Tensor(mb)))
        np.testing.assert_allclose(permuted.data, base.data, atol=1e-12)


def test_lwff_rejects_mismatched_inputs():
    p = FusionParams.init(2, 2)
    with pytest.raises(DimensionError, match="input 1"):
        lwff_fuse([Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 3, 3)))], p)
    with pytest.raises(DimensionError, match="weight heads"):
        lwff_fuse([Tensor(np.zeros((1, 2, 2, 2)))] * 3, p)


def test_mean_partition():
    w = mean_partition(2, 2)[..., 0, 0]
    assert w.tolist() == [[0.5, 0, 0.5, 0], [0, 0.5, 0, 0.5]]


def test_baselines(f64, rng):
    feats = [rng.normal(size=(1, 2, 3, 3)) for _ in range(3)]
    ts = [Tensor(f) for f in feats]
    np.testing.assert_allclose(fuse_baselines(ts, "sum").data, sum(feats), atol=1e-14)
    np.testing.assert_allclose(fuse_baselines(ts, "concat").data, sum(feats) / 3, atol=1e-14)
    with pytest.raises(ValueError):
        fuse_baselines(ts, "max")


STAIRCASE = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)


def test_afa_staircase(f64):
    out = afa_apply(Tensor(STAIRCASE), AlignSpec.identity(1, 2, 2)).data
    assert out[0, 0].tolist() == [[6, 8], [14, 16]]


def test_afa_identity_same_size(f64, rng):
    x = rng.normal(size=(1, 3, 4, 4))
    assert np.array_equal(afa_apply(Tensor(x), AlignSpec.identity(3, 4, 4)).data, x)


def test_afa_channel_change(f64, rng):
    spec = AlignSpec.init(3, 5, 2, 2, rng)
    x = rng.normal(size=(2, 3, 4, 4))
    out = afa_apply(Tensor(x), spec).data
    conv = np.einsum("oc,nchw->nohw", spec.conv_weight.data[..., 0, 0], x)
    oracle = conv.reshape(2, 5, 2, 2, 2, 2).max(axis=(3, 5))
    np.testing.assert_allclose(out, oracle, atol=1e-12)


def test_afa_errors(rng):
    with pytest.raises(AlignmentError):
        afa_apply(Tensor(np.zeros((1, 2, 2, 2))), AlignSpec.identity(2, 4, 4))
    with pytest.raises(DimensionError, match="channels"):
        afa_apply(Tensor(np.zeros((1, 3, 2, 2))), AlignSpec.identity(2, 2, 2))
    with pytest.raises(DimensionError):
        AlignSpec(2, 3, 1, 1, Tensor(np.zeros((3, 3, 1, 1))), Tensor(np.zeros(3)))
