import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maaf import oracles
from maaf.autodiff import Tensor
from maaf.autodiff import functional as F
from maaf.fusion import FusionConfig
from maaf.model import MAAFModel, ModelConfig
from maaf.pooling import PoolingConfig, pool, pool_tokens, similarity
from maaf.text_encoder import Vocabulary, tokenize
from maaf.tokens import COARSE, FINE, TEXT, Segment, TokenSequence
from maaf.training import batch_loss

SIZES = {COARSE: 4, FINE: 16, TEXT: 3}


def _seq(vals, sizes=SIZES):
    segs, start = [], 0
    for g, n in sizes.items():
        segs.append(Segment(g, start, n))
        start += n
    return TokenSequence(Tensor(vals), tuple(segs))


@pytest.mark.parametrize("rp,it", list(itertools.product([True, False], repeat=2)))
def test_pool_matches_oracle(rp, it, f64, rng):
    vals = rng.standard_normal((1, 23, 5))
    seq = _seq(vals)
    groups = [vals[0, 0:4].tolist(), vals[0, 4:20].tolist()] + ([vals[0, 20:].tolist()] if it else [])
    got = F.l2_normalize(pool_tokens(seq, rp, it)).data[0]
    np.testing.assert_allclose(got, oracles.pool_ref(groups, rp), atol=1e-12)


def test_resolution_pooling_weights_groups_equally(f64):
    vals = np.zeros((1, 20, 2))
    vals[0, :4] = [1, 0]
    vals[0, 4:] = [0, 1]
    seq = _seq(vals, {COARSE: 4, FINE: 16})
    np.testing.assert_allclose(pool_tokens(seq, True, False).data, [[0.5, 0.5]])
    np.testing.assert_allclose(pool_tokens(seq, False, False).data, [[0.2, 0.8]])


def test_missing_groups_average_only_present_ones(f64):
    vals = np.zeros((2, 6, 2))
    vals[:, :4] = [1, 0]
    vals[:, 4:] = [0, 1]
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], bool)
    seq = TokenSequence(Tensor(vals), (Segment(COARSE, 0, 4), Segment(TEXT, 4, 2)), mask)
    np.testing.assert_allclose(pool_tokens(seq, True, True).data, [[1, 0], [0.5, 0.5]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_pooling_is_permutation_invariant_within_groups(seed, rp):
    r = np.random.default_rng(seed)
    vals = r.standard_normal((1, 23, 4))
    perm = vals.copy()
    perm[0, 4:20] = vals[0, 4:20][r.permutation(16)]
    perm[0, :4] = vals[0, :4][r.permutation(4)]
    a = pool_tokens(_seq(vals), rp, True).data
    b = pool_tokens(_seq(perm), rp, True).data
    # sorted summation makes this exact, not merely close
    np.testing.assert_array_equal(a, b)


def test_embedding_norm_equals_scale(f64, rng):
    scale = Tensor(np.array([3.5]))
    out = pool(_seq(rng.standard_normal((2, 23, 6))), PoolingConfig(), scale).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 3.5, rtol=1e-12)


def test_zero_tokens_rejected():
    seq = TokenSequence(Tensor(np.zeros((1, 2, 3))), (Segment(TEXT, 0, 2),))
    with pytest.raises(ValueError):
        pool_tokens(seq, True, False)


def test_similarity_is_cosine():
    a = np.array([[3.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(similarity(a, a), [[1, 2 ** -0.5], [2 ** -0.5, 1]])
    with pytest.raises(ValueError):
        similarity(np.zeros((1, 2)), a)


def _small_model(**pool_kw):
    return MAAFModel(FusionConfig(num_blocks=1, d=16, heads=2, ffn_width=32, dropout=0.0),
                     PoolingConfig(**pool_kw), ModelConfig(channels=(4, 4, 8, 8)), vocab_size=10, seed=3)


def test_ita_adds_no_parameters():
    assert _small_model(ita=True).num_parameters() == _small_model(ita=False).num_parameters()


def test_ita_catalog_is_null_caption_fusion(f64, rng):
    m = _small_model(ita=True)
    imgs = rng.random((2, 32, 32, 3))
    fused = m.fusion(m.image_tokens(imgs), None)
    expect = pool(fused, PoolingConfig(it=False), m.scale).data
    np.testing.assert_allclose(m.embed_catalog(imgs).data, expect, atol=1e-12)


def test_catalog_without_ita_ignores_attention(f64, rng):
    m = _small_model(ita=False)
    imgs = rng.random((2, 32, 32, 3))
    before = m.embed_catalog(imgs).data
    for _, p in m.fusion.named_parameters():
        p.data[...] = rng.standard_normal(p.shape)
    np.testing.assert_array_equal(m.embed_catalog(imgs).data, before)


def test_query_depends_on_caption(f64, rng):
    m = _small_model()
    v = Vocabulary.build(["make red cube small"])
    imgs = rng.random((1, 32, 32, 3))
    a = m.embed_query(imgs, [tokenize("make red", v)]).data
    b = m.embed_query(imgs, [tokenize("cube small", v)]).data
    assert not np.allclose(a, b)


@pytest.mark.parametrize("s", [0.5, 4.0, 11.0])
def test_scale_acts_as_inverse_temperature(s, f64, rng):
    u = rng.standard_normal((6, 8))
    v = rng.standard_normal((6, 8))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    scaled = batch_loss(Tensor(s * u), Tensor(s * v)).data
    tempered = F.cross_entropy(Tensor((u @ v.T) / (1 / s ** 2)), np.arange(6)).data
    assert abs(scaled - tempered) < 1e-9
