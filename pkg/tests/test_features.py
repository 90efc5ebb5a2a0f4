import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgfeat.cloud import RigidTransform, random_transform
from sgfeat.errors import InvalidShape
from sgfeat.features import (EncoderConfig, EncoderWeights, GeoWeights, distance_embedding, encoder_plan,
                             fuse_semantic, geometric_transformer, local_descriptor, mh_cross_attention,
                             mh_self_attention, semantic_encoder, semantic_pool, semantic_upsample)
from sgfeat.nn import AttentionWeights, Linear, MLPLayer, attention, l2_normalize, row_normalize

import oracles

D = 8


def att_weights(rng, d=D, heads=4, bias=False):
    return AttentionWeights.init(rng, d, heads, 0.7, with_bias=bias)


def corner_patch(rng, n=150):
    """Points on three orthogonal faces near the origin."""
    u = rng.uniform(0, 0.3, size=(n, 2))
    face = rng.integers(0, 3, size=n)
    pts = np.zeros((n, 3))
    for f in range(3):
        sel = face == f
        axes = [a for a in range(3) if a != f]
        pts[np.ix_(sel, axes)] = u[sel]
    return pts


# -- local descriptor -----------------------------------------------------------------

def test_descriptor_identical_neighbourhoods():
    rng = np.random.default_rng(0)
    patch = corner_patch(rng)
    T = RigidTransform(oracles.rot([1, 2, 3], 1.1), [20.0, -5.0, 3.0])
    cloud = np.vstack([patch, T.apply(patch), rng.uniform(5, 6, size=(80, 3))])
    F = local_descriptor(cloud, np.vstack([[0.05, 0.05, 0.05], T.apply([[0.05, 0.05, 0.05]]), [5.5, 5.5, 5.5]]),
                         0.2, 32)
    assert np.abs(F[0] - F[1]).max() < 1e-8
    assert np.allclose(np.linalg.norm(F, axis=1), 1.0)


def test_descriptor_isolated_point_is_constant():
    rng = np.random.default_rng(1)
    a = np.vstack([rng.uniform(0, 1, size=(100, 3)), [[50, 50, 50]]])
    b = np.vstack([rng.normal(size=(300, 3)), [[-40, 0, 0]]])
    Fa = local_descriptor(a, a[[0, 1, 100]], 0.3, 16)
    Fb = local_descriptor(b, b[[5, 300]], 0.3, 16)
    assert np.array_equal(Fa[2], Fb[1])
    single = local_descriptor(b, b[[300]], 0.3, 16)
    assert np.array_equal(single[0], Fb[1])


def test_descriptor_plane_vs_corner():
    rng = np.random.default_rng(2)
    plane = np.column_stack([rng.uniform(-0.3, 0.3, size=(300, 2)), np.zeros(300)]) + [10, 0, 0]
    cloud = np.vstack([corner_patch(rng, 300), plane])
    F = local_descriptor(cloud, np.array([[0.02, 0.02, 0.02], [10, 0, 0]]), 0.2, 32)
    assert float(F[0] @ F[1]) < 0.99


def test_descriptor_rigid_invariant():
    rng = np.random.default_rng(3)
    cloud = rng.uniform(0, 1, size=(500, 3))
    supers = cloud[::25]
    F = local_descriptor(cloud, supers, 0.3, 64)
    for _ in range(10):
        T = random_transform(rng, max_translation=5)
        G = local_descriptor(T.apply(cloud), T.apply(supers), 0.3, 64)
        assert np.abs(F - G).max() < 1e-8


# -- pooling / upsampling -------------------------------------------------------------

def identity_first(d):
    return MLPLayer(Linear(np.vstack([np.eye(d), np.zeros((d, d))]), np.zeros(d)), False, False)


def test_pool_single_neighbour_configured():
    fine = np.array([[0.0, 0, 0]])
    f = np.array([[1.0, -2.0, 3.0, 0.5]])
    out = semantic_pool(fine, f, np.array([[0.01, 0, 0]]), 0.5, identity_first(4))
    assert np.array_equal(out, f)


def test_pool_takes_dominating_row():
    fine = np.array([[0.0, 0, 0], [0.1, 0, 0]])
    f = np.array([[1.0, 2.0, 3.0], [0.5, 1.0, -1.0]])
    out = semantic_pool(fine, f, np.array([[0.05, 0, 0]]), 0.5, identity_first(3))
    assert np.array_equal(out, f[:1])


def test_pool_empty_neighbourhood_copies_seed():
    fine = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    f = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = semantic_pool(fine, f, np.array([[0.2, 0, 0]]), 0.1, identity_first(2))
    assert np.array_equal(out, f[:1])


def test_pool_and_upsample_vs_loops():
    rng = np.random.default_rng(4)
    fine = rng.uniform(0, 1, size=(60, 3))
    coarse = np.vstack([fine[::6] + 0.01, [[3.0, 3, 3]]])
    F = rng.normal(size=(60, D))
    layer = MLPLayer.init(rng, 2 * D, D)
    out = semantic_pool(fine, F, coarse, 0.25, layer)
    ref = oracles.semantic_pool_oracle(fine, F, coarse, 0.25, layer.linear.weight, layer.linear.bias)
    assert np.abs(out - ref).max() < 1e-10
    Fc = rng.normal(size=(coarse.shape[0], D))
    up = semantic_upsample(coarse[:-1], Fc[:-1], np.vstack([fine, [[9.0, 9, 9]]]), np.vstack([F, np.ones(D)]),
                           layer, 0.2)
    ref = oracles.semantic_upsample_oracle(coarse[:-1], Fc[:-1], np.vstack([fine, [[9.0, 9, 9]]]),
                                           np.vstack([F, np.ones(D)]), layer.linear.weight,
                                           layer.linear.bias, 0.2)
    assert np.abs(up - ref).max() < 1e-10
    assert np.array_equal(up[-1], np.ones(D))     # orphan keeps its feature


def test_upsample_adopts_parent_when_configured():
    coarse = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    fine = np.array([[0.1, 0, 0], [0.9, 0, 0], [0.45, 0, 0]])
    Fc = np.array([[1.0, 2.0], [3.0, 4.0]])
    layer = MLPLayer(Linear(np.vstack([np.zeros((2, 2)), np.eye(2)]), np.zeros(2)), False, False)
    out = semantic_upsample(coarse, Fc, fine, np.zeros((3, 2)), layer, 0.6)
    assert np.array_equal(out, Fc[[0, 1, 0]])


# -- multi-head attention -------------------------------------------------------------

def test_self_attention_single_row():
    rng = np.random.default_rng(5)
    w = att_weights(rng)
    x = rng.normal(size=(1, D))
    assert np.abs(mh_self_attention(x, w) - row_normalize(x + x @ w.wv)).max() < 1e-12


def test_cross_attention_single_key_row():
    rng = np.random.default_rng(6)
    w = att_weights(rng)
    xa, xb = rng.normal(size=(5, D)), rng.normal(size=(1, D))
    assert np.abs(mh_cross_attention(xa, xb, w) - row_normalize(xa + xb @ w.wv)).max() < 1e-12


def test_cross_reduces_to_self():
    rng = np.random.default_rng(7)
    w = att_weights(rng)
    x = rng.normal(size=(6, D))
    assert np.array_equal(mh_cross_attention(x, x, w), mh_self_attention(x, w))


def test_attention_vs_loops_and_softmax_rows():
    rng = np.random.default_rng(8)
    w = att_weights(rng, bias=True)
    x, y = rng.normal(size=(6, D)), rng.normal(size=(4, D))
    b = rng.normal(size=(6, 4, D))
    ref = oracles.attention_oracle(x, y, w.wq, w.wk, w.wv, 4, b, w.bias_proj)
    out, a = attention(x, y, w, b, return_weights=True)
    assert np.abs(out - ref).max() < 1e-10
    assert np.abs(a.sum(axis=-1) - 1).max() < 1e-12
    assert np.abs(mh_self_attention(x, w) - oracles.attention_oracle(x, x, w.wq, w.wk, w.wv, 4)).max() < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_self_attention_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    w = att_weights(rng)
    x = rng.normal(size=(7, D))
    perm = rng.permutation(7)
    assert np.abs(mh_self_attention(x[perm], w) - mh_self_attention(x, w)[perm]).max() < 1e-12


# -- semantic encoder ----------------------------------------------------------------

def test_encoder_plan_layout():
    assert encoder_plan(3) == [("sa", 0), ("sa", 1), ("ca", 2)]
    assert encoder_plan(1) == [("ca", 2)]
    assert encoder_plan(5) == [("sa", 0), ("sa", 1), ("ca", 2), ("sa", 2), ("ca", 2)]


def test_semantic_encoder_contract():
    rng = np.random.default_rng(9)
    cfg = EncoderConfig(d_t=16, n_layers=3, super_cell=0.1)
    w = EncoderWeights.init(np.random.default_rng(0), cfg)
    Pp, Pq = rng.uniform(0, 1, size=(70, 3)), rng.uniform(0, 1.5, size=(50, 3))
    Fp, Fq = rng.normal(size=(70, 16)), rng.normal(size=(50, 16))
    a, b = semantic_encoder(Fp, Fq, Pp, Pq, cfg, w)
    assert a.shape == (70, 16) and b.shape == (50, 16)
    b2, a2 = semantic_encoder(Fq, Fp, Pq, Pp, cfg, w)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)
    w2 = EncoderWeights.init(np.random.default_rng(0), cfg)
    a3, b3 = semantic_encoder(Fp, Fq, Pp, Pq, cfg, w2)
    assert a.tobytes() == a3.tobytes() and b.tobytes() == b3.tobytes()


# -- fusion ---------------------------------------------------------------------------

def test_fuse_identity_first_block():
    rng = np.random.default_rng(10)
    F_hat = l2_normalize(rng.normal(size=(5, D)))
    out = fuse_semantic(F_hat, rng.normal(size=(5, D)), Linear(np.vstack([np.eye(D), np.zeros((D, D))])))
    assert np.abs(out - F_hat).max() < 1e-15


def test_fuse_zero_tilde_and_oracle():
    rng = np.random.default_rng(11)
    layer = Linear(rng.normal(size=(2 * D, D)), np.zeros(D))
    F_hat = rng.normal(size=(4, D))
    a = fuse_semantic(F_hat, np.zeros((4, D)), layer)
    assert np.abs(a - l2_normalize(F_hat) @ layer.weight[:D]).max() < 1e-12
    F_t = rng.normal(size=(4, D))
    out = fuse_semantic(F_hat, F_t, layer)
    ref = np.zeros((4, D))
    for i in range(4):
        row = np.concatenate([F_hat[i] / np.linalg.norm(F_hat[i]), F_t[i] / np.linalg.norm(F_t[i])])
        for c in range(D):
            ref[i, c] = sum(row[k] * layer.weight[k, c] for k in range(2 * D)) + layer.bias[c]
    assert np.abs(out - ref).max() < 1e-10
    with pytest.raises(InvalidShape):
        fuse_semantic(F_hat, F_t[:3], layer)


# -- geometric transformer -----------------------------------------------------------

def test_distance_embedding_vs_loops():
    rng = np.random.default_rng(12)
    pts = rng.uniform(0, 1, size=(7, 3))
    assert np.abs(distance_embedding(pts, D, 0.05) - oracles.distance_embedding_oracle(pts, D, 0.05)).max() < 1e-12


def test_geometric_transformer_zero_bias_is_plain_attention():
    rng = np.random.default_rng(13)
    w = GeoWeights.init(rng, D, 2, 4, 0.7)
    zero = GeoWeights(tuple(AttentionWeights(s.wq, s.wk, s.wv, 4, np.zeros((D, D))) for s in w.self_layers),
                      w.cross_layers)
    Pp, Pq = rng.uniform(size=(6, 3)), rng.uniform(size=(5, 3))
    Fp, Fq = rng.normal(size=(6, D)), rng.normal(size=(5, D))
    a, b = geometric_transformer(Fp, Fq, Pp, Pq, zero, 0.05)
    for ws, wc in zip(zero.self_layers, zero.cross_layers):
        plain = AttentionWeights(ws.wq, ws.wk, ws.wv, 4)
        Fp, Fq = mh_self_attention(Fp, plain), mh_self_attention(Fq, plain)
        Fp, Fq = mh_cross_attention(Fp, Fq, wc), mh_cross_attention(Fq, Fp, wc)
    assert np.abs(a - Fp).max() < 1e-12 and np.abs(b - Fq).max() < 1e-12


def test_geometric_transformer_vs_loops_and_invariance():
    rng = np.random.default_rng(14)
    w = GeoWeights.init(rng, D, 1, 4, 0.7)
    Pp, Pq = rng.uniform(size=(6, 3)), rng.uniform(size=(5, 3))
    Fp, Fq = rng.normal(size=(6, D)), rng.normal(size=(5, D))
    a, b = geometric_transformer(Fp, Fq, Pp, Pq, w, 0.3)
    ws, wc = w.self_layers[0], w.cross_layers[0]
    rp = oracles.attention_oracle(Fp, Fp, ws.wq, ws.wk, ws.wv, 4, oracles.distance_embedding_oracle(Pp, D, 0.3),
                                  ws.bias_proj)
    rq = oracles.attention_oracle(Fq, Fq, ws.wq, ws.wk, ws.wv, 4, oracles.distance_embedding_oracle(Pq, D, 0.3),
                                  ws.bias_proj)
    ra = oracles.attention_oracle(rp, rq, wc.wq, wc.wk, wc.wv, 4)
    rb = oracles.attention_oracle(rq, rp, wc.wq, wc.wk, wc.wv, 4)
    assert np.abs(a - ra).max() < 1e-10 and np.abs(b - rb).max() < 1e-10
    T = random_transform(rng, max_translation=3)
    a2, b2 = geometric_transformer(Fp, Fq, T.apply(Pp), T.apply(Pq), w, 0.3)
    assert np.abs(a - a2).max() < 1e-8 and np.abs(b - b2).max() < 1e-8
