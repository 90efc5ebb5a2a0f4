import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgfeat.cloud import partition_from_assignment
from sgfeat.errors import InvalidInput, InvalidShape
from sgfeat.matching import (CorrespondenceSet, MatchConfig, ScoreMatrix, candidate_region, combined_scores,
                             dense_match, feature_match_scores, mutual_max, sinkhorn, sinkhorn_batch,
                             topk_correspondences)

import oracles


# -- types ----------------------------------------------------------------------------

def test_correspondence_set_rejects_duplicates_and_bad_values():
    with pytest.raises(InvalidInput):
        CorrespondenceSet([0, 0], [1, 1], [0.5, 0.4])
    with pytest.raises(InvalidInput):
        CorrespondenceSet([0], [-1], [0.5])
    with pytest.raises(InvalidInput):
        CorrespondenceSet([0], [1], [np.inf])
    with pytest.raises(InvalidShape):
        CorrespondenceSet([0, 1], [1], [0.5])
    with pytest.raises(InvalidInput):
        ScoreMatrix(np.array([[np.nan]]))


# -- MS and S -------------------------------------------------------------------------

def test_feature_scores_examples():
    f = np.array([[0.3, 0.4]])
    assert feature_match_scores(f, f).values.tolist() == [[1.0]]
    assert feature_match_scores([[1.0, 0.0]], [[0.0, 2.0]]).values.tolist() == [[0.0]]
    assert feature_match_scores([[0.0, 0.0]], [[1.0, 0.0]]).values.tolist() == [[0.0]]


def test_feature_scores_vs_double_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 9)), rng.normal(size=(7, 9))
    ms = feature_match_scores(a, b).values
    for i in range(5):
        for j in range(7):
            ref = sum(a[i, k] * b[j, k] for k in range(9)) / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
            assert abs(ms[i, j] - ref) < 1e-12
    with pytest.raises(InvalidShape):
        feature_match_scores(a, b[:, :4])


def test_combined_scores():
    rng = np.random.default_rng(1)
    ms = rng.uniform(-1, 1, size=(4, 6))
    assert np.array_equal(combined_scores(ms, np.ones((4, 6))).values, ms)
    ss = rng.uniform(size=(4, 6))
    ss[1, 2] = 0
    s = combined_scores(ms, ss).values
    assert s[1, 2] == 0 and np.array_equal(s, ms * ss)
    assert combined_scores(ms, ss).kind == "S"
    with pytest.raises(InvalidShape):
        combined_scores(ms, ss[:3])


# -- top-k ----------------------------------------------------------------------------

def test_topk_examples():
    c = topk_correspondences(np.array([[0.9, 0.1], [0.2, 0.8]]), 2)
    assert set(zip(c.src.tolist(), c.tgt.tolist())) == {(0, 0), (1, 1)}
    assert len(topk_correspondences(np.ones((3, 4)), 100)) == 12
    with pytest.raises(InvalidInput):
        topk_correspondences(np.ones((2, 2)), 0)


def test_topk_ties_lower_row_then_column():
    c = topk_correspondences(np.full((3, 3), 0.5), 4)
    assert list(zip(c.src.tolist(), c.tgt.tolist())) == [(0, 0), (0, 1), (0, 2), (1, 0)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_topk_vs_full_sort(seed):
    rng = np.random.default_rng(seed)
    S = np.round(rng.uniform(size=(50, 60)), 2)      # rounding makes ties frequent
    c = topk_correspondences(S, 256)
    assert set(zip(c.src.tolist(), c.tgt.tolist())) == oracles.topk_oracle(S.tolist(), 256)


# -- Sinkhorn -------------------------------------------------------------------------

def test_sinkhorn_trivial_cases():
    assert sinkhorn([[3.7]], 10).tolist() == [[1.0]]
    assert np.allclose(sinkhorn(np.zeros((5, 5)), 3), 0.2, atol=1e-15)
    with pytest.raises(InvalidInput):
        sinkhorn([[np.inf]])
    with pytest.raises(InvalidInput):
        sinkhorn([[1.0]], 0)


def test_sinkhorn_random_square():
    rng = np.random.default_rng(2)
    S = rng.normal(size=(4, 4))
    A = sinkhorn(S, 100)
    assert np.abs(A.sum(axis=1) - 1).max() < 1e-6 and np.abs(A.sum(axis=0) - 1).max() < 1e-6
    assert np.abs(A - oracles.sinkhorn_oracle(S, 100)).max() < 1e-10
    assert np.all(A >= 0)


def test_sinkhorn_dustbin_vs_oracle():
    rng = np.random.default_rng(3)
    S = rng.normal(size=(4, 6))
    A = sinkhorn(S, 50, True, 0.3)
    assert np.abs(A - oracles.sinkhorn_oracle(S, 50, dustbin=0.3)).max() < 1e-10


def test_sinkhorn_marginals_approach_one():
    rng = np.random.default_rng(4)
    S = 3 * rng.normal(size=(6, 6))
    gaps = [np.abs(sinkhorn(S, k).sum(axis=1) - 1).max() for k in (1, 5, 25, 100)]
    assert all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:]))


def test_sinkhorn_batch_matches_single():
    rng = np.random.default_rng(5)
    rows, cols = np.array([3, 5, 1]), np.array([4, 2, 5])
    S = rng.normal(size=(3, 5, 5))
    A = sinkhorn_batch(S, rows, cols, 100, 0.0)
    for b in range(3):
        ref = sinkhorn(S[b, :rows[b], :cols[b]], 100, True, 0.0)
        assert np.abs(A[b, :rows[b], :cols[b]] - ref).max() < 1e-12
        assert np.all(A[b, rows[b]:] == 0) and np.all(A[b, :, cols[b]:] == 0)
    # a score range beyond the scaling limit goes through the log-domain loop
    S[0, 0, 0] = 900.0
    A = sinkhorn_batch(S, rows, cols, 20, 0.0)
    assert np.abs(A[0, :3, :4] - sinkhorn(S[0, :3, :4], 20, True, 0.0)).max() < 1e-12


# -- dense matching -------------------------------------------------------------------

def test_mutual_max_vs_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        A = np.round(rng.uniform(size=(5, 6)), 1)
        i, j = mutual_max(A, 0.3)
        assert set(zip(i.tolist(), j.tolist())) == oracles.mutual_max_oracle(A, 0.3)


def test_dense_match_single_point_patches():
    part = partition_from_assignment(np.array([0, 1]), 2)
    F = np.array([[1.0, 0.0], [0.0, 1.0]])
    patch = CorrespondenceSet([0, 1], [0, 1], [1.0, 1.0])
    out = dense_match(patch, part, part, F, F, MatchConfig(confidence=0.01))
    assert out.pairs()[0][:2] == (0, 0) and len(out) == 2
    one = dense_match(CorrespondenceSet([0], [0], [1.0]), part, part, F, F, MatchConfig(confidence=0.01))
    assert len(one) == 1


def test_dense_match_identical_clouds():
    rng = np.random.default_rng(7)
    F = rng.normal(size=(40, 16))
    assign = np.repeat(np.arange(8), 5)
    part = partition_from_assignment(assign, 8)
    patch = CorrespondenceSet(np.arange(8), np.arange(8), np.ones(8))
    out = dense_match(patch, part, part, F, F)
    assert len(out) > 0 and np.array_equal(out.src, out.tgt)
    assert np.array_equal(np.sort(out.patch), np.sort(assign[out.src]))


def test_dense_match_two_patches_vs_exhaustive_oracle():
    rng = np.random.default_rng(8)
    Fp, Fq = rng.normal(size=(9, 6)), rng.normal(size=(8, 6))
    ap, aq = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1]), np.array([0, 0, 0, 1, 1, 1, 1, 1])
    pp, pq = partition_from_assignment(ap, 2), partition_from_assignment(aq, 2)
    cfg = MatchConfig(confidence=0.0, temperature=0.2, one_to_one=False)
    patch = CorrespondenceSet([0, 1], [1, 0], [0.9, 0.8])
    out = dense_match(patch, pp, pq, Fp, Fq, cfg)
    unit = lambda F: F / np.linalg.norm(F, axis=1, keepdims=True)
    ref = set()
    for a, b in [(0, 1), (1, 0)]:
        ip, iq = np.nonzero(ap == a)[0], np.nonzero(aq == b)[0]
        A = oracles.sinkhorn_oracle(unit(Fp[ip]) @ unit(Fq[iq]).T / 0.2, 100, dustbin=0.0)
        ref |= {(int(ip[i]), int(iq[j])) for i, j in oracles.mutual_max_oracle(A, 0.0)}
    assert set(zip(out.src.tolist(), out.tgt.tolist())) == ref
    for s, t, k in zip(out.src, out.tgt, out.patch):
        assert ap[s] == patch.src[k] and aq[t] == patch.tgt[k]


def test_dense_match_no_duplicates_and_one_to_one():
    rng = np.random.default_rng(9)
    F = rng.normal(size=(30, 8))
    part = partition_from_assignment(np.repeat(np.arange(6), 5), 6)
    patch = CorrespondenceSet([0, 0, 1, 2, 3], [0, 1, 0, 2, 3], [0.9, 0.8, 0.7, 0.6, 0.5])
    out = dense_match(patch, part, part, F, F, MatchConfig(confidence=0.0))
    keys = list(zip(out.src.tolist(), out.tgt.tolist()))
    assert len(keys) == len(set(keys))
    assert len(set(out.src.tolist())) == len(out) and len(set(out.tgt.tolist())) == len(out)


def test_dense_match_skips_empty_neighbourhoods():
    part = partition_from_assignment(np.array([0, 0]), 2)      # super 1 has no points
    out = dense_match(CorrespondenceSet([1], [1], [1.0]), part, part, np.eye(2), np.eye(2))
    assert len(out) == 0 and out.level == "dense"


def test_candidate_region_partners():
    corr = CorrespondenceSet([4, 4, 7], [2, 9, 9], [0.5, 0.9, 0.7])
    reg = candidate_region(corr)
    assert reg.region_p.tolist() == [4, 7] and reg.region_q.tolist() == [2, 9]
    assert reg.p_to_q.tolist() == [1, 1]
    assert reg.q_to_p.tolist() == [0, 0]
