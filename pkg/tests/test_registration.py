import itertools
import math

import numpy as np
import pytest

from sgfeat.cloud import RigidTransform, random_transform
from sgfeat.errors import DegenerateSet, InvalidInput, RegistrationFailed, UndefinedMetric
from sgfeat.matching import CorrespondenceSet
from sgfeat.registration import (LGRConfig, PairMetrics, feature_matching_recall, inlier_ratio, kitti_success,
                                 lgr, lgr_solve, procrustes, rmse_and_rr, rre_rte, summarize,
                                 weighted_procrustes)

import oracles


def cost(T, p, q, w=None):
    w = np.ones(len(p)) if w is None else w
    return float(np.sum(w * np.sum((T.apply(p) - q) ** 2, axis=1)))


# -- Procrustes -----------------------------------------------------------------------

def test_procrustes_identity():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    T = procrustes(p, p)
    assert np.abs(T.matrix() - np.eye(4)).max() < 1e-12


def test_procrustes_quarter_turn_about_z():
    p = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1.0]])
    R = oracles.rot([0, 0, 1], math.pi / 2)
    T = procrustes(p, p @ R.T)
    assert np.abs(T.rotation - R).max() < 1e-12 and np.abs(T.translation).max() < 1e-12


def test_procrustes_random_exact_recovery():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.normal(size=(20, 3))
        T = random_transform(rng, max_translation=5)
        est = procrustes(p, T.apply(p))
        assert np.abs(est.matrix() - T.matrix()).max() < 1e-10


def test_procrustes_coplanar_stays_proper_and_optimal():
    # a planar set mapped onto its mirror image tempts the SVD into a reflection
    rng = np.random.default_rng(1)
    p = np.column_stack([rng.uniform(-1, 1, 12), rng.uniform(-1, 1, 12), np.zeros(12)])
    q = p * np.array([-1.0, 1.0, 1.0]) + 0.01 * rng.normal(size=p.shape)
    T = procrustes(p, q)
    assert abs(np.linalg.det(T.rotation) - 1.0) < 1e-12
    c = cost(T, p, q)
    # no rotation on a small grid around the estimate does better
    steps = np.radians([-0.5, 0.0, 0.5])
    for a, b, g in itertools.product(steps, steps, steps):
        R = oracles.rot([1, 0, 0], a) @ oracles.rot([0, 1, 0], b) @ oracles.rot([0, 0, 1], g) @ T.rotation
        t = q.mean(axis=0) - p.mean(axis=0) @ R.T
        assert cost(RigidTransform(R, t), p, q) >= c - 1e-12


def test_procrustes_weights():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(10, 3))
    T = random_transform(rng)
    q = T.apply(p)
    q[0] += 5.0
    w = np.ones(10)
    w[0] = 0.0
    assert np.abs(procrustes(p, q, w).matrix() - T.matrix()).max() < 1e-10
    assert np.abs(procrustes(p, q, 3 * w).matrix() - procrustes(p, q, w).matrix()).max() < 1e-12
    corr = CorrespondenceSet(np.arange(10), np.arange(10), np.ones(10))
    assert np.abs(weighted_procrustes(corr, p, q, w).matrix() - T.matrix()).max() < 1e-10


def test_procrustes_degenerate_inputs():
    with pytest.raises(DegenerateSet):
        procrustes(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    with pytest.raises(DegenerateSet):
        procrustes(line, line)
    with pytest.raises(DegenerateSet):
        procrustes(np.ones((3, 3)), np.ones((3, 3)))
    with pytest.raises(InvalidInput):
        procrustes(np.eye(3), np.eye(3), [1.0, -1.0, 1.0])


# -- LGR ------------------------------------------------------------------------------

def outlier_problem(rng, n=200, frac=0.8, n_patches=10):
    P = rng.uniform(0, 2, size=(n, 3))
    T = random_transform(rng, max_translation=2)
    Q = T.apply(P)
    n_in = int(frac * n)
    perm = rng.permutation(n)
    tgt = np.arange(n)
    bad = perm[n_in:]
    tgt[bad] = rng.permutation(bad)            # shuffled targets are outliers
    Q = Q + 0.002 * rng.normal(size=Q.shape)
    patch = np.repeat(np.arange(n_patches), n // n_patches)
    rng.shuffle(patch)
    corr = CorrespondenceSet(np.arange(n), tgt, rng.uniform(0.2, 1.0, n), level="dense", patch=patch)
    return corr, P, Q, T, int(np.count_nonzero(tgt == np.arange(n)))


def test_lgr_recovers_with_outliers():
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(10):
        corr, P, Q, T, n_true = outlier_problem(rng)
        # one clean patch guarantees a good hypothesis
        clean = np.nonzero(corr.src == corr.tgt)[0][:10]
        patch = corr.patch.copy()
        patch[clean] = 99
        corr = CorrespondenceSet(corr.src, corr.tgt, corr.score, "dense", patch)
        res = lgr_solve(corr, P, Q)
        rre, _ = rre_rte(res.transform, T)
        hits += rre < 0.5 and res.inliers.size >= 0.8 * len(corr) - 5
        assert res.inliers.size <= n_true + 5
    assert hits == 10


def test_lgr_order_invariant():
    rng = np.random.default_rng(4)
    corr, P, Q, _, _ = outlier_problem(rng)
    perm = rng.permutation(len(corr))
    shuffled = CorrespondenceSet(corr.src[perm], corr.tgt[perm], corr.score[perm], "dense", corr.patch[perm])
    assert np.array_equal(lgr(corr, P, Q).matrix(), lgr(shuffled, P, Q).matrix())


def test_lgr_fails_without_hypotheses():
    P = np.eye(3)
    corr = CorrespondenceSet([0, 1], [0, 1], [1.0, 1.0], "dense", np.array([0, 1]))
    with pytest.raises(RegistrationFailed):
        lgr(corr, P, P)
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    corr = CorrespondenceSet([0, 1, 2], [0, 1, 2], [1.0, 1.0, 1.0], "dense", np.zeros(3, dtype=int))
    with pytest.raises(RegistrationFailed):
        lgr(corr, line, line)
    with pytest.raises(InvalidInput):
        LGRConfig(tau_a=0.0)


# -- metrics --------------------------------------------------------------------------

def test_inlier_ratio_examples():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    Q = P.copy()
    Q[3] += [0, 0, 0.5]
    corr = CorrespondenceSet(np.arange(4), np.arange(4), np.ones(4))
    assert inlier_ratio(corr, P, Q, RigidTransform.identity()) == 0.75
    assert inlier_ratio(CorrespondenceSet.empty(), P, Q, RigidTransform.identity()) == 0.0
    # the threshold is strict
    Q2 = P + [0.1, 0, 0]
    assert inlier_ratio(corr, P, Q2, RigidTransform.identity(), tau=0.1) == 0.0


def test_feature_matching_recall():
    assert feature_matching_recall([0.04, 0.06]) == 0.5
    assert feature_matching_recall([0.05]) == 0.0
    assert feature_matching_recall([]) == 0.0
    with pytest.raises(InvalidInput):
        feature_matching_recall([0.1], 1.0)


def test_rmse_translation_offset():
    P = np.random.default_rng(5).normal(size=(30, 3))
    corr = CorrespondenceSet(np.arange(30), np.arange(30), np.ones(30))
    T_pred = RigidTransform(np.eye(3), [0.3, 0.0, 0.0])
    rmse, ok = rmse_and_rr(T_pred, RigidTransform.identity(), corr, P)
    assert abs(rmse - 0.3) < 1e-12 and ok is False
    rmse, ok = rmse_and_rr(RigidTransform.identity(), RigidTransform.identity(), corr, P, P)
    assert rmse == 0.0 and ok is True
    with pytest.raises(UndefinedMetric):
        rmse_and_rr(T_pred, T_pred, CorrespondenceSet.empty(), P)


def test_rre_rte_examples_and_quaternion_oracle():
    T = RigidTransform(oracles.rot([0, 0, 1], math.radians(10)), [0, 0, 0])
    rre, rte = rre_rte(T, RigidTransform.identity())
    assert abs(rre - 10.0) < 1e-9 and rte == 0.0
    rng = np.random.default_rng(6)
    for _ in range(200):
        A, B = random_transform(rng, max_translation=3), random_transform(rng, max_translation=3)
        rre, rte = rre_rte(A, B)
        assert abs(rre - oracles.rotation_angle_quat(A.rotation.T @ B.rotation)) < 1e-6
        assert abs(rte - oracles.dist(A.translation, B.translation)) < 1e-12


def test_kitti_success_is_strict():
    assert kitti_success(4.9, 1.9) is True
    assert kitti_success(5.0, 0.0) is False
    assert kitti_success(0.0, 2.0) is False
    assert kitti_success(0.0, 0.0) is True


def test_summarize():
    pairs = [PairMetrics("a", 0.10, 0.05, True, 1.0, 0.02),
             PairMetrics("b", 0.02, 0.90, False, 40.0, 3.0),
             PairMetrics("c", 0.30, 0.10, True, 3.0, 0.04)]
    rep = summarize(pairs)
    assert rep.rr == pytest.approx(2 / 3, abs=1e-15)
    assert rep.fmr == pytest.approx(2 / 3, abs=1e-15)
    assert rep.ir == pytest.approx(0.14, abs=1e-15)
    assert rep.rre == pytest.approx(2.0, abs=1e-15) and rep.rte == pytest.approx(0.03, abs=1e-15)
    empty = summarize([])
    assert empty.rr == 0.0 and empty.rre is None
