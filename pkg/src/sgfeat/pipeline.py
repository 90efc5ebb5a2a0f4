"""End-to-end registration of one scan pair, with per-stage timings."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, RigidTransform, SpatialIndex, as_points, point_to_node, voxel_downsample
from .config import PipelineConfig
from .errors import RegistrationFailed
from .features import (EncoderConfig, EncoderWeights, GeoWeights, fuse_semantic, geometric_transformer,
                       local_descriptor, semantic_encoder)
from .hot import HOTConfig, HOTWeights, Partners, fuse_and_propagate, hot_forward
from .matching import (CorrespondenceSet, MatchConfig, candidate_region, combined_scores, dense_match,
                       feature_match_scores, topk_correspondences)
from .registration import LGRConfig, PairMetrics, inlier_ratio, lgr_solve, rmse_and_rr, rre_rte
from .saliency import SaliencyConfig, saliency_scores, salient_score_matrix, select_salient

STAGES = ("backbone", "aug", "hse", "attention", "hot", "matching", "lgr")


@dataclass(frozen=True)
class Weights:
    encoder: EncoderWeights
    geo: GeoWeights
    hot: HOTWeights


def encoder_config(cfg: PipelineConfig) -> EncoderConfig:
    return EncoderConfig(d_t=cfg.d_t, n_layers=cfg.n_s, super_cell=cfg.super_cell, pool_levels=cfg.pool_levels,
                         pool_radius_factor=cfg.pool_radius_factor, heads=cfg.heads, seed=cfg.seed)


def hot_config(cfg: PipelineConfig) -> HOTConfig:
    return HOTConfig(K=cfg.k, n_layers=cfg.n_g, sigma_h=cfg.sigma_h, sigma_a=cfg.sigma_a, d_t=cfg.d_t,
                     pooling=cfg.pooling)


_WEIGHT_CACHE: dict = {}


def init_weights(cfg: PipelineConfig) -> Weights:
    """Seeded weights; every switch combination draws the same tensors."""
    key = (cfg.seed, cfg.d_t, cfg.heads, cfg.n_s, cfg.pool_levels, cfg.n_geo, cfg.n_g,
           cfg.value_gain, cfg.bias_gain, cfg.parent_gain)
    if key not in _WEIGHT_CACHE:
        rng = np.random.default_rng(cfg.seed)
        enc = EncoderWeights.init(rng, encoder_config(cfg), cfg.value_gain)
        geo = GeoWeights.init(rng, cfg.d_t, cfg.n_geo, cfg.heads, cfg.value_gain, cfg.bias_gain)
        hot = HOTWeights.init(rng, hot_config(cfg), cfg.value_gain, cfg.bias_gain, cfg.parent_gain)
        _WEIGHT_CACHE[key] = Weights(enc, geo, hot)
    return _WEIGHT_CACHE[key]


@dataclass
class Frame:
    """Everything the pipeline derives from one scan."""

    dense: np.ndarray
    supers: np.ndarray = None
    gamma: np.ndarray = None
    salient_fallback: bool = False
    F_dense: np.ndarray = None
    F_super: np.ndarray = None


@dataclass
class RegistrationResult:
    transform: RigidTransform
    dense_corr: CorrespondenceSet
    super_corr: CorrespondenceSet
    timings: dict = field(default_factory=dict)    # ms per stage
    flags: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    failed: str | None = None
    dense_p: np.ndarray | None = None     # the points the dense correspondences index
    dense_q: np.ndarray | None = None


class _Timer:
    def __init__(self):
        self.ms = {s: 0.0 for s in STAGES}

    @contextmanager
    def __call__(self, stage):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.ms[stage] += 1000.0 * (time.perf_counter() - t0)


def _prepare(points, cfg: PipelineConfig, timer: _Timer) -> Frame:
    dense = as_points(points)
    if cfg.dense_voxel > 0:
        dense = as_points(voxel_downsample(dense, cfg.dense_voxel))
    fr = Frame(dense)
    with timer("aug"):
        level = as_points(voxel_downsample(dense, cfg.salient_cell))
        if cfg.aug:
            # salient points of the second-to-last level replace the grid superpoints
            sal = select_salient(level, SaliencyConfig(cfg.r_salient, cfg.lambda10, cfg.lambda21))
            fr.supers = level[sal.indices]
            fr.salient_fallback = sal.fallback
            _, _, _, fr.gamma = saliency_scores(level, fr.supers, cfg.gamma_radius)
    if not cfg.aug:
        with timer("backbone"):
            fr.supers = as_points(voxel_downsample(dense, cfg.super_cell))
    with timer("backbone"):
        index = SpatialIndex(dense)
        fr.F_super = local_descriptor(dense, fr.supers, cfg.desc_radius, cfg.d_t, index=index)
        fr.F_dense = local_descriptor(dense, dense, cfg.dense_desc_radius, cfg.d_t, index=index)
    return fr


def register_pair(source, target, cfg: PipelineConfig = PipelineConfig(), weights: Weights | None = None
                  ) -> RegistrationResult:
    """Estimate the transform taking ``source`` onto ``target``.

    Registration failure (no valid LGR hypothesis) is reported through
    ``result.failed`` with an identity transform rather than raised.
    """
    weights = weights or init_weights(cfg)
    timer = _Timer()
    P = _prepare(source.points if isinstance(source, PointCloud) else source, cfg, timer)
    Q = _prepare(target.points if isinstance(target, PointCloud) else target, cfg, timer)

    F_p, F_q = P.F_super, Q.F_super
    if cfg.hse:
        with timer("hse"):
            Ft_p, Ft_q = semantic_encoder(F_p, F_q, P.supers, Q.supers, encoder_config(cfg), weights.encoder)
            F_p = fuse_semantic(P.F_super, Ft_p, weights.encoder.fuse)
            F_q = fuse_semantic(Q.F_super, Ft_q, weights.encoder.fuse)
    with timer("attention"):
        if cfg.n_geo > 0:
            F_p, F_q = geometric_transformer(F_p, F_q, P.supers, Q.supers, weights.geo, cfg.sigma_d)
    with timer("matching"):
        MS = feature_match_scores(F_p, F_q)
    with timer("aug"):
        S = combined_scores(MS, salient_score_matrix(P.gamma, Q.gamma)) if cfg.aug else MS
    with timer("matching"):
        sup = topk_correspondences(S, cfg.n_c)
        part_p = point_to_node(P.dense, P.supers)
        part_q = point_to_node(Q.dense, Q.supers)
    region = candidate_region(sup)
    if cfg.hot:
        with timer("hot"):
            Fo_p, Fo_q = hot_forward(F_p[region.region_p], F_q[region.region_q], P.supers[region.region_p],
                                     Q.supers[region.region_q], Partners(region.p_to_q, region.q_to_p),
                                     hot_config(cfg), weights.hot)
            D_p = fuse_and_propagate(P.F_super, Fo_p, region.region_p, part_p, P.F_dense, weights.hot)
            D_q = fuse_and_propagate(Q.F_super, Fo_q, region.region_q, part_q, Q.F_dense, weights.hot)
    else:
        D_p, D_q = P.F_dense, Q.F_dense
    with timer("matching"):
        mcfg = MatchConfig(cfg.sinkhorn_iters, cfg.dustbin_score, cfg.confidence, cfg.match_temperature)
        dense = dense_match(sup, part_p, part_q, D_p, D_q, mcfg)
    stats = {"n_dense": [int(P.dense.shape[0]), int(Q.dense.shape[0])],
             "n_super": [int(P.supers.shape[0]), int(Q.supers.shape[0])],
             "n_region": [int(region.region_p.size), int(region.region_q.size)],
             "n_dense_corr": len(dense),
             "salient_fallback": [P.salient_fallback, Q.salient_fallback]}
    failed = None
    with timer("lgr"):
        try:
            lcfg = LGRConfig(cfg.lgr_tau, cfg.lgr_iters, cfg.lgr_min_size, cfg.lgr_kernel)
            res = lgr_solve(dense, P.dense, Q.dense, lcfg)
            T = res.transform
            stats["n_inliers"] = int(res.inliers.size)
        except RegistrationFailed as e:
            T = RigidTransform.identity()
            failed = str(e)
    return RegistrationResult(T, dense, sup, dict(timer.ms), dict(cfg.flags), stats, failed, P.dense, Q.dense)


def evaluate(pair_id: str, result: RegistrationResult, T_gt: RigidTransform, gt_corr: CorrespondenceSet,
             source_points, cfg: PipelineConfig = PipelineConfig()) -> PairMetrics:
    """IR of the dense correspondences, RMSE-based success and RRE/RTE against the ground truth."""
    ir = inlier_ratio(result.dense_corr, result.dense_p, result.dense_q, T_gt, cfg.ir_tau)
    rmse, ok = rmse_and_rr(result.transform, T_gt, gt_corr, source_points, threshold=cfg.rmse_threshold)
    rre, rte = rre_rte(result.transform, T_gt)
    return PairMetrics(pair_id, ir, rmse, ok, rre, rte)
