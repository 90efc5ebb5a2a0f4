"""Superpoint features: deterministic local descriptors (the backbone stand-in),
the pyramid semantic encoder and the distance-biased geometric transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import SpatialIndex, as_points, nearest, pairwise_distances, voxel_downsample
from .errors import InvalidShape
from .nn import (AttentionWeights, Linear, MLPLayer, attention, l2_normalize, orthogonal,
                 sinusoidal_embedding)
from .saliency import eigen3_sym, eigen_ratios

DESCRIPTOR_BINS = 6
DESCRIPTOR_SCALES = (0.5, 1.0)
_MIX_SEED = 20240521          # fixed: the descriptor basis must not depend on the run seed


@dataclass(frozen=True)
class EncoderConfig:
    d_t: int = 64
    n_layers: int = 3
    super_cell: float = 0.10
    pool_levels: int = 2
    pool_radius_factor: float = 1.5
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("semantic encoder needs at least one attention layer")
        if self.d_t < 8:
            raise ValueError("d_t must be >= 8")

    def cells(self) -> list[float]:
        return [self.super_cell * 2.0 ** (l + 1) for l in range(self.pool_levels)]


def descriptor_basis(width: int, d_t: int) -> np.ndarray:
    """Fixed orthonormal mixing from raw invariants to ``d_t`` channels."""
    rng = np.random.default_rng(_MIX_SEED)
    return orthogonal(rng, width, d_t)


def _raw_invariants(support: np.ndarray, centers: np.ndarray, r: float, bins: int,
                    index: SpatialIndex) -> np.ndarray:
    m = centers.shape[0]
    ci, pj, dist = index.radius_pairs(centers, r)
    counts = np.bincount(ci, minlength=m).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    d = support[pj] - centers[ci]
    mean = np.stack([np.bincount(ci, weights=d[:, a], minlength=m) for a in range(3)], axis=1) / safe[:, None]
    dd = d - mean[ci]
    scat = np.empty((m, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(ci, weights=dd[:, a] * dd[:, b], minlength=m) / safe
            scat[:, a, b] = s
            scat[:, b, a] = s
    e = eigen3_sym(scat)
    r10, r21 = eigen_ratios(e)
    tr = e.sum(axis=1)
    variation = np.divide(e[:, 2], tr, out=np.zeros(m), where=tr > 0)
    offset = np.linalg.norm(mean, axis=1) / r
    # soft (linear) binning of normalised radial distance into `bins` shells
    t = np.clip(dist / r, 0.0, 1.0) * (bins - 1)
    lo = np.minimum(np.floor(t).astype(np.int64), bins - 2) if bins > 1 else np.zeros_like(ci)
    frac = t - lo
    hist = np.zeros((m, bins))
    np.add.at(hist, (ci, lo), 1.0 - frac)
    if bins > 1:
        np.add.at(hist, (ci, lo + 1), frac)
    hist /= safe[:, None]
    raw = np.column_stack([1.0 - r10, 1.0 - r21, 3.0 * variation, offset,
                           np.log1p(counts) / 4.0, hist])
    degenerate = counts <= 1
    raw[degenerate] = 0.0
    raw[degenerate, 4] = -1.0
    return raw


def local_descriptor(cloud, supers, r: float, d_t: int, scales=DESCRIPTOR_SCALES,
                     bins: int = DESCRIPTOR_BINS, index: SpatialIndex | None = None,
                     standardize: bool = True) -> np.ndarray:
    """Rigid-invariant handcrafted descriptor for every superpoint.

    Built per scale from eigenvalue ratios of the neighbourhood scatter, the
    log point count, the centroid offset and a soft radial shell histogram,
    then mixed to ``d_t`` channels by a fixed orthonormal basis and L2
    normalised. With ``standardize`` each raw column is z-scored over the
    centers of the call (skipped for a single center), which spreads the
    cosines between unrelated shapes. A center with no other point in reach
    gets a constant vector.
    """
    if not r > 0:
        raise ValueError("descriptor radius must be positive")
    support = as_points(cloud)
    centers = as_points(supers)
    index = index or SpatialIndex(support)
    raw = np.concatenate([_raw_invariants(support, centers, s * r, bins, index) for s in scales], axis=1)
    if standardize and centers.shape[0] > 1:
        isolated = np.all(raw[:, 4::5 + bins] == -1.0, axis=1)
        constant = raw[np.argmax(isolated)].copy()
        raw = (raw - raw.mean(axis=0)) / (raw.std(axis=0) + 1e-6)
        raw[isolated] = constant
    return l2_normalize(raw @ descriptor_basis(raw.shape[1], d_t))


# -- semantic pooling / upsampling -------------------------------------------------

def semantic_pool(points_fine, feats_fine, points_coarse, r: float, layer: MLPLayer,
                  index: SpatialIndex | None = None) -> np.ndarray:
    """Max-pool h(cat[f_j, f_j - seed_i]) over the fine points within r of each coarse point.

    The seed of coarse point i is the feature of its nearest fine point.
    """
    fine = as_points(points_fine)
    coarse = as_points(points_coarse)
    feats_fine = np.asarray(feats_fine, dtype=np.float64)
    if feats_fine.shape[0] != fine.shape[0]:
        raise InvalidShape("fine features and points disagree in length")
    index = index or SpatialIndex(fine)
    seed_idx, _ = nearest(coarse, fine)
    seed = feats_fine[seed_idx]
    ci, fj, _ = index.radius_pairs(coarse, r)
    out = seed.copy()
    if ci.size:
        # pairs are grouped by coarse index, so a segmented max gives the pooled rows
        order = np.argsort(ci, kind="stable")
        ci, fj = ci[order], fj[order]
        h = layer(np.concatenate([feats_fine[fj], feats_fine[fj] - seed[ci]], axis=1))
        starts = np.flatnonzero(np.r_[True, ci[1:] != ci[:-1]])
        out[ci[starts]] = np.maximum.reduceat(h, starts, axis=0)
    return out


def semantic_upsample(points_coarse, feats_coarse, points_fine, feats_fine, layer: MLPLayer,
                      r: float) -> np.ndarray:
    """Refresh each fine feature from its nearest coarse parent within r.

    Fine points with no coarse point in reach keep their feature.
    """
    coarse = as_points(points_coarse)
    fine = as_points(points_fine)
    feats_fine = np.asarray(feats_fine, dtype=np.float64)
    feats_coarse = np.asarray(feats_coarse, dtype=np.float64)
    parent, dist = nearest(fine, coarse)
    inside = dist <= r
    out = feats_fine.copy()
    if inside.any():
        out[inside] = layer(np.concatenate([feats_fine[inside], feats_coarse[parent[inside]]], axis=1))
    return out


def mh_self_attention(F, w: AttentionWeights) -> np.ndarray:
    return attention(F, F, w)


def mh_cross_attention(F_a, F_b, w: AttentionWeights) -> np.ndarray:
    return attention(F_a, F_b, w)


# -- semantic encoder ---------------------------------------------------------------

@dataclass(frozen=True)
class EncoderWeights:
    attention: tuple            # one AttentionWeights per layer in the plan
    pool: tuple                 # MLPLayer per pooling level
    upsample: tuple             # MLPLayer per pooling level
    fuse: Linear                # cat[F_hat, F_tilde] -> d_t

    @classmethod
    def init(cls, rng, cfg: EncoderConfig, value_gain=1.0) -> "EncoderWeights":
        d = cfg.d_t
        att = tuple(AttentionWeights.init(rng, d, cfg.heads, value_gain) for _ in range(cfg.n_layers))
        pool = tuple(MLPLayer.init(rng, 2 * d, d) for _ in range(cfg.pool_levels))
        up = tuple(MLPLayer.init(rng, 2 * d, d) for _ in range(cfg.pool_levels))
        fuse = Linear(np.vstack([np.eye(d), orthogonal(rng, d, d, 0.5)]), np.zeros(d))
        return cls(att, pool, up, fuse)


def encoder_plan(n_layers: int, pool_levels: int = 2) -> list[tuple[str, int]]:
    """(kind, level) for every attention layer; level 0 is the superpoint level.

    Self-attention runs before each pooling step, cross-attention at the
    coarsest level, and any remaining layers alternate there.
    """
    plan = []
    n_pre = min(max(n_layers - 1, 0), pool_levels)
    for l in range(n_pre):
        plan.append(("sa", l))
    kind = "ca"
    while len(plan) < n_layers:
        plan.append((kind, pool_levels))
        kind = "sa" if kind == "ca" else "ca"
    return plan


def semantic_encoder(F_p, F_q, points_p, points_q, cfg: EncoderConfig, weights: EncoderWeights):
    """Object-level context for superpoints: pool twice, exchange, decode back."""
    F_p = np.asarray(F_p, dtype=np.float64)
    F_q = np.asarray(F_q, dtype=np.float64)
    pyr_p = [as_points(points_p)]
    pyr_q = [as_points(points_q)]
    for cell in cfg.cells():
        pyr_p.append(voxel_downsample(pyr_p[-1], cell))
        pyr_q.append(voxel_downsample(pyr_q[-1], cell))
    radii = [cfg.pool_radius_factor * c for c in cfg.cells()]
    plan = encoder_plan(cfg.n_layers, cfg.pool_levels)
    feats_p = [F_p] + [None] * cfg.pool_levels
    feats_q = [F_q] + [None] * cfg.pool_levels
    level = 0
    for w, (kind, lvl) in zip(weights.attention, plan):
        while level < lvl:
            feats_p[level + 1] = semantic_pool(pyr_p[level], feats_p[level], pyr_p[level + 1],
                                               radii[level], weights.pool[level])
            feats_q[level + 1] = semantic_pool(pyr_q[level], feats_q[level], pyr_q[level + 1],
                                               radii[level], weights.pool[level])
            level += 1
        a, b = feats_p[level], feats_q[level]
        if kind == "sa":
            feats_p[level], feats_q[level] = mh_self_attention(a, w), mh_self_attention(b, w)
        else:
            feats_p[level], feats_q[level] = mh_cross_attention(a, b, w), mh_cross_attention(b, a, w)
    while level < cfg.pool_levels:
        feats_p[level + 1] = semantic_pool(pyr_p[level], feats_p[level], pyr_p[level + 1],
                                           radii[level], weights.pool[level])
        feats_q[level + 1] = semantic_pool(pyr_q[level], feats_q[level], pyr_q[level + 1],
                                           radii[level], weights.pool[level])
        level += 1
    for l in range(cfg.pool_levels - 1, -1, -1):
        feats_p[l] = semantic_upsample(pyr_p[l + 1], feats_p[l + 1], pyr_p[l], feats_p[l],
                                       weights.upsample[l], radii[l])
        feats_q[l] = semantic_upsample(pyr_q[l + 1], feats_q[l + 1], pyr_q[l], feats_q[l],
                                       weights.upsample[l], radii[l])
    return feats_p[0], feats_q[0]


def fuse_semantic(F_hat, F_tilde, layer: Linear) -> np.ndarray:
    F_hat = np.asarray(F_hat, dtype=np.float64)
    F_tilde = np.asarray(F_tilde, dtype=np.float64)
    if F_hat.shape[0] != F_tilde.shape[0]:
        raise InvalidShape(f"row counts differ: {F_hat.shape[0]} vs {F_tilde.shape[0]}")
    # unit rows on both sides, so the layer's block gains set the mix
    return layer(np.concatenate([l2_normalize(F_hat), l2_normalize(F_tilde)], axis=1))


# -- geometric transformer ----------------------------------------------------------

@dataclass(frozen=True)
class GeoWeights:
    self_layers: tuple      # AttentionWeights with bias_proj (distance embedding)
    cross_layers: tuple

    @classmethod
    def init(cls, rng, d, n_layers, heads=4, value_gain=1.0, bias_gain=1.0) -> "GeoWeights":
        s = tuple(AttentionWeights.init(rng, d, heads, value_gain, with_bias=True, bias_gain=bias_gain)
                  for _ in range(n_layers))
        c = tuple(AttentionWeights.init(rng, d, heads, value_gain) for _ in range(n_layers))
        return cls(s, c)


def distance_embedding(points, d_t: int, sigma_d: float) -> np.ndarray:
    dist = pairwise_distances(points) / sigma_d
    n = dist.shape[0]
    # symmetric in (i, j): embed the upper triangle once and mirror it
    iu, ju = np.triu_indices(n)
    out = np.empty((n, n, d_t))
    out[iu, ju] = sinusoidal_embedding(dist[iu, ju], d_t, 10000.0)
    out[ju, iu] = out[iu, ju]
    return out


def geometric_transformer(F_p, F_q, points_p, points_q, weights: GeoWeights, sigma_d: float):
    """Interleaved distance-biased self-attention and cross-attention."""
    F_p = np.asarray(F_p, dtype=np.float64)
    F_q = np.asarray(F_q, dtype=np.float64)
    d = F_p.shape[1]
    emb_p = distance_embedding(points_p, d, sigma_d)
    emb_q = distance_embedding(points_q, d, sigma_d)
    for ws, wc in zip(weights.self_layers, weights.cross_layers):
        F_p = attention(F_p, F_p, ws, emb_p)
        F_q = attention(F_q, F_q, ws, emb_q)
        F_p, F_q = attention(F_p, F_q, wc), attention(F_q, F_p, wc)
    return F_p, F_q
