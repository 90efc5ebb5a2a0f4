"""High-order saliency transformer on the candidate overlap region.

Every pair (i, j) of region points is scored through the triangles it forms
with the K farthest anchors of i. The three interior angles of each triangle
are sinusoidally embedded, projected, and max-pooled over the anchors; the
pooled embeddings bias the keys of an intra-frame self-attention and, as
cross-frame differences, the keys of a saliency cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.polynomial import chebyshev as C

from ._kernels import pooled_angle_embeddings
from .cloud import NodePartition, as_points, pairwise_distances
from .errors import EmptyAnchors, InvalidShape
from .nn import AttentionWeights, Linear, attention, l2_normalize, orthogonal, sinusoidal_embedding, softmax

ANGLE_SLOTS = 3          # angle at i, angle at j, angle at the anchor


@dataclass(frozen=True)
class HOTConfig:
    K: int = 64
    n_layers: int = 6
    sigma_h: float = 1.0
    sigma_a: float = 2.0
    d_t: int = 64
    pooling: str = "max"        # "max" or "mean"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_layers < 2 or self.n_layers % 2:
            raise ValueError("n_layers must be an even number >= 2")
        if not self.sigma_h > 0:
            raise ValueError("sigma_h must be positive")
        if self.pooling not in ("max", "mean"):
            raise ValueError("pooling must be 'max' or 'mean'")


# -- anchors and triangles ----------------------------------------------------------

def anchor_table(region, K: int) -> np.ndarray:
    """(n, min(K, n-1)) farthest-first anchor indices for every region point."""
    pts = as_points(region)
    n = pts.shape[0]
    if n < 2:
        raise EmptyAnchors("a region needs at least two points to have anchors")
    k = min(K, n - 1)
    d = pairwise_distances(pts)
    idx = np.broadcast_to(np.arange(n), (n, n))
    # sort each row by (-distance, index); the point itself (distance 0) sorts last
    d = np.where(np.eye(n, dtype=bool), -np.inf, d)
    order = np.lexsort((idx, -d), axis=1)
    return np.ascontiguousarray(order[:, :k])


def select_anchors(region, i: int, K: int) -> np.ndarray:
    pts = as_points(region)
    n = pts.shape[0]
    if n < 2:
        raise EmptyAnchors("a region needs at least two points to have anchors")
    diff = pts - pts[i]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    others = np.array([j for j in range(n) if j != i], dtype=np.int64)
    order = np.lexsort((others, -d[others]))
    return others[order][:min(K, n - 1)]


def _vertex_angle(u, v):
    cr = np.cross(u, v)
    s = np.sqrt(np.einsum("...k,...k->...", cr, cr))
    c = np.einsum("...k,...k->...", u, v)
    return np.arctan2(s, c), s


def triangle_angles_batch(a, b, c):
    """Interior angles at a, b, c (broadcasting over leading axes) and a degeneracy flag.

    Collinear triangles get pi at the middle vertex and 0 elsewhere; triangles
    with coincident vertices get (0, 0, pi).
    """
    a, b, c = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(c, float))
    ab, ac, bc = b - a, c - a, c - b
    alpha_a, s = _vertex_angle(ab, ac)
    alpha_b, _ = _vertex_angle(-ab, bc)
    alpha_c, _ = _vertex_angle(-ac, -bc)
    lab = np.einsum("...k,...k->...", ab, ab)
    lac = np.einsum("...k,...k->...", ac, ac)
    lbc = np.einsum("...k,...k->...", bc, bc)
    coincident = (lab == 0) | (lac == 0) | (lbc == 0)
    collinear = s <= 1e-12 * np.sqrt(lab * lac)
    out = np.stack([alpha_a, alpha_b, alpha_c], axis=-1)
    out = np.where(coincident[..., None], np.array([0.0, 0.0, np.pi]), out)
    return out, coincident | collinear


def triangle_angles(a, b, c):
    ang, flag = triangle_angles_batch(a, b, c)
    return tuple(float(x) for x in ang), bool(flag)


def sin_embed_angle(theta, d_t: int, sigma_a: float) -> np.ndarray:
    return sinusoidal_embedding(theta, d_t, sigma_a)


# -- angle embeddings ---------------------------------------------------------------

def _slot_angles(region: np.ndarray, anchors: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """(len(rows), n, k, 3) angles of triangle (i, j, anchor) at i, j and the anchor."""
    pi = region[rows][:, None, None, :]
    pj = region[None, :, None, :]
    py = region[anchors[rows]][:, None, :, :]
    ang, _ = triangle_angles_batch(pi, pj, py)
    return ang


class AngleProjector:
    """Evaluates theta -> sin_embed(theta) @ W for many angles.

    The map is a smooth function of one variable on [0, pi], so it is
    represented by a Chebyshev expansion in x = 2 theta / pi - 1 whose
    truncation error is checked against the direct formula at construction.
    When the expansion would not be cheaper (or not accurate) the direct
    formula is used.
    """

    FIT_NODES = 64
    TOL = 1e-13

    def __init__(self, weight: np.ndarray, sigma_a: float):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.sigma_a = sigma_a
        d = self.weight.shape[0]
        self.coef = None
        n = self.FIT_NODES
        k = np.arange(n)
        xk = np.cos(np.pi * (k + 0.5) / n)
        values = self._direct(np.pi * (xk + 1.0) / 2.0)
        # discrete Chebyshev transform at Gauss nodes
        T = np.cos(np.outer(np.arange(n), np.pi * (k + 0.5) / n))
        coef = (2.0 / n) * (T @ values)
        coef[0] *= 0.5
        scale = max(np.abs(coef).max(), 1e-300)
        tail = np.abs(coef).max(axis=1) / scale
        # coefficients fall to the rounding floor (~1e-16) well before n
        keep = np.nonzero(tail > 1e-14)[0]
        deg = int(keep[-1]) + 3 if keep.size else 1
        if deg < d and deg < n:
            coef = coef[:deg]
            theta = np.linspace(0.0, np.pi, 1001)
            err = np.abs(self._cheb_eval(theta, coef) - self._direct(theta)).max()
            if err <= self.TOL * max(1.0, np.abs(values).max()):
                self.coef = coef

    def _direct(self, theta):
        d = self.weight.shape[0]
        return sinusoidal_embedding(theta, d, self.sigma_a) @ self.weight

    @staticmethod
    def _basis(theta, deg):
        x = 2.0 * np.asarray(theta) / np.pi - 1.0
        B = np.empty(x.shape + (deg,))
        B[..., 0] = 1.0
        if deg > 1:
            B[..., 1] = x
        for j in range(2, deg):
            B[..., j] = 2.0 * x * B[..., j - 1] - B[..., j - 2]
        return B

    def _cheb_eval(self, theta, coef):
        return self._basis(theta, coef.shape[0]) @ coef

    def __call__(self, theta) -> np.ndarray:
        if self.coef is None:
            return self._direct(theta)
        return self._cheb_eval(theta, self.coef)

    def critical_points(self) -> list[np.ndarray]:
        """Per output channel, the stationary points of the series in x on [-1, 1]."""
        if getattr(self, "_crit", None) is not None:
            return self._crit
        out = []
        for c in range(self.coef.shape[1]):
            dc = C.chebder(self.coef[:, c])
            roots = C.chebroots(dc) if dc.size > 1 else np.empty(0)
            x = roots.real[(np.abs(roots.imag) < 1e-6) & (np.abs(roots.real) <= 1.0 + 1e-9)]
            ddc = C.chebder(dc)
            for _ in range(3):   # polish with Newton steps
                h = C.chebval(x, ddc)
                x = np.where(h != 0, x - C.chebval(x, dc) / np.where(h != 0, h, 1.0), x)
            out.append(np.sort(np.clip(x, -1.0, 1.0)))
        self._crit = out
        return out


@dataclass(frozen=True)
class AngleWeights:
    w1: np.ndarray      # angle at i
    w2: np.ndarray      # angle at j
    w3: np.ndarray      # angle at the anchor

    @classmethod
    def init(cls, rng, d, gain=1.0) -> "AngleWeights":
        return cls(*(orthogonal(rng, d, d, gain) for _ in range(ANGLE_SLOTS)))

    def slots(self):
        return (self.w1, self.w2, self.w3)

    def projectors(self, sigma_a: float) -> list["AngleProjector"]:
        cache = self.__dict__.setdefault("_projectors", {})
        if sigma_a not in cache:
            cache[sigma_a] = [AngleProjector(w, sigma_a) for w in self.slots()]
        return cache[sigma_a]


def angle_pool(region, anchors, i: int, j: int, wa: AngleWeights, sigma_a: float = 2.0,
               pooling: str = "max") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled (g_yij, g_yji, g_iyj) for one ordered pair, straight from the formula."""
    pts = as_points(region)
    anc = np.asarray(anchors, dtype=np.int64)
    if anc.ndim == 2:
        anc = anc[i]
    if anc.size == 0:
        raise EmptyAnchors(f"point {i} has no anchors")
    d = wa.w1.shape[0]
    ang, _ = triangle_angles_batch(pts[i], pts[j], pts[anc])
    out = []
    for s, w in enumerate(wa.slots()):
        proj = sin_embed_angle(ang[:, s], d, sigma_a) @ w
        out.append(proj.max(axis=0) if pooling == "max" else proj.mean(axis=0))
    return tuple(out)


def pair_angle_embeddings(region, anchors: np.ndarray, wa: AngleWeights, sigma_a: float = 2.0,
                          pooling: str = "max", chunk: int = 200_000, method: str = "fast") -> np.ndarray:
    """(3, n, n, d) pooled angle embeddings for every ordered pair of region points.

    ``method="dense"`` evaluates every triangle with numpy; ``"fast"`` uses the
    compiled candidate search, which agrees with it to rounding.
    """
    pts = as_points(region)
    n = pts.shape[0]
    d = wa.w1.shape[0]
    k = anchors.shape[1]
    projectors = wa.projectors(sigma_a)
    if method == "fast" and all(p.coef is not None for p in projectors):
        return _pooled_fast(pts, np.ascontiguousarray(anchors, dtype=np.int64), projectors, pooling)
    G = np.empty((ANGLE_SLOTS, n, n, d))
    step = max(1, chunk // max(1, n * k))
    for start in range(0, n, step):
        rows = np.arange(start, min(n, start + step))
        ang = _slot_angles(pts, anchors, rows)                  # (r, n, k, 3)
        for s, proj in enumerate(projectors):
            e = proj(ang[..., s])                              # (r, n, k, d)
            G[s, rows] = e.max(axis=2) if pooling == "max" else e.mean(axis=2)
    return G


def _pooled_fast(pts, anchors, projectors, pooling):
    d = projectors[0].coef.shape[1]
    deg_max = max(p.coef.shape[0] for p in projectors)
    coefs = np.zeros((ANGLE_SLOTS, deg_max, d))
    degs = np.zeros(ANGLE_SLOTS, dtype=np.int64)
    crits = [p.critical_points() for p in projectors]
    c_max = max(1, max(len(x) for cs in crits for x in cs))
    crit = np.zeros((ANGLE_SLOTS, d, c_max))
    ncrit = np.zeros((ANGLE_SLOTS, d), dtype=np.int64)
    for s, p in enumerate(projectors):
        coefs[s, :p.coef.shape[0]] = p.coef
        degs[s] = p.coef.shape[0]
        for c, x in enumerate(crits[s]):
            crit[s, c, :len(x)] = x
            ncrit[s, c] = len(x)
    return pooled_angle_embeddings(pts, anchors, coefs, degs, crit, ncrit, pooling == "max")


# -- attention layers ---------------------------------------------------------------

@dataclass(frozen=True)
class HOSelfWeights:
    att: AttentionWeights       # single head; bias_proj is W^G
    agg: Linear                 # d -> d, applied to the summed angle embeddings


@dataclass(frozen=True)
class HOCrossWeights:
    att: AttentionWeights       # single head; bias_proj is W^H
    agg: Linear                 # 3d -> d, applied to the concatenated differences


@dataclass(frozen=True)
class HOTWeights:
    angles: AngleWeights
    self_layers: tuple
    cross_layers: tuple
    fuse: Linear                # cat[F_backbone, F_o] -> d
    propagate: Linear           # cat[F_dense, fused parent] -> d

    @classmethod
    def init(cls, rng, cfg: HOTConfig, value_gain=1.0, bias_gain=1.0, parent_gain=0.5) -> "HOTWeights":
        d = cfg.d_t
        groups = cfg.n_layers // 2
        wa = AngleWeights.init(rng, d)
        s = tuple(HOSelfWeights(AttentionWeights.init(rng, d, 1, value_gain, True, bias_gain),
                                Linear.init(rng, d, d, 1.0 / np.sqrt(3.0))) for _ in range(groups))
        c = tuple(HOCrossWeights(AttentionWeights.init(rng, d, 1, value_gain, True, bias_gain),
                                 Linear.init(rng, 3 * d, d)) for _ in range(groups))
        fuse = Linear(np.vstack([np.eye(d), orthogonal(rng, d, d, 0.5)]), np.zeros(d))
        prop = Linear(np.vstack([np.eye(d), orthogonal(rng, d, d, parent_gain)]), np.zeros(d))
        return cls(wa, s, c, fuse, prop)


def ho_self_attention(F, G, w: HOSelfWeights) -> np.ndarray:
    """Self-attention whose keys carry Linear(g_yij + g_yji + g_iyj) W^G.

    ``G`` is the (3, n, n, d) output of :func:`pair_angle_embeddings`, or None
    for a region without anchors (no geometric bias).
    """
    F = np.asarray(F, dtype=np.float64)
    if G is None:
        return attention(F, F, w.att)
    gbar = w.agg(G.sum(axis=0))
    return attention(F, F, w.att, gbar)


class Partners(NamedTuple):
    p_to_q: np.ndarray     # region-P index -> region-Q index of its candidate partner
    q_to_p: np.ndarray


def cross_differences(G_a, G_b, a_to_b, b_to_a, sigma_h: float) -> np.ndarray:
    """(n_a, n_b, 3d) angle-embedding differences between the two frames.

    For query i of frame a and key j of frame b, frame a contributes the pair
    (i, partner of j) and frame b the pair (partner of i, j); each frame pools
    over its own anchors.
    """
    if G_a is None or G_b is None:
        return None
    ga = G_a[:, :, b_to_a, :]                 # (3, n_a, n_b, d)
    gb = G_b[:, a_to_b, :, :]                 # (3, n_a, n_b, d)
    diff = (ga - gb) / sigma_h
    return np.concatenate(list(diff), axis=-1)


def ho_cross_attention(F_a, F_b, G_a, G_b, a_to_b, b_to_a, w: HOCrossWeights, sigma_h: float) -> np.ndarray:
    F_a = np.asarray(F_a, dtype=np.float64)
    F_b = np.asarray(F_b, dtype=np.float64)
    diff = cross_differences(G_a, G_b, a_to_b, b_to_a, sigma_h)
    if diff is None:
        return attention(F_a, F_b, w.att)
    return attention(F_a, F_b, w.att, w.agg(diff))


def region_embeddings(region, cfg: HOTConfig, wa: AngleWeights):
    pts = as_points(region)
    if pts.shape[0] < 2:
        return None
    anchors = anchor_table(pts, cfg.K)
    return pair_angle_embeddings(pts, anchors, wa, cfg.sigma_a, cfg.pooling)


def hot_forward(F_p, F_q, region_p, region_q, partners: Partners, cfg: HOTConfig, weights: HOTWeights,
                embeddings=None):
    """Run the interleaved (self P, self Q, cross both ways) groups over the regions."""
    F_p = np.asarray(F_p, dtype=np.float64)
    F_q = np.asarray(F_q, dtype=np.float64)
    if F_p.shape[0] != len(as_points(region_p)) or F_q.shape[0] != len(as_points(region_q)):
        raise InvalidShape("region features and points disagree in length")
    if embeddings is None:
        G_p = region_embeddings(region_p, cfg, weights.angles)
        G_q = region_embeddings(region_q, cfg, weights.angles)
    else:
        G_p, G_q = embeddings
    for ws, wc in zip(weights.self_layers, weights.cross_layers):
        F_p = ho_self_attention(F_p, G_p, ws)
        F_q = ho_self_attention(F_q, G_q, ws)
        F_p, F_q = (ho_cross_attention(F_p, F_q, G_p, G_q, partners.p_to_q, partners.q_to_p, wc, cfg.sigma_h),
                    ho_cross_attention(F_q, F_p, G_q, G_p, partners.q_to_p, partners.p_to_q, wc, cfg.sigma_h))
    return F_p, F_q


def fuse_and_propagate(F_backbone_super, F_o, region: np.ndarray, partition: NodePartition, F_dense,
                       weights: HOTWeights) -> np.ndarray:
    """Dense features carrying the fused high-order feature of their superpoint.

    ``region`` lists the superpoint index of every row of ``F_o``. Dense points
    whose superpoint is outside the region see a zero parent block.
    """
    F_backbone_super = np.asarray(F_backbone_super, dtype=np.float64)
    F_o = np.asarray(F_o, dtype=np.float64)
    F_dense = np.asarray(F_dense, dtype=np.float64)
    region = np.asarray(region, dtype=np.int64)
    if F_o.shape[0] != region.shape[0]:
        raise InvalidShape("F_o rows must match the region index list")
    if F_dense.shape[0] != partition.assignment.shape[0]:
        raise InvalidShape("dense features and partition disagree in length")
    d = F_dense.shape[1]
    if F_o.shape[1] != d or F_backbone_super.shape[1] != d:
        raise InvalidShape("feature widths differ")
    # unit rows, so the propagation gain sets the parent's weight against the dense descriptor
    fused = l2_normalize(weights.fuse(np.concatenate([l2_normalize(F_backbone_super[region]), l2_normalize(F_o)],
                                                     axis=1)))
    parent_block = np.zeros((partition.n_super, d))
    parent_block[region] = fused
    in_region = np.zeros(partition.n_super, dtype=bool)
    in_region[region] = True
    parents = partition.assignment
    pb = np.where(in_region[parents][:, None], parent_block[parents], 0.0)
    return weights.propagate(np.concatenate([F_dense, pb], axis=1))


# -- gradient verification of the saliency cross-attention -------------------------

PARAM_NAMES = ("wq", "wk", "wv", "wh", "wc", "bc")
INPUT_NAMES = ("xp", "xq", "gd")


def cross_core(xp, xq, gd, wq, wk, wv, wh, wc, bc):
    """Attention output z (no residual/normalisation) of the saliency cross-attention.

    gd is the (n, m, 3d) concatenation of scaled angle differences.
    """
    d = xp.shape[1]
    gbar = gd @ wc + bc
    q = xp @ wq
    k = xq @ wk
    v = xq @ wv
    e = (q @ k.T + np.einsum("nd,nmd->nm", q, gbar @ wh)) / np.sqrt(d)
    a = softmax(e, axis=1)
    return a @ v


def cross_core_grad(xp, xq, gd, wq, wk, wv, wh, wc, bc, cotangent=None):
    """Value of sum(cotangent * z) and its gradient for every input and parameter."""
    d = xp.shape[1]
    s = np.sqrt(d)
    gbar = gd @ wc + bc
    hb = gbar @ wh
    q = xp @ wq
    k = xq @ wk
    v = xq @ wv
    e = (q @ k.T + np.einsum("nd,nmd->nm", q, hb)) / s
    a = softmax(e, axis=1)
    z = a @ v
    C = np.ones_like(z) if cotangent is None else cotangent
    loss = float((C * z).sum())
    da = C @ v.T
    dv = a.T @ C
    de = a * (da - (a * da).sum(axis=1, keepdims=True)) / s
    dq = de @ k + np.einsum("nm,nmd->nd", de, hb)
    dk = de.T @ q
    dhb = de[:, :, None] * q[:, None, :]
    grads = {
        "wh": np.einsum("nmd,nme->de", gbar, dhb),
    }
    dgbar = dhb @ wh.T
    grads["wc"] = np.einsum("nmc,nmd->cd", gd, dgbar)
    grads["bc"] = dgbar.sum(axis=(0, 1))
    grads["gd"] = dgbar @ wc.T
    grads["wq"] = xp.T @ dq
    grads["xp"] = dq @ wq.T
    grads["wk"] = xq.T @ dk
    grads["wv"] = xq.T @ dv
    grads["xq"] = dk @ wk.T + dv @ wv.T
    return loss, grads


def random_cross_instance(rng, n=6, m=6, d=8, scale=1.0):
    inst = {
        "xp": rng.normal(size=(n, d)),
        "xq": rng.normal(size=(m, d)),
        "gd": rng.normal(size=(n, m, 3 * d)),
    }
    weights = {
        "wq": scale * rng.normal(size=(d, d)) / np.sqrt(d),
        "wk": scale * rng.normal(size=(d, d)) / np.sqrt(d),
        "wv": scale * rng.normal(size=(d, d)) / np.sqrt(d),
        "wh": scale * rng.normal(size=(d, d)) / np.sqrt(d),
        "wc": scale * rng.normal(size=(3 * d, d)) / np.sqrt(3 * d),
        "bc": scale * rng.normal(size=d),
    }
    return weights, inst


GRAD_FLOOR = 1e-3   # share of the largest gradient below which blocks compare absolutely


def _rel_err(a, f, floor):
    gap = np.abs(a - f).max(initial=0.0)
    if gap == 0:
        return 0.0
    denom = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0), floor)
    return float(gap / denom)


def grad_check_cross_attention(weights: dict, instance: dict, step: float = 1e-5,
                               names=PARAM_NAMES + INPUT_NAMES) -> float:
    """Max relative error between analytic and central-difference gradients of sum(z).

    Each gradient block is compared normwise; blocks whose true gradient is
    (analytically) zero, such as the aggregation bias, which shifts every key of a
    row equally, are measured against GRAD_FLOOR times the largest gradient.
    """
    args = {k: np.array(v, dtype=np.float64) for k, v in {**instance, **weights}.items()}
    _, grads = cross_core_grad(**args)
    top = max(np.abs(g).max(initial=0.0) for g in grads.values())
    floor = GRAD_FLOOR * top if top > 0 else 1.0
    worst = 0.0
    for name in names:
        x = args[name]
        fd = np.zeros_like(x)
        flat = x.reshape(-1)
        g = fd.reshape(-1)
        for t in range(flat.size):
            orig = flat[t]
            flat[t] = orig + step
            up = cross_core(**args).sum()
            flat[t] = orig - step
            down = cross_core(**args).sum()
            flat[t] = orig
            g[t] = (up - down) / (2.0 * step)
        worst = max(worst, _rel_err(grads[name], fd, floor))
    return worst
