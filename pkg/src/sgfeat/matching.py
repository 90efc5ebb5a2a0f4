"""Superpoint score fusion, top-N_c selection and Sinkhorn dense matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np
from scipy.special import logsumexp

from .cloud import NodePartition
from .errors import InvalidInput, InvalidShape
from .nn import l2_normalize

ScoreKind = Literal["MS", "SS", "S"]
Level = Literal["super", "dense"]


@dataclass(frozen=True)
class ScoreMatrix:
    values: np.ndarray
    kind: ScoreKind = "MS"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidShape(f"score matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInput("score matrix entries must be finite")
        if self.kind not in ("MS", "SS", "S"):
            raise InvalidInput(f"unknown score kind {self.kind!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, ScoreMatrix) else np.asarray(m, dtype=np.float64)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Scored (source, target) index pairs; ``patch`` tags dense pairs with their patch pair."""

    src: np.ndarray
    tgt: np.ndarray
    score: np.ndarray
    level: Level = "super"
    patch: np.ndarray | None = None

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        tgt = np.asarray(self.tgt, dtype=np.int64).reshape(-1)
        score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if not (src.shape == tgt.shape == score.shape):
            raise InvalidShape("src, tgt and score must have equal length")
        if src.size and (src.min() < 0 or tgt.min() < 0):
            raise InvalidInput("correspondence indices must be non-negative")
        if not np.all(np.isfinite(score)):
            raise InvalidInput("correspondence scores must be finite")
        if self.level not in ("super", "dense"):
            raise InvalidInput(f"unknown correspondence level {self.level!r}")
        if src.size > 1:
            # the largest index bounds the key space, so (src, tgt) packs into one integer
            keys = src * (int(tgt.max()) + 1) + tgt
            if np.unique(keys).size != keys.size:
                raise InvalidInput("duplicate (source, target) pairs")
        patch = None
        if self.patch is not None:
            patch = np.asarray(self.patch, dtype=np.int64).reshape(-1)
            if patch.shape != src.shape:
                raise InvalidShape("patch tags must match the number of pairs")
        for a in (src, tgt, score) + ((patch,) if patch is not None else ()):
            a.setflags(write=False)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "tgt", tgt)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "patch", patch)

    def __len__(self) -> int:
        return int(self.src.shape[0])

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(s)) for i, j, s in zip(self.src, self.tgt, self.score)]

    def check_range(self, n_src: int, n_tgt: int) -> None:
        if len(self) and (self.src.max() >= n_src or self.tgt.max() >= n_tgt):
            raise InvalidInput("correspondence index out of range")

    @classmethod
    def empty(cls, level: Level = "dense") -> "CorrespondenceSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0), level, z if level == "dense" else None)


# -- superpoint scores ---------------------------------------------------------------

def feature_match_scores(F_p, F_q) -> ScoreMatrix:
    """Cosine similarity of every feature pair; zero-norm rows score 0."""
    F_p = np.asarray(F_p, dtype=np.float64)
    F_q = np.asarray(F_q, dtype=np.float64)
    if F_p.ndim != 2 or F_q.ndim != 2 or F_p.shape[1] != F_q.shape[1]:
        raise InvalidShape("feature matrices must be 2-D with equal width")
    ms = l2_normalize(F_p) @ l2_normalize(F_q).T
    return ScoreMatrix(np.clip(ms, -1.0, 1.0), "MS")


def combined_scores(MS, SS) -> ScoreMatrix:
    a, b = _values(MS), _values(SS)
    if a.shape != b.shape:
        raise InvalidShape(f"score shapes differ: {a.shape} vs {b.shape}")
    return ScoreMatrix(a * b, "S")


def topk_correspondences(S, N_c: int) -> CorrespondenceSet:
    """The N_c highest cells of S; ties go to the lower row, then the lower column."""
    if N_c < 1:
        raise InvalidInput("N_c must be at least 1")
    v = _values(S)
    flat = v.reshape(-1)
    # a stable sort of -score keeps row-major order among equal scores
    order = np.argsort(-flat, kind="stable")[:N_c]
    i, j = np.divmod(order, v.shape[1])
    return CorrespondenceSet(i, j, flat[order], "super")


class CandidateRegion(NamedTuple):
    region_p: np.ndarray     # superpoint indices of P in the region, ascending
    region_q: np.ndarray
    p_to_q: np.ndarray       # per region_p row, the region_q row of its best correspondence
    q_to_p: np.ndarray


def candidate_region(corr: CorrespondenceSet) -> CandidateRegion:
    """Region points and cross-frame partners from a superpoint correspondence set.

    Each point's partner is the other end of its highest-scoring correspondence
    (ties: the earlier correspondence in the set).
    """
    if len(corr) == 0:
        raise InvalidInput("empty correspondence set has no region")
    rp, src = np.unique(corr.src, return_inverse=True)
    rq, tgt = np.unique(corr.tgt, return_inverse=True)
    order = np.lexsort((np.arange(len(corr)), -corr.score))

    def best(key, other, n):
        out = np.full(n, -1, dtype=np.int64)
        for k in order[::-1]:          # later writes come from better-ranked pairs
            out[key[k]] = other[k]
        return out

    return CandidateRegion(rp, rq, best(src, tgt, rp.size), best(tgt, src, rq.size))


# -- Sinkhorn ------------------------------------------------------------------------

def _augment(scores: np.ndarray, dustbin_score: float) -> np.ndarray:
    m, n = scores.shape
    z = np.full((m + 1, n + 1), float(dustbin_score))
    z[:m, :n] = scores
    return z


def _marginals(m: int, n: int, with_dustbin: bool):
    # a dustbin row absorbs up to n units and a dustbin column up to m
    if with_dustbin:
        return np.r_[np.zeros(m), np.log(n)], np.r_[np.zeros(n), np.log(m)]
    return np.zeros(m), np.zeros(n)


def sinkhorn(scores, iters: int = 100, with_dustbin: bool = False, dustbin_score: float = 0.0) -> np.ndarray:
    """Log-domain Sinkhorn normalization; each iteration normalizes rows, then columns.

    Without a dustbin the target marginals are all ones, so square inputs become
    doubly stochastic. With a dustbin, one slack row and column filled with
    ``dustbin_score`` are appended; real rows and columns keep unit mass, the
    slack row carries n units and the slack column m. Only the real block is
    returned.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.size == 0:
        raise InvalidShape("scores must be a nonempty 2-D matrix")
    if not np.all(np.isfinite(s)) or not np.isfinite(dustbin_score):
        raise InvalidInput("sinkhorn scores must be finite")
    if iters < 1:
        raise InvalidInput("iters must be at least 1")
    m, n = s.shape
    z = _augment(s, dustbin_score) if with_dustbin else s.copy()
    log_mu, log_nu = _marginals(m, n, with_dustbin)
    u = np.zeros(z.shape[0])
    v = np.zeros(z.shape[1])
    for _ in range(iters):
        u = log_mu - logsumexp(z + v[None, :], axis=1)
        v = log_nu - logsumexp(z + u[:, None], axis=0)
    p = np.exp(z + u[:, None] + v[None, :])
    return p[:m, :n] if with_dustbin else p


def sinkhorn_batch(scores: np.ndarray, rows: np.ndarray, cols: np.ndarray, iters: int = 100,
                   dustbin_score: float = 0.0) -> np.ndarray:
    """Dustbin Sinkhorn over a padded batch (B, M, N) with true sizes ``rows``/``cols``.

    Iterates the same row-then-column updates as ``sinkhorn`` in scaling form
    on exp(z - max z), which is exact in float64 while the score range stays
    below ``_SCALING_RANGE``; wider ranges fall back to the log-domain loop.
    """
    s = np.asarray(scores, dtype=np.float64)
    B, M, N = s.shape
    if not np.all(np.isfinite(s)):
        raise InvalidInput("sinkhorn scores must be finite")
    out = np.zeros((B, M, N))
    if B == 0:
        return out
    row_ok = np.arange(M)[None, :] < rows[:, None]
    col_ok = np.arange(N)[None, :] < cols[:, None]
    z = np.full((B, M + 1, N + 1), float(dustbin_score))
    z[:, :M, :N] = s
    mask = np.zeros((B, M + 1, N + 1), dtype=bool)
    mask[:, :M, :N] = row_ok[:, :, None] & col_ok[:, None, :]
    mask[:, M, :N] = col_ok
    mask[:, :M, N] = row_ok
    mask[:, M, N] = True
    live = np.where(mask, z, -np.inf)
    top = live.reshape(B, -1).max(axis=1)
    low = np.where(mask, z, np.inf).reshape(B, -1).min(axis=1)
    if np.any(top - low > _SCALING_RANGE):
        for b in range(B):
            out[b, :rows[b], :cols[b]] = sinkhorn(s[b, :rows[b], :cols[b]], iters, True, dustbin_score)
        return out
    K = np.where(mask, np.exp(z - top[:, None, None]), 0.0)
    mu = np.concatenate([row_ok.astype(float), cols[:, None].astype(float)], axis=1)
    nu = np.concatenate([col_ok.astype(float), rows[:, None].astype(float)], axis=1)
    a = np.zeros_like(mu)
    c = np.ones_like(nu)
    for _ in range(iters):
        kv = np.einsum("bmn,bn->bm", K, c)
        a = np.divide(mu, kv, out=np.zeros_like(mu), where=kv > 0)
        ku = np.einsum("bmn,bm->bn", K, a)
        c = np.divide(nu, ku, out=np.zeros_like(nu), where=ku > 0)
    p = a[:, :, None] * K * c[:, None, :]
    return p[:, :M, :N]


_SCALING_RANGE = 600.0


# -- dense matching ------------------------------------------------------------------

class MatchConfig(NamedTuple):
    iters: int = 100
    dustbin_score: float = 0.0
    confidence: float = 0.05
    temperature: float = 0.1     # cosine scores are divided by this before Sinkhorn
    one_to_one: bool = True      # a dense point keeps only its best partner across patches


def mutual_max(A: np.ndarray, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Cells that are the maximum of both their row and column (first index on ties), >= floor."""
    if A.size == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z
    r = A.argmax(axis=1)
    c = A.argmax(axis=0)
    i = np.nonzero(c[r] == np.arange(A.shape[0]))[0]
    j = r[i]
    keep = A[i, j] >= floor
    return i[keep], j[keep]


def dense_match(patch_corr: CorrespondenceSet, partition_p: NodePartition, partition_q: NodePartition,
                F_dense_p, F_dense_q, cfg: MatchConfig = MatchConfig()) -> CorrespondenceSet:
    """Mutual-maximum Sinkhorn matches inside every matched patch pair.

    A dense pair found in several patches keeps its highest assignment value
    (ties: the earlier patch). Pairs are returned sorted by (source, target),
    tagged with the position of their patch pair in ``patch_corr``.
    """
    Fp = l2_normalize(np.asarray(F_dense_p, dtype=np.float64))
    Fq = l2_normalize(np.asarray(F_dense_q, dtype=np.float64))
    jobs = []
    for k, (a, b) in enumerate(zip(patch_corr.src, patch_corr.tgt)):
        ip = partition_p.neighborhoods[a]
        iq = partition_q.neighborhoods[b]
        if ip.size and iq.size:
            jobs.append((k, ip, iq))
    if not jobs:
        return CorrespondenceSet.empty("dense")
    rows = np.array([len(j[1]) for j in jobs])
    cols = np.array([len(j[2]) for j in jobs])
    S = np.zeros((len(jobs), rows.max(), cols.max()))
    for b, (_, ip, iq) in enumerate(jobs):
        S[b, :rows[b], :cols[b]] = (Fp[ip] @ Fq[iq].T) / cfg.temperature
    A = sinkhorn_batch(S, rows, cols, cfg.iters, cfg.dustbin_score)
    src, tgt, score, patch = [], [], [], []
    for b, (k, ip, iq) in enumerate(jobs):
        i, j = mutual_max(A[b, :rows[b], :cols[b]], cfg.confidence)
        src.append(ip[i])
        tgt.append(iq[j])
        score.append(A[b, i, j])
        patch.append(np.full(i.size, k, dtype=np.int64))
    src, tgt, score, patch = (np.concatenate(x) for x in (src, tgt, score, patch))
    # best score first, earlier patch on ties; keep the first occurrence of each pair
    order = np.lexsort((patch, -score))
    src, tgt, score, patch = src[order], tgt[order], score[order], patch[order]
    _, first = np.unique(np.stack([src, tgt], axis=1), axis=0, return_index=True)
    src, tgt, score, patch = src[first], tgt[first], score[first], patch[first]
    if cfg.one_to_one and src.size:
        order = np.lexsort((patch, tgt, src, -score))
        src, tgt, score, patch = src[order], tgt[order], score[order], patch[order]
        _, fs = np.unique(src, return_index=True)
        _, ft = np.unique(tgt, return_index=True)
        keep = np.zeros(src.size, dtype=bool)
        keep[np.intersect1d(fs, ft)] = True
        src, tgt, score, patch = src[keep], tgt[keep], score[keep], patch[keep]
        order = np.lexsort((tgt, src))
        src, tgt, score, patch = src[order], tgt[order], score[order], patch[order]
    return CorrespondenceSet(src, tgt, score, "dense", patch)
