"""Weighted Procrustes, local-to-global registration and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .cloud import RigidTransform, as_points
from .errors import DegenerateSet, InvalidInput, InvalidShape, RegistrationFailed, UndefinedMetric
from .matching import CorrespondenceSet

RANK_TOL = 1e-12


def procrustes(p, q, w=None) -> RigidTransform:
    """argmin_{R,t} sum_k w_k |R p_k + t - q_k|^2 with det(R) = +1."""
    p = as_points(p)
    q = as_points(q)
    if p.shape != q.shape:
        raise InvalidShape(f"point sets differ in shape: {p.shape} vs {q.shape}")
    n = p.shape[0]
    if n < 3:
        raise DegenerateSet(f"need at least 3 correspondences, got {n}")
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != n or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInput("weights must be finite, non-negative and one per pair")
    total = w.sum()
    if total <= 0:
        raise DegenerateSet("all weights are zero")
    w = w / total
    pc = w @ p
    qc = w @ q
    dp = p - pc
    dq = q - qc
    H = (dp * w[:, None]).T @ dq
    # rank of the weighted source spread; fewer than two directions leaves a free rotation
    spread = np.linalg.svd((dp * np.sqrt(w)[:, None]), compute_uv=False)
    if spread[0] == 0 or spread[1] <= RANK_TOL * spread[0]:
        raise DegenerateSet("correspondences are collinear or coincident")
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, qc - R @ pc)


def weighted_procrustes(corr: CorrespondenceSet, points_p, points_q, weights=None) -> RigidTransform:
    p = as_points(points_p)
    q = as_points(points_q)
    corr.check_range(p.shape[0], q.shape[0])
    return procrustes(p[corr.src], q[corr.tgt], weights)


# -- local-to-global registration ----------------------------------------------------

@dataclass(frozen=True)
class LGRConfig:
    tau_a: float = 0.05
    iterations: int = 5
    min_size: int = 3
    kernel: float = 0.2     # refit weights fall off with residual at kernel * tau_a; 0 keeps plain scores

    def __post_init__(self):
        if not self.tau_a > 0:
            raise InvalidInput("acceptance radius must be positive")
        if self.kernel < 0:
            raise InvalidInput("kernel scale must be >= 0")
        if self.iterations < 1:
            raise InvalidInput("LGR needs at least one refinement iteration")
        if self.min_size < 3:
            raise InvalidInput("hypotheses need at least 3 correspondences")


class LGRResult(NamedTuple):
    transform: RigidTransform
    inliers: np.ndarray        # positions (in the canonical order) of final inliers
    patch: int                 # patch tag of the winning hypothesis
    n_hypotheses: int


def _residuals(T: RigidTransform, p, q):
    return np.linalg.norm(T.apply(p) - q, axis=1)


def _canonical(corr: CorrespondenceSet):
    order = np.lexsort((corr.tgt, corr.src))
    patch = corr.patch if corr.patch is not None else np.zeros(len(corr), dtype=np.int64)
    return corr.src[order], corr.tgt[order], corr.score[order], patch[order]


def lgr_solve(dense_corr: CorrespondenceSet, points_p, points_q, cfg: LGRConfig = LGRConfig()) -> LGRResult:
    """Per-patch hypotheses, global inlier scoring, then iterative refits on the inliers."""
    P = as_points(points_p)
    Q = as_points(points_q)
    dense_corr.check_range(P.shape[0], Q.shape[0])
    # canonical order so the result does not depend on how the set was listed
    src, tgt, score, patch = _canonical(dense_corr)
    p, q = P[src], Q[tgt]
    w = np.maximum(score, 0.0)
    best = None
    n_hyp = 0
    for tag in np.unique(patch):
        sel = np.nonzero(patch == tag)[0]
        if sel.size < cfg.min_size:
            continue
        ws = w[sel] if w[sel].sum() > 0 else None
        try:
            T = procrustes(p[sel], q[sel], ws)
        except DegenerateSet:
            continue
        n_hyp += 1
        res = _residuals(T, p, q)
        inl = res < cfg.tau_a
        key = (-int(inl.sum()), float(res[inl].sum()), int(tag))
        if best is None or key < best[0]:
            best = (key, T, int(tag))
    if best is None:
        raise RegistrationFailed("no patch yields a valid hypothesis")
    _, T, tag = best
    res = _residuals(T, p, q)
    inl = np.nonzero(res < cfg.tau_a)[0]
    for _ in range(cfg.iterations):
        if inl.size < 3:
            break
        ws = w[inl] if w[inl].sum() > 0 else np.ones(inl.size)
        if cfg.kernel > 0:
            # Geman-McClure reweighting: near-miss pairs inside tau_a stop pulling the fit
            ws = ws / (1.0 + (res[inl] / (cfg.kernel * cfg.tau_a)) ** 2) ** 2
        try:
            T_new = procrustes(p[inl], q[inl], ws)
        except DegenerateSet:
            break
        T = T_new
        res = _residuals(T, p, q)
        inl = np.nonzero(res < cfg.tau_a)[0]
    return LGRResult(T, inl, tag, n_hyp)


def lgr(dense_corr: CorrespondenceSet, points_p, points_q, cfg: LGRConfig = LGRConfig()) -> RigidTransform:
    return lgr_solve(dense_corr, points_p, points_q, cfg).transform


# -- metrics -------------------------------------------------------------------------

def inlier_ratio(corr: CorrespondenceSet, points_p, points_q, T_gt: RigidTransform, tau: float = 0.1) -> float:
    if not tau > 0:
        raise InvalidInput("tau must be positive")
    if len(corr) == 0:
        return 0.0
    P = as_points(points_p)
    Q = as_points(points_q)
    corr.check_range(P.shape[0], Q.shape[0])
    res = _residuals(T_gt, P[corr.src], Q[corr.tgt])
    return float(np.count_nonzero(res < tau)) / len(corr)


def feature_matching_recall(per_pair_ir, threshold: float = 0.05) -> float:
    if not 0 < threshold < 1:
        raise InvalidInput("threshold must lie in (0, 1)")
    ir = np.asarray(list(per_pair_ir), dtype=np.float64)
    if ir.size == 0:
        return 0.0
    return float(np.count_nonzero(ir > threshold)) / ir.size


def rmse_and_rr(T_pred: RigidTransform, T_gt: RigidTransform, gt_corr: CorrespondenceSet, points_p,
                points_q=None, threshold: float = 0.2) -> tuple[float, bool]:
    """RMSE of T_pred over the ground-truth pairs and whether it is below ``threshold``.

    Targets are the stored target points; without them they are T_gt p, the
    noise-free positions.
    """
    if len(gt_corr) == 0:
        raise UndefinedMetric("RMSE needs at least one ground-truth pair")
    P = as_points(points_p)
    p = P[gt_corr.src]
    q = T_gt.apply(p) if points_q is None else as_points(points_q)[gt_corr.tgt]
    d = T_pred.apply(p) - q
    rmse = float(np.sqrt(np.mean(np.einsum("ij,ij->i", d, d))))
    return rmse, rmse < threshold


def rre_rte(T_pred: RigidTransform, T_gt: RigidTransform) -> tuple[float, float]:
    c = (np.trace(T_pred.rotation.T @ T_gt.rotation) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    rte = float(np.linalg.norm(T_pred.translation - T_gt.translation))
    return rre, rte


def kitti_success(rre: float, rte: float) -> bool:
    return bool(rre < 5.0 and rte < 2.0)


@dataclass(frozen=True)
class PairMetrics:
    pair_id: str
    ir: float
    rmse: float
    success: bool
    rre: float
    rte: float

    def as_dict(self) -> dict:
        return {"pair_id": self.pair_id, "ir": self.ir, "rmse": self.rmse, "success": self.success,
                "rre": self.rre, "rte": self.rte}


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics; RRE and RTE are means over the successfully registered pairs."""

    rr: float
    ir: float
    fmr: float
    rre: float | None
    rte: float | None
    pairs: tuple[PairMetrics, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("rr", "ir", "fmr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInput(f"{name} must lie in [0, 1], got {v}")
        for name in ("rre", "rte"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise InvalidInput(f"{name} must be non-negative")

    def as_dict(self) -> dict:
        return {"rr": self.rr, "ir": self.ir, "fmr": self.fmr, "rre": self.rre, "rte": self.rte,
                "pairs": [p.as_dict() for p in self.pairs]}


def summarize(pairs, fmr_threshold: float = 0.05) -> MetricReport:
    pairs = tuple(pairs)
    if not pairs:
        return MetricReport(0.0, 0.0, 0.0, None, None, ())
    ok = [p for p in pairs if p.success]
    irs = [p.ir for p in pairs]
    return MetricReport(
        rr=len(ok) / len(pairs),
        ir=float(np.mean(irs)),
        fmr=feature_matching_recall(irs, fmr_threshold),
        rre=float(np.mean([p.rre for p in ok])) if ok else None,
        rte=float(np.mean([p.rte for p in ok])) if ok else None,
        pairs=pairs,
    )
