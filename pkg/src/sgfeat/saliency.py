"""Intrinsic-shape-signature saliency: scatter matrices, eigenvalue ratios,
salient point selection and the salient score matrix."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .cloud import SpatialIndex, as_points
from .errors import InvalidMatrix

SYMMETRY_TOL = 1e-9
CLAMP_TOL = 1e-12


class SaliencyConfig(NamedTuple):
    r_salient: float = 0.10
    lambda10: float = 0.9
    lambda21: float = 0.9


class SalientSelection(NamedTuple):
    indices: np.ndarray
    fallback: bool   # True when nothing passed and the full index set was returned


def degeneracy_floor(trace) -> np.ndarray:
    return 1e-10 * np.asarray(trace, dtype=np.float64) + 1e-15


def scatter_matrices(support, centers, r: float, index: SpatialIndex | None = None):
    """Neighbourhood covariance around every center.

    For each center c the neighbourhood is the set of support points within r
    of c; the result is sum_j (p_j - mu)(p_j - mu)^T / |N| with mu the
    neighbourhood centroid. Returns (matrices (m, 3, 3), counts (m,)).
    """
    pts = as_points(support)
    ctr = as_points(centers)
    index = index or SpatialIndex(pts)
    ci, pj, _ = index.radius_pairs(ctr, r)
    m = ctr.shape[0]
    counts = np.bincount(ci, minlength=m).astype(np.float64)
    # work in center-relative coordinates to avoid cancellation far from the origin
    d = pts[pj] - ctr[ci]
    safe = np.maximum(counts, 1.0)
    mean = np.zeros((m, 3))
    np.add.at(mean, ci, d)
    mean /= safe[:, None]
    dd = d - mean[ci]
    outer = dd[:, :, None] * dd[:, None, :]
    scat = np.zeros((m, 3, 3))
    np.add.at(scat, ci, outer)
    scat /= safe[:, None, None]
    return scat, counts


def scatter_matrix(cloud, i: int, r_salient: float) -> np.ndarray:
    pts = as_points(cloud)
    scat, _ = scatter_matrices(pts, pts[i:i + 1], r_salient)
    return scat[0]


def eigen3_sym(m) -> np.ndarray:
    """Eigenvalues of a symmetric 3x3 matrix (or a stack of them), descending.

    Values in [-1e-12, 0) are clamped to 0.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.shape[-2:] != (3, 3):
        raise InvalidMatrix(f"expected 3x3 matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix("matrix entries must be finite")
    if np.abs(a - np.swapaxes(a, -1, -2)).max(initial=0.0) > SYMMETRY_TOL:
        raise InvalidMatrix("matrix is not symmetric")
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    e = np.linalg.eigvalsh(sym)[..., ::-1]
    e = np.where((e < 0) & (e >= -CLAMP_TOL), 0.0, e)
    return np.ascontiguousarray(e)


def eigen_ratios(e) -> tuple[np.ndarray, np.ndarray]:
    """(e1/e0, e2/e1) with ratio := 1 whenever the denominator is below the floor."""
    e = np.asarray(e, dtype=np.float64)
    eps = degeneracy_floor(e.sum(axis=-1))
    e0, e1, e2 = e[..., 0], e[..., 1], e[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        r10 = np.where(e0 >= eps, e1 / e0, 1.0)
        r21 = np.where(e1 >= eps, e2 / e1, 1.0)
    return np.clip(r10, 0.0, 1.0), np.clip(r21, 0.0, 1.0)


def gamma_score(e) -> np.ndarray | float:
    """Saliency (1 - e1/e0)(1 - e2/e1); zero for degenerate spectra."""
    r10, r21 = eigen_ratios(e)
    g = (1.0 - r10) * (1.0 - r21)
    return float(g) if np.ndim(g) == 0 else g


def saliency_scores(support, centers, r: float, index: SpatialIndex | None = None):
    """Eigenvalues, ratios and gamma for every center against a support cloud."""
    scat, counts = scatter_matrices(support, centers, r, index)
    e = eigen3_sym(scat)
    r10, r21 = eigen_ratios(e)
    return e, r10, r21, (1.0 - r10) * (1.0 - r21)


def select_salient(cloud, cfg: SaliencyConfig, index: SpatialIndex | None = None) -> SalientSelection:
    pts = as_points(cloud)
    _, r10, r21, _ = saliency_scores(pts, pts, cfg.r_salient, index)
    keep = np.nonzero((r10 < cfg.lambda10) & (r21 < cfg.lambda21))[0]
    if keep.size == 0:
        return SalientSelection(np.arange(pts.shape[0], dtype=np.int64), True)
    return SalientSelection(keep.astype(np.int64), False)


def salient_score_matrix(gamma_p, gamma_q) -> np.ndarray:
    return np.outer(np.asarray(gamma_p, dtype=np.float64), np.asarray(gamma_q, dtype=np.float64))
