"""Point storage, spatial queries, grid subsampling and rigid transforms.

All geometry is float64. Wherever a choice between equal candidates has to be
made (equal distances, equal scores) the lower index wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, InvalidMatrix, InvalidShape

Level = Literal["dense", "super", "mega"]

_ORTHO_TOL = 1e-9


def as_points(cloud) -> np.ndarray:
    """Return the (n, 3) float64 coordinate array of a cloud or array-like."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidShape(f"expected (n, 3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    level: Level = "dense"

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidShape(f"expected (n, 3) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidShape("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, indices, level: Level | None = None) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)],
                          self.level if level is None else level)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidMatrix("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise InvalidMatrix("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidMatrix("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidShape(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        K = np.array([[0.0, -axis[2], axis[1]],
                      [axis[2], 0.0, -axis[0]],
                      [-axis[1], axis[0], 0.0]])
        R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
        return cls(R, translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


def apply_transform(cloud, T: RigidTransform):
    if isinstance(cloud, PointCloud):
        return PointCloud(T.apply(cloud.points), cloud.level)
    return T.apply(cloud)


def voxel_downsample(cloud, cell: float):
    """Grid subsampling: one centroid per occupied voxel.

    Voxels are anchored at the frame origin (id = floor(coord / cell)) and the
    output is ordered by ascending lexicographic voxel id.
    """
    if not cell > 0:
        raise ValueError("cell must be positive")
    pts = as_points(cloud)
    if pts.shape[0] == 0:
        raise EmptyInput("cannot downsample an empty cloud")
    keys = np.floor(pts / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((counts.shape[0], 3))
    np.add.at(sums, inverse, pts)
    out = sums / counts[:, None]
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.level)
    return out


def _exact_dist(pts: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = pts - center
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


class SpatialIndex:
    """KD-tree over a fixed cloud whose answers equal a brute-force scan.

    The tree only proposes candidates; membership and ordering are decided by
    recomputing distances with one formula, so results do not depend on the
    tree's internal arithmetic.
    """

    def __init__(self, cloud):
        self.points = as_points(cloud)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return self.points.shape[0]

    def radius(self, center, r: float) -> np.ndarray:
        if not r > 0:
            raise ValueError("radius must be positive")
        c = np.asarray(center, dtype=np.float64).reshape(3)
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        cand = np.asarray(self._tree.query_ball_point(c, r * (1 + 1e-9) + 1e-12), dtype=np.int64)
        d = _exact_dist(self.points[cand], c)
        keep = d <= r
        cand, d = cand[keep], d[keep]
        order = np.lexsort((cand, d))
        return cand[order]

    def knn(self, center, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError("k must be >= 1")
        c = np.asarray(center, dtype=np.float64).reshape(3)
        n = len(self)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        k = min(k, n)
        dists, _ = self._tree.query(c, k=k)
        kth = float(np.atleast_1d(dists)[-1])
        # gather every point tied with (or inside) the k-th distance
        cand = np.asarray(self._tree.query_ball_point(c, kth * (1 + 1e-9) + 1e-12), dtype=np.int64)
        d = _exact_dist(self.points[cand], c)
        order = np.lexsort((cand, d))
        return cand[order][:k]

    def radius_pairs(self, centers, r: float):
        """All (center, point) index pairs with distance <= r, plus the distances.

        Pairs are sorted by (center, point index), so sums over a neighbourhood
        always run in the same order.
        """
        centers = as_points(centers)
        if self._tree is None or centers.shape[0] == 0:
            return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        hits = cKDTree(centers).sparse_distance_matrix(self._tree, r * (1 + 1e-9) + 1e-12,
                                                       output_type="ndarray")
        ci = hits["i"].astype(np.int64)
        pj = hits["j"].astype(np.int64)
        diff = self.points[pj] - centers[ci]
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        keep = d <= r
        ci, pj, d = ci[keep], pj[keep], d[keep]
        order = np.argsort(ci * len(self) + pj)
        return ci[order], pj[order], d[order]


def neighbors(index: SpatialIndex, center, *, r: float | None = None, k: int | None = None) -> np.ndarray:
    """Radius (``r``) or k-nearest (``k``) query, sorted by distance then index."""
    if (r is None) == (k is None):
        raise ValueError("pass exactly one of r= or k=")
    if r is not None:
        return index.radius(center, r)
    return index.knn(center, k)


def nearest(points_from, points_to) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ``points_to`` index for every row of ``points_from`` (lower index on ties)."""
    src = as_points(points_from)
    dst = as_points(points_to)
    if src.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if dst.shape[0] == 0:
        raise EmptyInput("nearest-neighbour target is empty")
    tree = cKDTree(dst)
    k = min(4, dst.shape[0])
    _, idx = tree.query(src, k=k)
    idx = np.asarray(idx).reshape(src.shape[0], k)
    diff = dst[idx] - src[:, None, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    order = np.lexsort((idx, d), axis=1)
    rows = np.arange(src.shape[0])
    best = order[:, 0]
    best_idx = idx[rows, best]
    best_d = d[rows, best]
    if k > 1:
        # all k candidates tied: the true minimum set may be larger than k
        unsure = np.nonzero(d.max(axis=1) <= best_d)[0]
        for i in unsure:
            cand = np.asarray(tree.query_ball_point(src[i], best_d[i] * (1 + 1e-9) + 1e-12), dtype=np.int64)
            dc = _exact_dist(dst[cand], src[i])
            o = np.lexsort((cand, dc))
            best_idx[i] = cand[o[0]]
            best_d[i] = dc[o[0]]
    return best_idx.astype(np.int64), best_d


@dataclass(frozen=True)
class NodePartition:
    assignment: np.ndarray          # dense index -> super index
    neighborhoods: tuple            # super index -> ascending dense indices

    @property
    def n_super(self) -> int:
        return len(self.neighborhoods)


def partition_from_assignment(assignment: np.ndarray, n_super: int) -> NodePartition:
    assignment = np.asarray(assignment, dtype=np.int64)
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(n_super + 1))
    hoods = tuple(order[bounds[s]:bounds[s + 1]] for s in range(n_super))
    return NodePartition(assignment, hoods)


def point_to_node(dense, super_) -> NodePartition:
    """Assign every dense point to its nearest superpoint."""
    d = as_points(dense)
    s = as_points(super_)
    if d.shape[0] == 0 or s.shape[0] == 0:
        raise EmptyInput("point_to_node needs nonempty dense and super clouds")
    assignment, _ = nearest(d, s)
    return partition_from_assignment(assignment, s.shape[0])


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> RigidTransform:
    """Rotation about a uniformly random axis by an angle uniform in [0, max_angle]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return RigidTransform.from_axis_angle(axis, angle)


def random_transform(rng: np.random.Generator, max_angle: float = np.pi,
                     max_translation: float = 1.0) -> RigidTransform:
    rot = random_rotation(rng, max_angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, max_translation)
    return RigidTransform(rot.rotation, t)


def pairwise_distances(a: np.ndarray, b: Sequence | np.ndarray | None = None) -> np.ndarray:
    a = as_points(a)
    b = a if b is None else as_points(b)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
