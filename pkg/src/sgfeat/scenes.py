"""Synthetic indoor-like scenes with exact ground truth and partial-overlap scan pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, RigidTransform, as_points, random_transform
from .errors import InvalidInput, OverlapInfeasible
from .matching import CorrespondenceSet

Kind = Literal["plane", "box", "disk", "cylinder"]

OVERLAP_TOL = 0.05
NOISE_TRUNC = 3.0            # noise is truncated at this many sigmas per coordinate


@dataclass(frozen=True)
class Primitive:
    """A surface patch in its local frame, placed by a rotation vector and a centre.

    plane: size = (width, height) rectangle in local xy, centred
    box: size = (sx, sy, sz), all six faces, centred
    disk: size = (radius,), in local xy
    cylinder: size = (radius, height), lateral surface along local z, base at z = 0
    """

    kind: Kind
    size: tuple
    center: tuple = (0.0, 0.0, 0.0)
    rotvec: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        need = {"plane": 2, "box": 3, "disk": 1, "cylinder": 2}
        if self.kind not in need:
            raise InvalidInput(f"unknown primitive kind {self.kind!r}")
        size = tuple(float(s) for s in self.size)
        if len(size) != need[self.kind] or min(size) <= 0:
            raise InvalidInput(f"{self.kind} needs {need[self.kind]} positive size values")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "rotvec", tuple(float(c) for c in self.rotvec))

    @property
    def area(self) -> float:
        s = self.size
        if self.kind == "plane":
            return s[0] * s[1]
        if self.kind == "box":
            return 2.0 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2])
        if self.kind == "disk":
            return np.pi * s[0] ** 2
        return 2.0 * np.pi * s[0] * s[1]

    def pose(self) -> RigidTransform:
        v = np.asarray(self.rotvec)
        angle = float(np.linalg.norm(v))
        axis = v / angle if angle > 0 else np.array([0.0, 0.0, 1.0])
        return RigidTransform.from_axis_angle(axis, angle, self.center)

    def sample_local(self, rng: np.random.Generator, n: int) -> np.ndarray:
        s = self.size
        if self.kind == "plane":
            u = rng.uniform(-0.5, 0.5, size=(n, 2)) * s
            return np.column_stack([u, np.zeros(n)])
        if self.kind == "disk":
            r = s[0] * np.sqrt(rng.uniform(size=n))
            a = rng.uniform(0.0, 2.0 * np.pi, size=n)
            return np.column_stack([r * np.cos(a), r * np.sin(a), np.zeros(n)])
        if self.kind == "cylinder":
            a = rng.uniform(0.0, 2.0 * np.pi, size=n)
            z = rng.uniform(0.0, s[1], size=n)
            return np.column_stack([s[0] * np.cos(a), s[0] * np.sin(a), z])
        # box: pick faces in proportion to their area
        sx, sy, sz = s
        areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(s)
        axis = face // 2
        sign = np.where(face % 2 == 0, -0.5, 0.5)
        u[np.arange(n), axis] = sign * np.array(s)[axis]
        return u

    def bounds(self, pad: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        s = self.size
        if self.kind == "plane":
            lo, hi = np.array([-s[0] / 2, -s[1] / 2, 0.0]), np.array([s[0] / 2, s[1] / 2, 0.0])
        elif self.kind == "box":
            lo, hi = -np.array(s) / 2, np.array(s) / 2
        elif self.kind == "disk":
            lo, hi = np.array([-s[0], -s[0], 0.0]), np.array([s[0], s[0], 0.0])
        else:
            lo, hi = np.array([-s[0], -s[0], 0.0]), np.array([s[0], s[0], s[1]])
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        world = self.pose().apply(corners)
        return world.min(axis=0) - pad, world.max(axis=0) + pad


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    density: float = 1000.0          # points per square metre
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise InvalidInput("a scene needs at least one primitive")
        if not self.density > 0:
            raise InvalidInput("sampling density must be positive")


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Uniform surface samples, round(area * density) per primitive."""
    rng = np.random.default_rng(spec.seed)
    parts = []
    for prim in spec.primitives:
        n = int(round(prim.area * spec.density))
        if n == 0:
            continue
        parts.append(prim.pose().apply(prim.sample_local(rng, n)))
    pts = np.concatenate(parts) if parts else np.zeros((0, 3))
    return PointCloud(pts)


def fig1_primitives(jitter: float = 0.0, rng: np.random.Generator | None = None) -> tuple[Primitive, ...]:
    """Desk-scale hard case: a wall and the ground, a distant round table on four legs
    and two box chairs."""
    def j(v):
        if rng is None or jitter == 0:
            return tuple(v)
        mask = np.array([1.0, 1.0, 0.0])[:len(v)]           # horizontal only
        return tuple(np.asarray(v) + rng.uniform(-jitter, jitter, size=len(v)) * mask)

    top_h = 0.5
    leg_r, leg_z = 0.02, top_h
    tx, ty = j((0.7, 0.55))[:2]
    prims = [
        Primitive("plane", (2.4, 1.2), (0.0, 1.6, 0.6), (np.pi / 2, 0.0, 0.0)),   # wall, facing -y
        Primitive("plane", (2.4, 1.6), (0.0, 0.8, 0.0)),                          # ground
        Primitive("disk", (0.3,), (tx, ty, top_h)),
    ]
    for dx, dy in ((0.17, 0.17), (-0.17, 0.17), (0.17, -0.17), (-0.17, -0.17)):
        prims.append(Primitive("cylinder", (leg_r, leg_z), (tx + dx, ty + dy, 0.0)))
    prims.append(Primitive("box", (0.36, 0.36, 0.42), j((-0.6, 1.1, 0.21)), (0.0, 0.0, 0.3)))
    prims.append(Primitive("box", (0.32, 0.4, 0.46), j((-0.15, 0.45, 0.23)), (0.0, 0.0, -0.5)))
    return tuple(prims)


def fig1_spec(seed: int = 0, density: float = 700.0) -> SceneSpec:
    return SceneSpec(fig1_primitives(), density, seed)


# -- scan pairs ----------------------------------------------------------------------

@dataclass(frozen=True)
class ScanPair:
    source: PointCloud
    target: PointCloud
    T_gt: RigidTransform            # maps source coordinates onto the target frame
    gt_corr: CorrespondenceSet      # (source index, target index) of the same scene sample
    overlap: float
    meta: dict = field(default_factory=dict)


def _truncated_noise(rng, n: int, sigma: float) -> np.ndarray:
    if sigma == 0 or n == 0:
        return np.zeros((n, 3))
    out = rng.normal(size=(n, 3))
    bad = np.abs(out) > NOISE_TRUNC
    while bad.any():
        out[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(out) > NOISE_TRUNC
    return sigma * out


def overlap_fraction(src_aligned, tgt, tau: float) -> float:
    src = as_points(src_aligned)
    if src.shape[0] == 0:
        return 0.0
    tgt = as_points(tgt)
    if tgt.shape[0] == 0:
        return 0.0
    d, _ = cKDTree(tgt).query(src, k=1)
    return float(np.count_nonzero(d <= tau)) / src.shape[0]


def overlap_ratio(pair: ScanPair, tau: float = 0.05) -> float:
    """Fraction of source points with a target point within tau after T_gt alignment."""
    if not tau > 0:
        raise InvalidInput("tau must be positive")
    return overlap_fraction(pair.T_gt.apply(pair.source.points), pair.target.points, tau)


def _crop(s: np.ndarray, q: float):
    """Source keeps the lower q quantile of the projection, target the upper one."""
    if q >= 1.0:
        return np.arange(s.size), np.arange(s.size)
    lo = np.quantile(s, q)
    hi = np.quantile(s, 1.0 - q)
    return np.nonzero(s <= lo)[0], np.nonzero(s >= hi)[0]


def make_pair(scene, overlap_target: float, noise_sigma: float = 0.0, seed: int = 0, tau: float = 0.05,
              max_angle: float = np.pi, max_translation: float = 5.0, pair_id: str = "") -> ScanPair:
    """Two half-space crops of a scene, tuned so the overlap is within 0.05 of the target.

    The crop normal is a random horizontal direction tilted by up to ~10 degrees.
    The target scan stays in the scene frame; the source is moved by T_gt^-1.
    """
    if not 0 < overlap_target <= 1:
        raise InvalidInput("overlap target must lie in (0, 1]")
    if noise_sigma < 0:
        raise InvalidInput("noise sigma must be non-negative")
    pts = as_points(scene)
    n = pts.shape[0]
    if n == 0:
        raise InvalidInput("scene is empty")
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 2.0 * np.pi)
    normal = np.array([np.cos(a), np.sin(a), 0.0]) + rng.normal(scale=0.18, size=3)
    normal /= np.linalg.norm(normal)
    s = pts @ normal

    def measured(q):
        si, ti = _crop(s, q)
        return overlap_fraction(pts[si], pts[ti], tau), si, ti

    if overlap_target >= 1.0:
        q = 1.0
    else:
        # overlap grows with q; start from the shared-sample estimate 1 / (2 - o)
        lo, hi = 0.5, 1.0
        q = 1.0 / (2.0 - overlap_target)
        for _ in range(40):
            o, _, _ = measured(q)
            if abs(o - overlap_target) <= OVERLAP_TOL / 4:
                break
            if o < overlap_target:
                lo = q
            else:
                hi = q
            q = 0.5 * (lo + hi)
    o, si, ti = measured(q)
    if abs(o - overlap_target) > OVERLAP_TOL or si.size < 3 or ti.size < 3:
        raise OverlapInfeasible(f"overlap {overlap_target:.3f} unreachable (best {o:.3f})")

    T_gt = random_transform(rng, max_angle, max_translation)
    perm_s = rng.permutation(si.size) if q < 1.0 else np.arange(si.size)
    perm_t = rng.permutation(ti.size) if q < 1.0 else np.arange(ti.size)
    src_ids = si[perm_s]
    tgt_ids = ti[perm_t]
    src_scene = pts[src_ids] + _truncated_noise(rng, src_ids.size, noise_sigma)
    tgt_scene = pts[tgt_ids] + _truncated_noise(rng, tgt_ids.size, noise_sigma)
    source = PointCloud(T_gt.inverse().apply(src_scene))
    target = PointCloud(tgt_scene)

    # ground truth: positions in each scan that come from the same scene sample
    where_t = np.full(n, -1, dtype=np.int64)
    where_t[tgt_ids] = np.arange(tgt_ids.size)
    gi = np.nonzero(where_t[src_ids] >= 0)[0]
    gj = where_t[src_ids[gi]]
    gt = CorrespondenceSet(gi, gj, np.ones(gi.size), "dense")
    final = overlap_fraction(T_gt.apply(source.points), target.points, tau)
    if abs(final - overlap_target) > OVERLAP_TOL:
        raise OverlapInfeasible(f"overlap {overlap_target:.3f} unreachable under noise (got {final:.3f})")
    meta = {"pair_id": pair_id, "overlap_target": overlap_target, "noise_sigma": noise_sigma,
            "seed": seed, "crop_normal": normal.tolist(), "crop_quantile": q}
    return ScanPair(source, target, T_gt, gt, final, meta)
