"""Core geometric types: point clouds, rigid transforms, boxes and exact NN search.

All lengths are in meters. Arrays held by the types are copied on construction
and flagged read-only, so instances can be shared freely between threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import EmptyCloud, NonPositiveCell, ValidationError

FRAMES = ("world", "sensor", "model")

# origin tags for merged clouds
ORIGIN_CURRENT = 0
ORIGIN_CARRIED = 1


def _frozen(a, dtype=np.float64, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    frame: str = "world"
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _frozen(self.points, shape=(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.frame not in FRAMES:
            raise ValidationError(f"unknown frame {self.frame!r}")
        if self.normals is not None:
            nrm = _frozen(self.normals, shape=(-1, 3))
            if len(nrm) != len(pts):
                raise ValidationError("normals count must equal point count")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValidationError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.origin is not None:
            org = _frozen(self.origin, dtype=np.uint8).reshape(-1)
            if len(org) != len(pts):
                raise ValidationError("origin tag count must equal point count")
            object.__setattr__(self, "origin", org)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, frame: str = "world") -> "PointCloud":
        return cls(np.zeros((0, 3)), frame=frame)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.intp)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            self.frame,
            None if self.origin is None else self.origin[idx],
        )

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.frame, self.origin)

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptyCloud("centroid of an empty cloud")
        return self.points.mean(axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.frame == other.frame
            and np.array_equal(self.points, other.points)
            and _opt_equal(self.normals, other.normals)
            and _opt_equal(self.origin, other.origin)
        )

    __hash__ = object.__hash__


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def concatenate(clouds: Sequence[PointCloud]) -> PointCloud:
    """Stack clouds that share a frame. Normals/origin survive only if all carry them."""
    if not clouds:
        return PointCloud.empty()
    frame = clouds[0].frame
    if any(c.frame != frame for c in clouds):
        raise ValidationError("cannot concatenate clouds in different frames")
    pts = np.concatenate([c.points for c in clouds])
    nrm = None
    if all(c.normals is not None for c in clouds):
        nrm = np.concatenate([c.normals for c in clouds])
    org = None
    if all(c.origin is not None for c in clouds):
        org = np.concatenate([c.origin for c in clouds])
    return PointCloud(pts, nrm, frame, org)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation ``R`` and translation ``t`` acting as ``p -> R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation, shape=(3, 3))
        t = _frozen(self.translation, shape=(3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("transform must be finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValidationError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "RigidTransform":
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Unit quaternion in (x, y, z, w) order with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def rotation_angle_to(self, other: "RigidTransform") -> float:
        """Angle in radians of the relative rotation between two poses."""
        return rotation_angle(self.rotation.T @ other.rotation)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = object.__hash__


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def apply_transform(cloud: PointCloud, T: RigidTransform, frame: Optional[str] = None) -> PointCloud:
    """Map every point through ``T``; normals are rotated. ``frame`` relabels the output."""
    if T == RigidTransform.identity():
        pts = cloud.points
        nrm = cloud.normals
    else:
        pts = T.apply(cloud.points)
        nrm = None if cloud.normals is None else cloud.normals @ T.rotation.T
        if nrm is not None:
            nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, frame or cloud.frame, cloud.origin)


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.min, shape=(3,))
        hi = _frozen(self.max, shape=(3,))
        if np.any(lo > hi):
            raise ValidationError("Aabb min must be <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    @property
    def bottom_center(self) -> np.ndarray:
        c = self.center.copy()
        c[2] = self.min[2]
        return c

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((pts >= self.min - tol) & (pts <= self.max + tol), axis=1)

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def inflated(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def translated(self, offset) -> "Aabb":
        return Aabb(self.min + offset, self.max + offset)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Aabb):
            return NotImplemented
        return np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max)

    __hash__ = object.__hash__


def compute_aabb(cloud: PointCloud | np.ndarray) -> Aabb:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("bounding box of an empty cloud")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def point_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distances; the single formula used for every reported NN distance."""
    diff = points - q
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


class NnIndex:
    """Exact nearest-neighbour index over a fixed cloud.

    Backed by a k-d tree. Near-ties are re-resolved against the exact distance
    formula so that the reported neighbour is the smallest index among all points
    at the minimal distance.
    """

    def __init__(self, points: np.ndarray):
        self.points = _frozen(points, shape=(-1, 3))
        if len(self.points) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised nearest search: returns ``(ids, distances)`` per query row."""
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(Q) == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        k = min(2, len(self.points))
        d, ids = self._tree.query(Q, k=k)
        if k == 1:
            d = d[:, None]
            ids = ids[:, None]
        ids = ids[:, 0].astype(np.intp)
        dist = point_distances(self.points[ids], Q)
        if k == 2:
            slack = d[:, 0] * 1e-9 + 1e-12
            suspect = np.nonzero(d[:, 1] <= d[:, 0] + slack)[0]
            if len(suspect):
                radii = d[suspect, 0] * (1 + 1e-9) + 1e-12
                balls = self._tree.query_ball_point(Q[suspect], radii)
                for row, cand in zip(suspect, balls):
                    cand = np.asarray(cand, dtype=np.intp)
                    cd = point_distances(self.points[cand], Q[row])
                    order = np.lexsort((cand, cd))
                    ids[row] = cand[order[0]]
                    dist[row] = cd[order[0]]
        return ids, dist

    def query_radius(self, q, r: float) -> np.ndarray:
        return np.sort(np.asarray(self._tree.query_ball_point(np.asarray(q, float), r), dtype=np.intp))

    @property
    def tree(self) -> cKDTree:
        return self._tree


def build_nn_index(cloud: PointCloud | np.ndarray) -> NnIndex:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return NnIndex(pts)


def nearest(index: NnIndex, q) -> tuple[int, float]:
    ids, dist = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return int(ids[0]), float(dist[0])


def voxel_downsample(cloud: PointCloud, cell: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Voxels are anchored at the world origin; output is ordered by voxel key.
    Normals (if any) are averaged and renormalised; origin tags are dropped.
    """
    if not cell > 0:
        raise NonPositiveCell(f"voxel cell must be positive, got {cell}")
    if len(cloud) == 0:
        return PointCloud(cloud.points, frame=cloud.frame)
    keys = np.floor(cloud.points / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    sums = np.zeros((n, 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    # rounding can push a centroid an ulp past its voxel's face; step it back so
    # a second pass sees the same voxels (idempotence)
    vox = np.unique(keys, axis=0)
    for _ in range(64):
        off = np.floor(centroids / cell).astype(np.int64) - vox
        if not off.any():
            break
        centroids = np.where(off != 0, np.nextafter(centroids, np.where(off < 0, np.inf, -np.inf)), centroids)
    normals = None
    if cloud.normals is not None:
        nsum = np.zeros((n, 3))
        np.add.at(nsum, inverse, cloud.normals)
        norm = np.linalg.norm(nsum, axis=1, keepdims=True)
        ok = norm[:, 0] > 1e-12
        if np.all(ok):
            normals = nsum / norm
    return PointCloud(centroids, normals, cloud.frame)


def estimate_normals(
    cloud: PointCloud,
    k: int = 10,
    toward: Optional[Iterable[float]] = None,
    view_dir: Optional[Iterable[float]] = None,
) -> PointCloud:
    """PCA normals from ``k`` nearest neighbours.

    Orientation: towards the point ``toward`` (sensor origin) if given, else so
    that ``n . view_dir >= 0``.
    """
    pts = cloud.points
    n = len(pts)
    if n < 3:
        raise EmptyCloud("need at least 3 points for normal estimation")
    kk = min(k, n)
    _, nbr = cKDTree(pts).query(pts, k=kk)
    neigh = pts[nbr]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if toward is not None:
        ref = np.asarray(toward, dtype=np.float64) - pts
    elif view_dir is not None:
        ref = np.broadcast_to(np.asarray(view_dir, dtype=np.float64), pts.shape)
    else:
        ref = None
    if ref is not None:
        flip = np.einsum("ij,ij->i", normals, ref) < 0
        normals = np.where(flip[:, None], -normals, normals)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(normals)


def look_at(position, target, up_hint=(1.0, 0.0, 0.0), fallback=(0.0, 1.0, 0.0)) -> RigidTransform:
    """Camera-to-world pose at ``position`` whose +z optical axis points at ``target``.

    The image x-axis is the projection of ``up_hint`` onto the image plane, or of
    ``fallback`` when the optical axis is parallel to ``up_hint``.
    """
    p = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - p
    z = z / np.linalg.norm(z)
    x = None
    for hint in (up_hint, fallback):
        h = np.asarray(hint, dtype=np.float64)
        proj = h - np.dot(h, z) * z
        if np.linalg.norm(proj) > 1e-6:
            x = proj / np.linalg.norm(proj)
            break
    y = np.cross(z, x)
    R = orthonormalize(np.column_stack([x, y, z]))
    return RigidTransform(R, p)
