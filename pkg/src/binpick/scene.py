"""Synthetic bin scenes: object models, pile generation, depth rendering, pick disturbance."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import io as bio
from .errors import PlacementFailure, UnknownInstance, ValidationError
from .geometry import Aabb, NnIndex, PointCloud, RigidTransform
from .raycast import intersect_meshes

MIN_SEPARATION = 0.001
MAX_ATTEMPTS = 1000


@dataclass(frozen=True, eq=False)
class ObjectModel:
    vertices: np.ndarray
    faces: np.ndarray
    sample_cloud: PointCloud
    model_id: str
    # model-frame rotations mapping the shape onto itself; used for error metrics
    symmetries: tuple = (np.eye(3),)
    source: Optional[str] = None

    def __post_init__(self):
        if len(self.sample_cloud) < 500:
            raise ValidationError("model sample cloud needs at least 500 points")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @cached_property
    def index(self) -> NnIndex:
        return NnIndex(self.sample_cloud.points)

    @cached_property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.sample_cloud.points, dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def extents(self) -> np.ndarray:
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)


def sample_surface(vertices, faces, n: int, seed: int = 0, return_faces: bool = False):
    """Area-weighted uniform sampling of a triangle mesh.

    With ``return_faces`` the index of the source triangle of each point is
    returned as well.
    """
    rng = np.random.default_rng(seed)
    tris = np.asarray(vertices)[np.asarray(faces)]
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = rng.choice(len(tris), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tris[which, 0], tris[which, 1], tris[which, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return (pts, which) if return_faces else pts


def make_model(
    vertices,
    faces,
    model_id: str,
    density: float = 1.0e6,
    symmetries: Sequence[np.ndarray] = (np.eye(3),),
    seed: int = 0,
    source: Optional[str] = None,
) -> ObjectModel:
    """Build a model; ``density`` is sample points per square meter of surface."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    tris = v[f]
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1).sum()
    n = max(500, int(round(area * density)))
    pts, which = sample_surface(v, f, n, seed, return_faces=True)
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
    return ObjectModel(v, f, PointCloud(pts, normals[which], frame="model"), model_id, tuple(symmetries), source)


def block_mesh(extents) -> tuple[np.ndarray, np.ndarray]:
    hx, hy, hz = np.asarray(extents, dtype=np.float64) / 2.0
    v = np.array(
        [[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    )
    # vertex index = 4*(sx>0) + 2*(sy>0) + (sz>0); outward-facing triangles
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ]
    )
    return v, f


def make_block(extents=(0.06, 0.03, 0.02), density: float = 1.0e6, seed: int = 0) -> ObjectModel:
    v, f = block_mesh(extents)
    syms = [np.eye(3)] + [Rotation.from_rotvec(np.pi * ax).as_matrix() for ax in np.eye(3)]
    return make_model(v, f, "block", density, syms, seed)


def prism_mesh(polygon, depth: float) -> tuple[np.ndarray, np.ndarray]:
    """Extrude a counter-clockwise polygon along z, centred on its area centroid.

    The caps are fan-triangulated from vertex 0, so the polygon must be
    star-shaped with respect to that vertex.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    n = len(poly)
    # area centroid
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    cx = ((x + xn) * cross).sum() / (6 * area)
    cy = ((y + yn) * cross).sum() / (6 * area)
    poly = poly - [cx, cy]
    h = depth / 2.0
    verts = np.vstack([np.column_stack([poly, np.full(n, -h)]), np.column_stack([poly, np.full(n, h)])])
    faces = []
    for i in range(1, n - 1):
        faces.append([0, i + 1, i])  # bottom, facing -z
        faces.append([n, n + i, n + i + 1])  # top, facing +z
    for i in range(n):
        j = (i + 1) % n
        faces.append([i, j, n + j])
        faces.append([i, n + j, n + i])
    return verts, np.asarray(faces)


def make_l_prism(
    arm_x: float = 0.06, arm_y: float = 0.04, thickness: float = 0.015, depth: float = 0.02,
    density: float = 1.0e6, seed: int = 0,
) -> ObjectModel:
    """Asymmetric L-shaped test part (unequal arms, no rotational symmetry)."""
    t = thickness
    poly = [(0, 0), (arm_x, 0), (arm_x, t), (t, t), (t, arm_y), (0, arm_y)]
    v, f = prism_mesh(poly, depth)
    return make_model(v, f, "l_prism", density, (np.eye(3),), seed)


def load_model(path, density: float = 1.0e6, seed: int = 0) -> ObjectModel:
    """Load a mesh file or a ``builtin:block`` / ``builtin:l_prism`` reference."""
    spec = str(path)
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name == "block":
            m = make_block(density=density, seed=seed)
        elif name == "l_prism":
            m = make_l_prism(density=density, seed=seed)
        else:
            raise ValidationError(f"unknown builtin model {name!r}")
        return replace(m, source=spec)
    v, f = bio.read_mesh(path)
    ext = v.max(axis=0) - v.min(axis=0)
    syms = [np.eye(3)]
    # axis-aligned box meshes centred at the origin get their D2 symmetry group
    if len(f) == 12 and np.allclose(np.abs(v), ext / 2, atol=1e-12):
        syms += [Rotation.from_rotvec(np.pi * ax).as_matrix() for ax in np.eye(3)]
    return make_model(v, f, Path(path).stem, density, syms, seed, source=str(path))


@dataclass(frozen=True)
class Instance:
    instance_id: int
    pose: RigidTransform


@dataclass(frozen=True, eq=False)
class Scene:
    box: Aabb
    instances: tuple
    model: ObjectModel
    seed: int = 0

    def __post_init__(self):
        ids = [i.instance_id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise ValidationError("instance ids must be unique")
        object.__setattr__(self, "instances", tuple(self.instances))

    def get(self, instance_id: int) -> Instance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise UnknownInstance(instance_id)

    def ids(self) -> list[int]:
        return [i.instance_id for i in self.instances]

    def instance_points(self, instance_id: int) -> np.ndarray:
        return self.get(instance_id).pose.apply(self.model.sample_cloud.points)


@dataclass(frozen=True)
class SensorIntrinsics:
    horizontal_fov: float = np.deg2rad(58.0)
    vertical_fov: float = np.deg2rad(45.0)
    width: int = 320
    height: int = 240
    min_range: float = 0.2
    max_range: float = 2.0
    noise_sigma: float = 0.0015

    def __post_init__(self):
        for name in ("horizontal_fov", "vertical_fov"):
            v = getattr(self, name)
            if not 0 < v < np.pi:
                raise ValidationError(f"{name} must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")
        if not 0 <= self.min_range < self.max_range:
            raise ValidationError("need 0 <= min_range < max_range")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, row-major pixel order."""
        tx = np.tan(self.horizontal_fov / 2)
        ty = np.tan(self.vertical_fov / 2)
        u = (2 * (np.arange(self.width) + 0.5) / self.width - 1) * tx
        v = (2 * (np.arange(self.height) + 0.5) / self.height - 1) * ty
        vv, uu = np.meshgrid(v, u, indexing="ij")
        d = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def in_frustum(self, sensor: RigidTransform, points) -> np.ndarray:
        """Points inside the angular field of view and the range limits."""
        p = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - sensor.translation) @ sensor.rotation
        z = p[:, 2]
        rng = np.linalg.norm(p, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = (
                (z > 0)
                & (np.abs(p[:, 0] / z) <= np.tan(self.horizontal_fov / 2))
                & (np.abs(p[:, 1] / z) <= np.tan(self.vertical_fov / 2))
            )
        return ok & (rng >= self.min_range) & (rng <= self.max_range)


@dataclass(frozen=True)
class PickDisturbance:
    contact_radius: float = 0.02
    max_translation: float = 0.01
    max_rotation: float = np.deg2rad(10.0)

    def __post_init__(self):
        if min(self.contact_radius, self.max_translation, self.max_rotation) < 0:
            raise ValidationError("disturbance parameters must be non-negative")


def box_triangles(box: Aabb) -> np.ndarray:
    """Bottom and four walls of the open-top box (no lid)."""
    v, f = block_mesh(box.extents)
    tris = (v + box.center)[f]
    # drop the two +z (lid) triangles
    return tris[:10]


def _drop_height(local_pts, xy, floor_z, others: Optional[np.ndarray], gap: float) -> float:
    """Lowest z offset at which ``local_pts + (xy, z)`` rests on the floor or on ``others``.

    Resting against other points keeps every pair at least ``gap`` apart.
    """
    z_floor = floor_z - local_pts[:, 2].min()
    if others is None or len(others) == 0:
        return z_floor
    moved_xy = local_pts[:, :2] + xy
    sdm = cKDTree(moved_xy).sparse_distance_matrix(cKDTree(others[:, :2]), gap, output_type="coo_matrix")
    if sdm.nnz == 0:
        return z_floor
    rows, cols = sdm.row, sdm.col
    dxy = np.linalg.norm(moved_xy[rows] - others[cols, :2], axis=1)
    need = others[cols, 2] - local_pts[rows, 2] + np.sqrt(np.maximum(gap**2 - dxy**2, 0.0))
    return max(z_floor, float(need.max()))


def _contact_subset(model: ObjectModel, limit: int = 2500) -> np.ndarray:
    pts = model.sample_cloud.points
    if len(pts) <= limit:
        return pts
    return pts[:: int(np.ceil(len(pts) / limit))]


def generate_pile(
    model: ObjectModel,
    count: int,
    box: Aabb,
    seed: int,
    clearance: float = 0.0,
    wall_margin: float = 0.005,
) -> Scene:
    """Sequentially drop ``count`` randomly oriented instances into ``box``.

    Each instance gets a random orientation and a random horizontal position
    inside the walls (minus ``wall_margin``), then is lowered until it touches
    the floor or a previously placed instance. With ``clearance > 0`` a
    placement closer than that to any earlier instance is rejected and redrawn.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    local = _contact_subset(model)
    placed: list[np.ndarray] = []
    instances = []
    for iid in range(count):
        others = np.vstack(placed) if placed else None
        tree = cKDTree(others) if (clearance > 0 and others is not None) else None
        for _ in range(MAX_ATTEMPTS):
            R = Rotation.random(random_state=rng).as_matrix()
            pts = local @ R.T
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            xmin = box.min[:2] + wall_margin - lo[:2]
            xmax = box.max[:2] - wall_margin - hi[:2]
            if np.any(xmin > xmax):
                continue
            xy = xmin + rng.random(2) * (xmax - xmin)
            z = _drop_height(pts, xy, box.min[2], others, MIN_SEPARATION)
            t = np.array([xy[0], xy[1], z])
            if tree is not None:
                d, _ = tree.query(pts + t, k=1)
                if d.min() < clearance:
                    continue
            break
        else:
            raise PlacementFailure(f"could not place instance {iid} after {MAX_ATTEMPTS} attempts")
        instances.append(Instance(iid, RigidTransform(R, t)))
        placed.append(pts + t)
    return Scene(box, tuple(instances), model, seed)


def raycast_scene(scene: Scene, origins: np.ndarray, dirs: np.ndarray, include_box: bool = True):
    """First-hit distance along each ray and the id of what was hit.

    Label ``-1`` marks a miss and ``-2`` the box; otherwise the instance id.
    """
    tri_model = scene.model.triangles
    meshes = [inst.pose.apply(tri_model.reshape(-1, 3)).reshape(-1, 3, 3) for inst in scene.instances]
    labels = [inst.instance_id for inst in scene.instances]
    if include_box:
        meshes.append(box_triangles(scene.box))
        labels.append(-2)
    t, m = intersect_meshes(origins, dirs, meshes)
    lab = np.where(m >= 0, np.asarray(labels + [-1])[m], -1)
    return t, lab


def render_depth(
    scene: Scene,
    sensor: RigidTransform,
    intr: SensorIntrinsics,
    seed: int = 0,
    return_labels: bool = False,
    include_box: bool = True,
):
    """Ray-cast one ray per pixel from ``sensor`` (camera-to-world, +z forward).

    Returns a world-frame cloud in row-major pixel order; with ``return_labels``
    also the per-point hit label (instance id, or -2 for box surfaces).
    """
    dirs = intr.ray_directions() @ sensor.rotation.T
    origins = np.broadcast_to(sensor.translation, dirs.shape)
    t, lab = raycast_scene(scene, np.ascontiguousarray(origins), dirs, include_box)
    keep = np.isfinite(t) & (t >= intr.min_range) & (t <= intr.max_range)
    t = t[keep]
    if intr.noise_sigma > 0:
        t = t + np.random.default_rng(seed).normal(0.0, intr.noise_sigma, size=len(t))
    pts = sensor.translation + t[:, None] * dirs[keep]
    cloud = PointCloud(pts, frame="world")
    if return_labels:
        return cloud, lab[keep]
    return cloud


def contact_neighbors(scene: Scene, target: int, radius: float) -> list[int]:
    """Instances whose sample clouds come closer than ``radius`` to the target's."""
    if radius <= 0:
        return []
    tree = cKDTree(scene.instance_points(target))
    out = []
    for inst in scene.instances:
        if inst.instance_id == target:
            continue
        d, _ = tree.query(scene.instance_points(inst.instance_id), k=1, distance_upper_bound=radius)
        if np.min(d) < radius:
            out.append(inst.instance_id)
    return out


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def apply_pick(scene: Scene, target: int, d: PickDisturbance, seed: int, wall_margin: float = 0.005) -> Scene:
    """Remove ``target`` and perturb the instances it was touching.

    Neighbours within ``contact_radius`` receive a random rotation (about their
    own origin, angle <= max_rotation) and translation (<= max_translation),
    are kept inside the walls, and are dropped onto the floor or the remaining
    instances. All other instances keep their transforms unchanged.
    """
    scene.get(target)
    neighbors = set(contact_neighbors(scene, target, d.contact_radius))
    rng = np.random.default_rng(seed)
    local = _contact_subset(scene.model)
    poses = {i.instance_id: i.pose for i in scene.instances if i.instance_id != target}
    for iid in sorted(neighbors):
        pose = poses[iid]
        angle = rng.random() * d.max_rotation
        dR = Rotation.from_rotvec(_random_unit(rng) * angle).as_matrix()
        dt = _random_unit(rng) * rng.random() * d.max_translation
        R = dR @ pose.rotation
        pts = local @ R.T
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        xy = pose.translation[:2] + dt[:2]
        xmin = scene.box.min[:2] + wall_margin - lo[:2]
        xmax = scene.box.max[:2] - wall_margin - hi[:2]
        xy = np.clip(xy, xmin, np.maximum(xmin, xmax))
        others = [local @ p.rotation.T + p.translation for k, p in poses.items() if k != iid]
        others_arr = np.vstack(others) if others else None
        z = _drop_height(pts, xy, scene.box.min[2], others_arr, MIN_SEPARATION)
        poses[iid] = RigidTransform(R, [xy[0], xy[1], z])
    instances = tuple(Instance(i.instance_id, poses[i.instance_id]) for i in scene.instances if i.instance_id != target)
    return Scene(scene.box, instances, scene.model, scene.seed)


def scene_to_json(scene: Scene) -> dict:
    return {
        "box": {"min": scene.box.min.tolist(), "max": scene.box.max.tolist()},
        "model": scene.model.source or scene.model.model_id,
        "instances": [
            {"instance_id": i.instance_id, **bio.transform_to_json(i.pose)} for i in scene.instances
        ],
        "seed": scene.seed,
    }


def scene_from_json(data: dict, model: Optional[ObjectModel] = None, base_dir=None) -> Scene:
    if model is None:
        ref = data["model"]
        if not ref.startswith("builtin:") and base_dir is not None and not Path(ref).is_absolute():
            ref = str(Path(base_dir) / ref)
        model = load_model(ref)
    box = Aabb(data["box"]["min"], data["box"]["max"])
    inst = tuple(Instance(int(d["instance_id"]), bio.transform_from_json(d)) for d in data["instances"])
    return Scene(box, inst, model, int(data.get("seed", 0)))
