"""Scenario builders shared by the module tests and the acceptance run."""
from __future__ import annotations

import numpy as np

from binpick.geometry import Aabb, PointCloud, RigidTransform, look_at, orthonormalize
from binpick.pose import view_frame
from binpick.scene import Instance, ObjectModel, Scene, SensorIntrinsics, render_depth
from binpick.viewplan import CellState, build_grid

from oracles import in_view, march_blocked, ray_march_states, segment_crosses_wall

SENSOR = look_at([0.0, 0.0, 0.45], [0.0, 0.0, 0.0])
EXACT = SensorIntrinsics(noise_sigma=0.0)
OPEN_SPACE = Aabb([-1, -1, -1], [1, 1, 1])


def pose_seen_from(viewpoint, sensor: RigidTransform, rng) -> RigidTransform:
    """A model placement near the optical axis whose model-frame ``viewpoint`` faces the sensor, at a random roll."""
    t = np.array([0.02, -0.01, 0.0]) + rng.uniform(-0.03, 0.03, 3) * [1, 1, 0]
    u = sensor.translation - t
    u /= np.linalg.norm(u)
    th = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(th), np.sin(th)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(orthonormalize(view_frame(u) @ Rz @ view_frame(viewpoint).T), t)


def render_single(model: ObjectModel, pose: RigidTransform, sensor=SENSOR, intr=EXACT, seed=0):
    scene = Scene(OPEN_SPACE, (Instance(0, pose),), model)
    return render_depth(scene, sensor, intr, seed=seed, include_box=False)


def random_merge_instance(rng):
    """A previous segmented cloud and a current cloud derived from it by removals, shifts and occlusions.

    Returns ``(prev_cloud, prev_segments, prev_labels, current_points)`` where
    ``prev_labels`` gives each previous point's segment id (-1 when unsegmented).
    """
    from binpick.geometry import PointCloud
    from binpick.segmentation import Segment

    n_seg = int(rng.integers(2, 9))
    total = int(rng.integers(50, 501))
    sizes = rng.multinomial(total - n_seg * 4, np.ones(n_seg + 1) / (n_seg + 1)) + 4
    blobs, labels = [], []
    for i, m in enumerate(sizes):
        centre = rng.uniform(-0.1, 0.1, 3)
        blobs.append(centre + rng.normal(scale=rng.uniform(0.003, 0.02), size=(m, 3)))
        labels.append(np.full(m, i if i < n_seg else -1))
    pts, labels = np.vstack(blobs), np.concatenate(labels)
    if rng.random() < 0.3:
        # exact duplicate coordinates across segments exercise the nearest-neighbour tie-break
        k = int(rng.integers(1, 6))
        src = rng.integers(0, len(pts), k)
        pts = np.vstack([pts, pts[src]])
        labels = np.concatenate([labels, rng.integers(-1, n_seg, k)])
    order = rng.permutation(len(pts))
    pts, labels = pts[order], labels[order]
    ids = rng.permutation(100)[:n_seg]
    seg_ids = np.where(labels >= 0, ids[np.maximum(labels, 0)], -1)
    prev = PointCloud(pts)
    segments = [Segment(prev, np.nonzero(labels == i)[0], int(ids[i])) for i in range(n_seg)]

    parts = []
    for i in range(n_seg + 1):
        member = pts[labels == i] if i < n_seg else pts[labels < 0]
        fate = rng.random()
        if fate < 0.15:
            continue  # occluded or picked
        keep = member[rng.random(len(member)) > rng.uniform(0, 0.5)]
        if fate < 0.45:
            keep = keep + rng.normal(scale=rng.uniform(0.002, 0.03), size=3)
        parts.append(keep + rng.normal(scale=rng.uniform(0, 0.004), size=keep.shape))
    parts.append(rng.uniform(-0.12, 0.12, (int(rng.integers(0, 40)), 3)))
    current = np.vstack(parts) if parts else np.zeros((0, 3))
    return prev, segments, seg_ids, current


def captured_pile(config, model, sensor_seed=1):
    """Generate the configured pile and capture it from the first-trial view."""
    from binpick.pipeline import STREAM_SCENE, STREAM_SENSOR, derived_seed, feasible_candidates, prepare_cloud
    from binpick.scene import generate_pile
    from binpick.viewplan import select_pose

    box = config.box.aabb()
    scene = generate_pile(model, config.object_count, box, derived_seed(config.seed, STREAM_SCENE), config.clearance,
                          config.pile_wall_margin)
    intr = config.sensor.intrinsics()
    cand, _ = select_pose(feasible_candidates(config), None, box, intr, config.view.cell_size, box.extents[2])
    raw = render_depth(scene, cand.pose, intr, seed=derived_seed(config.seed, STREAM_SENSOR, sensor_seed))
    return scene, prepare_cloud(raw, config), cand.pose


def random_configuration(seed: int):
    """An 8x8x8 grid of 1 cm cells, a random scatter of point clumps and a random sensor above it."""
    rng = np.random.default_rng(seed)
    box = Aabb([0, 0, 0], [0.08, 0.08, 0.08])
    grid = build_grid(box, 0.01, 0.08)
    cells = rng.integers(0, 8, size=(rng.integers(1, 25), 3))
    pts = []
    for c in cells:
        n = rng.integers(1, 6)
        pts.append((c + rng.uniform(0.05, 0.95, size=(n, 3))) * 0.01)
    cloud = PointCloud(np.vstack(pts))
    direction = rng.normal(size=3)
    direction[2] = abs(direction[2]) + 0.3
    direction /= np.linalg.norm(direction)
    sensor = look_at(box.bottom_center + rng.uniform(0.25, 0.6) * direction, box.center + rng.normal(scale=0.01, size=3))
    return box, grid, cloud, sensor


def oracle_states(grid, cloud, sensor, intr, min_points=3, prior=None):
    return ray_march_states(
        grid.origin, grid.cell_size, grid.dims, cloud.points, sensor.rotation, sensor.translation,
        (intr.horizontal_fov, intr.vertical_fov), (intr.min_range, intr.max_range), min_points, prior,
    )


def oracle_next_score(cand, grid, intr, box=None):
    occ = grid.states == CellState.OCCUPIED
    R, t = cand.pose.rotation, cand.pose.translation
    score = 0
    for ijk in zip(*np.nonzero(grid.states == CellState.OCCLUDED)):
        c = grid.origin + (np.array(ijk) + 0.5) * grid.cell_size
        if not in_view(R, t, c, intr.horizontal_fov, intr.vertical_fov, intr.min_range, intr.max_range):
            continue
        if box is not None and segment_crosses_wall(t, c, box.min, box.max):
            continue
        if not march_blocked(grid.origin, grid.cell_size, grid.dims, occ, t, ijk):
            score += 1
    return score
