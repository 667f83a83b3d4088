from __future__ import annotations

import numpy as np
import pytest

from binpick.errors import PlacementFailure, UnknownInstance, ValidationError
from binpick.geometry import Aabb, RigidTransform, look_at
from binpick.raycast import closest_points_on_mesh
from binpick.scene import (
    Instance,
    PickDisturbance,
    Scene,
    SensorIntrinsics,
    apply_pick,
    box_triangles,
    contact_neighbors,
    generate_pile,
    make_block,
    render_depth,
    scene_from_json,
    scene_to_json,
)

from oracles import ray_triangle

BOX = Aabb([-0.15, -0.11, 0.0], [0.15, 0.11, 0.10])
TOP = look_at([0.0, 0.0, 0.5], [0.0, 0.0, 0.0])
EXACT = SensorIntrinsics(noise_sigma=0.0)


def _world_tris(scene: Scene, iid: int) -> np.ndarray:
    T = scene.get(iid).pose
    return T.apply(scene.model.triangles.reshape(-1, 3)).reshape(-1, 3, 3)


def test_single_drop_rests_on_floor(block):
    scene = generate_pile(block, 1, BOX, seed=0)
    z = scene.instance_points(0)[:, 2]
    assert abs(z.min() - BOX.min[2]) <= 0.002


def test_pile_is_deterministic(block):
    a = generate_pile(block, 9, BOX, seed=7, clearance=0.012)
    b = generate_pile(block, 9, BOX, seed=7, clearance=0.012)
    for x, y in zip(a.instances, b.instances):
        assert np.array_equal(x.pose.matrix(), y.pose.matrix())
    c = generate_pile(block, 9, BOX, seed=8, clearance=0.012)
    assert not np.array_equal(a.instances[0].pose.matrix(), c.instances[0].pose.matrix())


@pytest.mark.parametrize("seed", range(5))
def test_pile_stays_inside_walls(block, seed):
    scene = generate_pile(block, 9, BOX, seed=seed, clearance=0.012)
    walls = BOX.inflated(0.005)
    for iid in scene.ids():
        assert np.all(walls.contains(scene.instance_points(iid)))
    assert len(scene.instances) == 9


def test_pile_objects_do_not_interpenetrate(block):
    scene = generate_pile(block, 9, BOX, seed=3)
    pts = [scene.instance_points(i) for i in scene.ids()]
    for i in range(9):
        for j in range(i + 1, 9):
            d = np.linalg.norm(pts[i][::7, None] - pts[j][None, ::7], axis=-1).min()
            assert d > 0.0005


def test_pile_placement_failure(block):
    tiny = Aabb([0, 0, 0], [0.02, 0.02, 0.1])
    with pytest.raises(PlacementFailure):
        generate_pile(block, 1, tiny, seed=0)
    with pytest.raises(ValidationError):
        generate_pile(block, 0, BOX, seed=0)


def test_empty_scene_renders_only_box(block):
    scene = Scene(BOX, (), block)
    cloud, labels = render_depth(scene, TOP, EXACT, return_labels=True)
    assert len(cloud) > 0
    assert np.all(labels == -2)
    _, _, d = closest_points_on_mesh(cloud.points[::50], box_triangles(BOX))
    assert d.max() < 1e-9


def test_rendered_object_points_lie_on_mesh(block):
    scene = Scene(BOX, (Instance(0, RigidTransform.from_rotvec([0.3, 0.2, 0.1], [0.01, -0.02, 0.03])),), block)
    cloud, labels = render_depth(scene, TOP, EXACT, return_labels=True)
    obj = cloud.points[labels == 0]
    assert len(obj) > 100
    _, _, d = closest_points_on_mesh(obj, _world_tris(scene, 0))
    assert d.max() < 1e-9
    assert len(cloud) <= EXACT.width * EXACT.height


def test_stacked_occlusion_matches_ray_oracle(block):
    lower = Instance(0, RigidTransform(np.eye(3), [0.0, 0.0, 0.01]))
    upper = Instance(1, RigidTransform.from_rotvec([0, 0, 0.4], [0.005, 0.0, 0.031]))
    scene = Scene(BOX, (lower, upper), block)
    intr = SensorIntrinsics(np.deg2rad(20), np.deg2rad(20), 32, 32, 0.05, 2.0, 0.0)
    _, labels = render_depth(scene, TOP, intr, return_labels=True, include_box=False)
    dirs = intr.ray_directions() @ TOP.rotation.T
    expected = []
    for d in dirs:
        best_t, best = np.inf, -1
        for iid in (0, 1):
            for a, b, c in _world_tris(scene, iid):
                t = ray_triangle(TOP.translation, d, a, b, c)
                if t < best_t:
                    best_t, best = t, iid
        if best >= 0:
            expected.append(best)
    np.testing.assert_array_equal(labels, expected)
    # the upper block hides the middle of the lower block's top face
    assert np.count_nonzero(labels == 0) > 0 and np.count_nonzero(labels == 1) > 0


def test_render_noise_is_seeded(block):
    scene = generate_pile(block, 3, BOX, seed=1)
    noisy = SensorIntrinsics()
    a = render_depth(scene, TOP, noisy, seed=5)
    b = render_depth(scene, TOP, noisy, seed=5)
    c = render_depth(scene, TOP, noisy, seed=6)
    assert a == b
    assert not np.array_equal(a.points, c.points)


def test_pick_with_zero_radius_leaves_others(block):
    scene = generate_pile(block, 9, BOX, seed=2)
    after = apply_pick(scene, 4, PickDisturbance(0.0, 0.01, 0.2), seed=0)
    assert after.ids() == [i for i in scene.ids() if i != 4]
    for inst in after.instances:
        assert np.array_equal(inst.pose.matrix(), scene.get(inst.instance_id).pose.matrix())


def test_pick_isolated_target(block):
    far = [Instance(0, RigidTransform(np.eye(3), [-0.1, -0.06, 0.01])), Instance(1, RigidTransform(np.eye(3), [0.1, 0.06, 0.01]))]
    scene = Scene(BOX, tuple(far), block)
    after = apply_pick(scene, 0, PickDisturbance(), seed=0)
    assert after.ids() == [1]
    assert np.array_equal(after.get(1).pose.matrix(), scene.get(1).pose.matrix())


def _min_distance(a, b, chunk=400):
    best = np.inf
    for s in range(0, len(a), chunk):
        d2 = ((a[s : s + chunk, None, :] - b[None, :, :]) ** 2).sum(-1)
        best = min(best, float(np.sqrt(d2.min())))
    return best


@pytest.mark.parametrize("seed", range(4))
def test_pick_perturbs_exactly_the_contact_neighbours(seed):
    block = make_block(density=1.5e5)
    scene = generate_pile(block, 9, BOX, seed=seed, clearance=0.012)
    target = seed % 9
    tp = scene.instance_points(target)
    oracle = [i for i in scene.ids() if i != target and _min_distance(scene.instance_points(i), tp) < 0.02]
    neighbours = contact_neighbors(scene, target, 0.02)
    assert neighbours == oracle
    assert len(neighbours) <= 3
    after = apply_pick(scene, target, PickDisturbance(0.02, 0.01, np.deg2rad(10)), seed=seed)
    for inst in after.instances:
        same = np.array_equal(inst.pose.matrix(), scene.get(inst.instance_id).pose.matrix())
        if inst.instance_id not in neighbours:
            assert same


def test_pick_unknown_instance(block):
    scene = generate_pile(block, 2, BOX, seed=0)
    with pytest.raises(UnknownInstance):
        apply_pick(scene, 99, PickDisturbance(), seed=0)


def test_scene_json_round_trip(block):
    scene = generate_pile(block, 4, BOX, seed=3)
    back = scene_from_json(scene_to_json(scene), block)
    assert back.ids() == scene.ids()
    for a, b in zip(scene.instances, back.instances):
        np.testing.assert_allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-15)


def test_intrinsics_validation():
    with pytest.raises(ValidationError):
        SensorIntrinsics(horizontal_fov=np.pi)
    with pytest.raises(ValidationError):
        SensorIntrinsics(min_range=2.0, max_range=1.0)
