from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binpick.errors import EmptyCandidates, FrameMismatch, GridUnmarked, NoFeasibleCandidate, NonPositiveParam, ValidationError
from binpick.geometry import Aabb, PointCloud, look_at
from binpick.scene import SensorIntrinsics
from binpick.viewplan import (
    CellState,
    FeasibilityPredicate,
    SensorPoseCandidate,
    ViewPlanParams,
    always_feasible,
    build_grid,
    candidate_poses,
    default_feasibility,
    filter_feasible,
    grid_cells_cloud,
    grid_from_json,
    grid_to_json,
    mark_cells,
    polyhedron_face_normals,
    score_first_trial,
    score_next_trial,
    select_pose,
)

from helpers import oracle_next_score, oracle_states, random_configuration
from oracles import in_view, segment_crosses_wall

BOX = Aabb([-0.15, -0.11, 0.0], [0.15, 0.11, 0.10])
INTR = SensorIntrinsics(noise_sigma=0.0)


def test_params_validation():
    with pytest.raises(ValidationError):
        ViewPlanParams(n_faces=7)
    with pytest.raises(ValidationError):
        ViewPlanParams(distances=(0.5, 0.4))
    with pytest.raises(ValidationError):
        ViewPlanParams(cell_size=0.0)


@pytest.mark.parametrize("n", [4, 6, 8, 12, 20])
def test_polyhedron_normals_are_unit_and_distinct(n):
    v = polyhedron_face_normals(n)
    assert v.shape == (n, 3)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0)
    np.testing.assert_allclose(v.sum(axis=0), 0.0, atol=1e-12)
    assert len({tuple(np.round(x, 9)) for x in v}) == n


def test_candidate_count_and_geometry():
    cands = candidate_poses(BOX, ViewPlanParams())
    assert len(cands) == 60
    c = BOX.bottom_center
    for cand in cands:
        d = ViewPlanParams().distances[cand.distance_index]
        assert np.linalg.norm(cand.position - c) == pytest.approx(d, abs=1e-9)
        # the optical axis passes through the box-bottom centre
        axis = cand.pose.rotation[:, 2]
        v = c - cand.position
        assert np.linalg.norm(np.cross(axis, v / np.linalg.norm(v))) < 1e-9
        assert axis @ v > 0


def test_cube_candidates():
    cands = candidate_poses(BOX, ViewPlanParams(6, (0.5,)))
    offsets = sorted(tuple(np.round(c.position - BOX.bottom_center, 12)) for c in cands)
    expected = sorted(tuple(0.5 * s * e) for e in np.eye(3) for s in (1, -1))
    np.testing.assert_allclose(offsets, expected, atol=1e-12)


def test_filter_feasible():
    cands = candidate_poses(BOX, ViewPlanParams(6, (0.5, 0.6)))
    assert filter_feasible(cands, always_feasible()) == cands
    above = FeasibilityPredicate(lambda pose: pose.translation[2] >= BOX.min[2])
    kept = filter_feasible(candidate_poses(BOX, ViewPlanParams(6, (0.5,))), above)
    assert len(kept) == 5
    no_first = FeasibilityPredicate(lambda pose: True, reachable=lambda pose: pose.translation @ pose.translation > 0.26)
    out = filter_feasible(cands, no_first)
    assert out and all(c.distance_index == 1 for c in out)
    assert out == [c for c in cands if c.distance_index == 1]
    with pytest.raises(NoFeasibleCandidate):
        filter_feasible(cands, FeasibilityPredicate(lambda pose: False))


def test_default_feasibility_keeps_upper_views():
    cands = candidate_poses(BOX, ViewPlanParams())
    kept = filter_feasible(cands, default_feasibility(BOX))
    assert 0 < len(kept) < len(cands)
    assert all(c.position[2] >= BOX.min[2] for c in kept)


def test_build_grid_examples():
    g = build_grid(Aabb([0, 0, 0], [0.4, 0.3, 0.2]), 0.1, 0.2)
    assert g.dims == (4, 3, 2)
    assert g.count(CellState.UNKNOWN) == 24
    g2 = build_grid(Aabb([0, 0, 0], [0.35, 0.3, 0.2]), 0.1, 0.2)
    assert g2.dims[0] == 4
    assert g2.origin[0] == pytest.approx(-0.025)
    assert g2.upper[0] == pytest.approx(0.375)
    with pytest.raises(NonPositiveParam):
        build_grid(BOX, 0.0, 0.1)
    with pytest.raises(NonPositiveParam):
        build_grid(BOX, 0.01, -1.0)


def test_mark_empty_cloud_from_above():
    box = Aabb([0, 0, 0], [0.08, 0.08, 0.08])
    grid = build_grid(box, 0.01, 0.08)
    sensor = look_at([0.04, 0.04, 0.6], [0.04, 0.04, 0.0])
    out = mark_cells(grid, PointCloud.empty(), sensor, INTR)
    assert out.count(CellState.OCCUPIED) == 0 and out.count(CellState.OCCLUDED) == 0
    assert out.count(CellState.FREE) == 512


def test_single_occupied_cell_shadows_its_column():
    box = Aabb([0, 0, 0], [0.08, 0.08, 0.08])
    grid = build_grid(box, 0.01, 0.08)
    sensor = look_at([0.035, 0.035, 0.6], [0.035, 0.035, 0.0])
    pts = np.full((3, 3), [0.035, 0.035, 0.055])
    out = mark_cells(grid, PointCloud(pts), sensor, INTR)
    assert out.states[3, 3, 5] == CellState.OCCUPIED
    assert np.all(out.states[3, 3, :5] == CellState.OCCLUDED)
    assert out.count(CellState.OCCLUDED) == 5
    assert np.all(out.states[3, 3, 6:] == CellState.FREE)


def test_mark_cells_needs_world_frame():
    grid = build_grid(BOX, 0.02, 0.1)
    with pytest.raises(FrameMismatch):
        mark_cells(grid, PointCloud([[0, 0, 0.01]], frame="sensor"), look_at([0, 0, 0.5], [0, 0, 0]), INTR)


def test_min_points_per_cell_rejects_sparse_cells():
    box = Aabb([0, 0, 0], [0.08, 0.08, 0.08])
    grid = build_grid(box, 0.01, 0.08)
    sensor = look_at([0.035, 0.035, 0.6], [0.035, 0.035, 0.0])
    out = mark_cells(grid, PointCloud(np.full((2, 3), 0.035)), sensor, INTR)
    assert out.count(CellState.OCCUPIED) == 0


@pytest.mark.parametrize("seed", range(6))
def test_mark_cells_matches_ray_march(seed):
    _, grid, cloud, sensor = random_configuration(seed)
    out = mark_cells(grid, cloud, sensor, INTR)
    np.testing.assert_array_equal(out.states, oracle_states(grid, cloud, sensor, INTR))


def test_mark_cells_keeps_unknown_outside_view():
    _, grid, cloud, sensor = random_configuration(11)
    narrow = SensorIntrinsics(np.deg2rad(5), np.deg2rad(5), 8, 8, 0.1, 2.0, 0.0)
    out = mark_cells(grid, cloud, sensor, narrow)
    assert out.count(CellState.UNKNOWN) > 0
    np.testing.assert_array_equal(out.states, oracle_states(grid, cloud, sensor, narrow))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_adding_points_never_unmarks_occupied(seed, extra):
    _, grid, cloud, sensor = random_configuration(seed)
    before = mark_cells(grid, cloud, sensor, INTR)
    rng = np.random.default_rng(seed + 1)
    more = PointCloud(np.vstack([cloud.points, rng.uniform(0, 0.08, size=(extra, 3))]))
    after = mark_cells(grid, more, sensor, INTR)
    was = before.states == CellState.OCCUPIED
    assert np.all(after.states[was] == CellState.OCCUPIED)


def test_first_trial_scores():
    grid = build_grid(BOX, 0.01, BOX.extents[2])
    top = SensorPoseCandidate(look_at(BOX.bottom_center + [0, 0, 0.6], BOX.bottom_center), 0, 0)
    nx, ny, _ = grid.dims
    assert score_first_trial(top, grid, BOX, INTR) == nx * ny
    low = SensorPoseCandidate(look_at(BOX.bottom_center + [0.6, 0, 0.05], BOX.bottom_center), 1, 0)
    assert score_first_trial(low, grid, BOX, INTR) == 0
    d = 0.6 / np.sqrt(2)
    oblique = SensorPoseCandidate(look_at(BOX.bottom_center + [d, 0, d], BOX.bottom_center), 2, 0)
    s = score_first_trial(oblique, grid, BOX, INTR)
    assert 0 < s < nx * ny


def test_first_trial_score_matches_wall_oracle():
    grid = build_grid(BOX, 0.01, BOX.extents[2])
    for cand in candidate_poses(BOX, ViewPlanParams(20, (0.45,))):
        R, t = cand.pose.rotation, cand.pose.translation
        expected = 0
        for i in range(grid.dims[0]):
            for j in range(grid.dims[1]):
                c = grid.origin + (np.array([i, j, 0]) + 0.5) * grid.cell_size
                if in_view(R, t, c, INTR.horizontal_fov, INTR.vertical_fov, INTR.min_range, INTR.max_range) and not segment_crosses_wall(t, c, BOX.min, BOX.max):
                    expected += 1
        assert score_first_trial(cand, grid, BOX, INTR) == expected


def test_next_trial_score_examples():
    box = Aabb([0, 0, 0], [0.08, 0.08, 0.08])
    grid = build_grid(box, 0.01, 0.08)
    cand = SensorPoseCandidate(look_at([0.04, 0.04, 0.6], [0.04, 0.04, 0.0]), 0, 0)
    with pytest.raises(GridUnmarked):
        score_next_trial(cand, grid, INTR)
    states = np.array(grid.states)
    states[3, 3, 7] = CellState.OCCUPIED
    assert score_next_trial(cand, grid.with_states(states), INTR) == 0
    # occluded column under an occupied cell, viewed from the side with a clear line of sight
    states[3, 3, :7] = CellState.OCCLUDED
    marked = grid.with_states(states)
    side = SensorPoseCandidate(look_at([0.6, 0.035, 0.035], [0.035, 0.035, 0.035]), 1, 0)
    assert score_next_trial(side, marked, INTR) == 7
    # from straight above the occupied cell hides the whole column
    above = SensorPoseCandidate(look_at([0.035, 0.035, 0.6], [0.035, 0.035, 0.0]), 2, 0)
    assert score_next_trial(above, marked, INTR) == 0


@pytest.mark.parametrize("seed", range(3))
def test_next_trial_scores_match_oracle(seed):
    box, grid, cloud, sensor = random_configuration(seed)
    marked = mark_cells(grid, cloud, sensor, INTR)
    cands = candidate_poses(box, ViewPlanParams(20, (0.4,)))
    for cand in cands:
        assert score_next_trial(cand, marked, INTR) == oracle_next_score(cand, marked, INTR)
    walled = cands[:5]
    for cand in walled:
        assert score_next_trial(cand, marked, INTR, box) == oracle_next_score(cand, marked, INTR, box)


def test_select_pose_examples():
    top = SensorPoseCandidate(look_at(BOX.bottom_center + [0, 0, 0.6], BOX.bottom_center), 5, 1)
    d = 0.6 / np.sqrt(2)
    oblique = SensorPoseCandidate(look_at(BOX.bottom_center + [d, 0, d], BOX.bottom_center), 0, 0)
    assert select_pose([oblique], None, BOX, INTR)[0] is oblique
    best, scores = select_pose([oblique, top], None, BOX, INTR)
    assert best is top and scores[1] > scores[0]
    # equal scores: smaller distance index, then smaller face index
    a = SensorPoseCandidate(top.pose, 3, 1)
    b = SensorPoseCandidate(top.pose, 4, 0)
    c = SensorPoseCandidate(top.pose, 2, 0)
    assert select_pose([a, b, c], None, BOX, INTR)[0] is c
    with pytest.raises(EmptyCandidates):
        select_pose([], None, BOX, INTR)


@pytest.mark.parametrize("seed", range(3))
def test_select_pose_is_argmax(seed):
    box, grid, cloud, sensor = random_configuration(seed)
    marked = mark_cells(grid, cloud, sensor, INTR)
    cands = candidate_poses(box, ViewPlanParams(12, (0.3, 0.5)))
    best, scores = select_pose(cands, marked, box, INTR)
    rescored = [oracle_next_score(c, marked, INTR, box) for c in cands]
    assert scores == rescored
    assert best in cands
    assert rescored[cands.index(best)] == max(rescored)


def test_scores_invariant_under_translation():
    box, grid, cloud, sensor = random_configuration(4)
    marked = mark_cells(grid, cloud, sensor, INTR)
    offset = np.array([0.5, -0.25, 0.125])
    cands = candidate_poses(box, ViewPlanParams(12, (0.4,)))
    moved_box = box.translated(offset)
    moved = candidate_poses(moved_box, ViewPlanParams(12, (0.4,)))
    moved_grid = marked.translated(offset)
    for a, b in zip(cands, moved):
        assert score_next_trial(a, marked, INTR, box) == score_next_trial(b, moved_grid, INTR, moved_box)
    g0 = build_grid(box, 0.01, 0.08)
    for a, b in zip(cands, moved):
        assert score_first_trial(a, g0, box, INTR) == score_first_trial(b, g0.translated(offset), moved_box, INTR)


def test_grid_json_and_cells_cloud():
    _, grid, cloud, sensor = random_configuration(5)
    marked = mark_cells(grid, cloud, sensor, INTR)
    back = grid_from_json(grid_to_json(marked))
    np.testing.assert_array_equal(back.states, marked.states)
    np.testing.assert_allclose(back.origin, marked.origin)
    pts, states = grid_cells_cloud(marked)
    assert len(pts) == marked.count(CellState.OCCUPIED) + marked.count(CellState.OCCLUDED)
    assert set(np.unique(states)) <= {CellState.OCCUPIED, CellState.OCCLUDED}
