from __future__ import annotations

import numpy as np
import pytest

from binpick import io as bio
from binpick.errors import ValidationError
from binpick.geometry import PointCloud, RigidTransform
from binpick.scene import block_mesh


def _cloud(n=50, seed=0, normals=False, origin=False):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3)) * np.pi
    nrm = None
    if normals:
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    org = rng.integers(0, 2, n).astype(np.uint8) if origin else None
    return PointCloud(pts, nrm, "sensor", org)


@pytest.mark.parametrize("binary", [False, True])
def test_ply_round_trip_is_exact(tmp_path, binary):
    c = _cloud(normals=True, origin=True)
    bio.write_ply(tmp_path / "c.ply", c, binary=binary)
    assert bio.read_ply(tmp_path / "c.ply") == c


def test_ply_extra_property(tmp_path):
    c = _cloud(10)
    labels = np.arange(10, dtype=np.int32) - 3
    bio.write_ply(tmp_path / "c.ply", c, extra={"label": labels})
    np.testing.assert_array_equal(bio.read_ply_property(tmp_path / "c.ply", "label"), labels)


def test_empty_ply_round_trip(tmp_path):
    bio.write_ply(tmp_path / "e.ply", PointCloud.empty())
    assert len(bio.read_ply(tmp_path / "e.ply")) == 0


def test_pcd_round_trip_is_exact(tmp_path):
    c = PointCloud(_cloud(30).points, _cloud(30, normals=True).normals)
    bio.write_pcd(tmp_path / "c.pcd", c)
    assert bio.read_cloud(tmp_path / "c.pcd") == c


def test_read_cloud_rejects_unknown_suffix(tmp_path):
    with pytest.raises(ValidationError):
        bio.read_cloud(tmp_path / "c.xyz")


@pytest.mark.parametrize("suffix", [".ply", ".obj"])
def test_mesh_round_trip(tmp_path, suffix):
    v, f = block_mesh((0.06, 0.03, 0.02))
    path = tmp_path / f"m{suffix}"
    if suffix == ".ply":
        bio.write_mesh_ply(path, v, f)
    else:
        bio.write_obj(path, v, f)
    v2, f2 = bio.read_mesh(path)
    np.testing.assert_array_equal(v2, v)
    np.testing.assert_array_equal(f2, f)


def test_obj_polygons_are_fan_triangulated(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    _, f = bio.read_mesh(tmp_path / "q.obj")
    np.testing.assert_array_equal(f, [[0, 1, 2], [0, 2, 3]])


def test_transform_json_round_trip():
    T = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [1, 2, 3])
    back = bio.transform_from_json(bio.transform_to_json(T))
    np.testing.assert_allclose(back.matrix(), T.matrix(), atol=1e-15)
