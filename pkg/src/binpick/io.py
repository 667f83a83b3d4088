"""Point cloud and mesh file formats: PLY (ascii / binary LE), PCD (ascii), OBJ."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import ValidationError
from .geometry import PointCloud, RigidTransform


def write_ply(path, cloud: PointCloud, binary: bool = False, extra: Optional[dict] = None) -> None:
    """Write ``cloud`` as PLY. ``extra`` maps property names to per-point scalar arrays."""
    cols = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.normals is not None:
        cols += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    if cloud.origin is not None:
        cols.append(("origin", "u1"))
    extra = extra or {}
    for name, values in extra.items():
        cols.append((name, np.asarray(values).dtype.str))
    data = np.empty(len(cloud), dtype=cols)
    data["x"], data["y"], data["z"] = cloud.points.T
    if cloud.normals is not None:
        data["nx"], data["ny"], data["nz"] = cloud.normals.T
    if cloud.origin is not None:
        data["origin"] = cloud.origin
    for name, values in extra.items():
        data[name] = values
    el = PlyElement.describe(data, "vertex")
    comments = [f"frame {cloud.frame}"]
    PlyData([el], text=not binary, byte_order="<", comments=comments).write(str(path))


def read_ply(path) -> PointCloud:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    names = v.dtype.names
    pts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.column_stack([v["nx"], v["ny"], v["nz"]]).astype(np.float64)
    origin = v["origin"].astype(np.uint8) if "origin" in names else None
    frame = "world"
    for c in ply.comments:
        if c.startswith("frame "):
            frame = c.split(None, 1)[1].strip()
    return PointCloud(pts, normals, frame, origin)


def read_ply_property(path, name: str) -> np.ndarray:
    return np.asarray(PlyData.read(str(path))["vertex"].data[name])


def write_mesh_ply(path, vertices, faces, binary: bool = False) -> None:
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int32)
    vd = np.empty(len(v), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    vd["x"], vd["y"], vd["z"] = v.T
    fd = np.empty(len(f), dtype=[("vertex_indices", "i4", (3,))])
    fd["vertex_indices"] = f
    PlyData(
        [PlyElement.describe(vd, "vertex"), PlyElement.describe(fd, "face")],
        text=not binary,
        byte_order="<",
    ).write(str(path))


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Load a triangle mesh from OBJ or PLY. Polygons are fan-triangulated."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _read_obj(path)
    if suffix == ".ply":
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
        verts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
        face_el = ply["face"].data
        key = "vertex_indices" if "vertex_indices" in face_el.dtype.names else "vertex_index"
        tris = []
        for poly in face_el[key]:
            poly = list(poly)
            tris += [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]
        return verts, np.asarray(tris, dtype=np.int64)
    raise ValidationError(f"unsupported mesh format: {path.suffix}")


def _read_obj(path: Path) -> tuple[np.ndarray, np.ndarray]:
    verts, tris = [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            tris += [(idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1)]
    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64)


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in np.asarray(vertices, dtype=float)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_pcd(path, cloud: PointCloud) -> None:
    fields = ["x", "y", "z"]
    data = cloud.points
    if cloud.normals is not None:
        fields += ["normal_x", "normal_y", "normal_z"]
        data = np.hstack([data, cloud.normals])
    n = len(cloud)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join(["8"] * len(fields)),
        "TYPE " + " ".join(["F"] * len(fields)),
        "COUNT " + " ".join(["1"] * len(fields)),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    body = [" ".join(repr(float(x)) for x in row) for row in data]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_pcd(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    fields: list[str] = []
    start = None
    for i, line in enumerate(lines):
        if line.startswith("#") or not line.strip():
            continue
        key, *rest = line.split()
        if key == "FIELDS":
            fields = rest
        elif key == "DATA":
            if rest[0] != "ascii":
                raise ValidationError("only ascii PCD is supported")
            start = i + 1
            break
    if start is None or not {"x", "y", "z"} <= set(fields):
        raise ValidationError(f"malformed PCD header in {path}")
    rows = [ln.split() for ln in lines[start:] if ln.strip()]
    data = np.asarray(rows, dtype=np.float64).reshape(-1, len(fields))
    col = {f: i for i, f in enumerate(fields)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if {"normal_x", "normal_y", "normal_z"} <= set(fields):
        normals = data[:, [col["normal_x"], col["normal_y"], col["normal_z"]]]
    return PointCloud(pts, normals)


def read_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".pcd":
        return read_pcd(path)
    raise ValidationError(f"unsupported cloud format: {suffix}")


def write_cloud(path, cloud: PointCloud) -> None:
    if Path(path).suffix.lower() == ".pcd":
        write_pcd(path, cloud)
    else:
        write_ply(path, cloud)


def transform_to_json(T: RigidTransform) -> dict:
    return {"quaternion": T.quaternion().tolist(), "translation": T.translation.tolist()}


def transform_from_json(d: dict) -> RigidTransform:
    return RigidTransform.from_quaternion(d["quaternion"], d["translation"])


def dump_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
