"""File formats: PLY (ASCII and binary little-endian), OBJ, JSON poses.

All writes go through a temporary file in the target directory followed
by an atomic rename.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, EmptyMesh, MalformedFile
from .geometry import OrientedPointCloud, Pose, TriMesh, estimate_normals

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------------
# PLY


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.props = []  # (name, dtype) or (name, (count dtype, item dtype))


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise MalformedFile("not a PLY file (missing 'ply' magic)", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise MalformedFile("PLY header has no end_header", len(data))
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        offset += len(raw) + 1
        if not line or line.startswith(("comment", "obj_info")) or line == "ply":
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise MalformedFile(f"unsupported PLY format line {line!r}", offset)
            if tok[1] == "binary_big_endian":
                raise MalformedFile("big-endian PLY is not supported", offset)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedFile(f"bad element line {line!r}", offset)
            elements.append(_Element(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise MalformedFile("property before any element", offset)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise MalformedFile(f"bad list property {line!r}", offset)
                elements[-1].props.append((tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise MalformedFile(f"bad property {line!r}", offset)
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise MalformedFile(f"unknown PLY header line {line!r}", offset)
    if fmt is None:
        raise MalformedFile("PLY header has no format line", end)
    return fmt, elements, body_start


def _read_binary(data, pos, elements):
    out = {}
    for el in elements:
        if all(isinstance(t, str) for _, t in el.props):
            dt = np.dtype([(n, "<" + t) for n, t in el.props])
            need = dt.itemsize * el.count
            if pos + need > len(data):
                raise MalformedFile(f"truncated binary PLY in element '{el.name}'", len(data))
            out[el.name] = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
            pos += need
            continue
        rows = []
        for _ in range(el.count):
            row = {}
            for name, t in el.props:
                if isinstance(t, tuple):
                    cdt, idt = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                    if pos + cdt.itemsize > len(data):
                        raise MalformedFile(f"truncated binary PLY in element '{el.name}'", pos)
                    n = int(np.frombuffer(data, cdt, 1, pos)[0])
                    pos += cdt.itemsize
                    if pos + n * idt.itemsize > len(data):
                        raise MalformedFile(f"truncated binary PLY in element '{el.name}'", pos)
                    row[name] = np.frombuffer(data, idt, n, pos).astype(np.int64)
                    pos += n * idt.itemsize
                else:
                    dt = np.dtype("<" + t)
                    if pos + dt.itemsize > len(data):
                        raise MalformedFile(f"truncated binary PLY in element '{el.name}'", pos)
                    row[name] = np.frombuffer(data, dt, 1, pos)[0]
                    pos += dt.itemsize
            rows.append(row)
        out[el.name] = rows
    return out


def _read_ascii(data, pos, elements):
    lines = data[pos:].split(b"\n")
    offsets = np.cumsum([0] + [len(s) + 1 for s in lines]) + pos
    li = 0
    out = {}
    for el in elements:
        rows = []
        for _ in range(el.count):
            while li < len(lines) and not lines[li].strip():
                li += 1
            if li >= len(lines):
                raise MalformedFile(f"truncated ASCII PLY in element '{el.name}'", len(data))
            tok = lines[li].split()
            k = 0
            row = {}
            try:
                for name, t in el.props:
                    if isinstance(t, tuple):
                        n = int(tok[k])
                        row[name] = np.array([int(v) for v in tok[k + 1:k + 1 + n]], np.int64)
                        if len(row[name]) != n:
                            raise IndexError
                        k += 1 + n
                    else:
                        row[name] = float(tok[k])
                        k += 1
            except (IndexError, ValueError):
                raise MalformedFile(f"bad row in element '{el.name}'", int(offsets[li])) from None
            rows.append(row)
            li += 1
        out[el.name] = rows
    return out


def read_ply(path):
    """Parse a PLY file into ``{element name: rows}``.

    Rows are a structured array for binary elements with scalar properties
    and a list of dicts otherwise.
    """
    data = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(data)
    if fmt == "ascii":
        return _read_ascii(data, pos, elements)
    return _read_binary(data, pos, elements)


def _column(rows, name):
    if isinstance(rows, np.ndarray):
        return np.asarray(rows[name], float) if name in rows.dtype.names else None
    if rows and name not in rows[0]:
        return None
    return np.array([r[name] for r in rows], float)


def _fan(polys, n_vertices, offset_hint=0):
    tris = []
    for poly in polys:
        poly = np.asarray(poly, np.int64)
        if len(poly) < 3:
            raise MalformedFile(f"face with {len(poly)} vertices", offset_hint)
        if poly.min() < 0 or poly.max() >= n_vertices:
            raise MalformedFile("face index out of range", offset_hint)
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    return np.array(tris, np.int64).reshape(-1, 3)


def _mesh_from_ply(elements):
    verts = elements.get("vertex")
    if verts is None or len(verts) == 0:
        raise EmptyMesh("PLY has no vertices")
    xyz = np.column_stack([_column(verts, c) for c in "xyz"])
    faces = elements.get("face", [])
    polys = []
    for row in faces:
        key = "vertex_indices" if "vertex_indices" in row else "vertex_index"
        if key not in row:
            raise MalformedFile("face element has no vertex_indices list", 0)
        polys.append(row[key])
    if not polys:
        raise EmptyMesh("PLY has no faces")
    return TriMesh(xyz, _fan(polys, len(xyz)))


def _load_obj(path) -> TriMesh:
    verts, polys = [], []
    positive = negative = False
    offset = 0
    for raw in Path(path).read_bytes().split(b"\n"):
        line = raw.decode("utf-8", errors="replace").strip()
        here = offset
        offset += len(raw) + 1
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "v":
            try:
                verts.append([float(v) for v in tok[1:4]])
            except ValueError:
                raise MalformedFile(f"bad vertex record {line!r}", here) from None
            if len(verts[-1]) != 3:
                raise MalformedFile(f"vertex with fewer than 3 coordinates {line!r}", here)
        elif tok[0] == "f":
            poly = []
            for t in tok[1:]:
                try:
                    i = int(t.split("/")[0])
                except ValueError:
                    raise MalformedFile(f"bad face record {line!r}", here) from None
                if i == 0:
                    raise MalformedFile("OBJ indices are 1-based; found 0", here)
                if i > 0:
                    positive = True
                    poly.append(i - 1)
                else:
                    negative = True
                    poly.append(len(verts) + i)
            if positive and negative:
                raise MalformedFile("mixed absolute and relative face indices", here)
            if len(poly) < 3:
                raise MalformedFile(f"face with {len(poly)} vertices", here)
            polys.append(poly)
    if not verts or not polys:
        raise EmptyMesh(f"OBJ file {path} has no vertices or no faces")
    return TriMesh(np.array(verts, float), _fan(polys, len(verts)))


def load_mesh(path) -> TriMesh:
    """Load a triangle mesh from PLY or OBJ; polygons are fan-triangulated."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _mesh_from_ply(read_ply(path))
    raise MalformedFile(f"unsupported mesh format '{suffix}'", 0)


def load_cloud(path, viewpoint=(0.0, 0.0, 0.0), k=10, return_info=False):
    """Load an oriented point cloud from PLY.

    Normals are read when present (``nx, ny, nz``) and otherwise estimated
    by PCA over ``k`` neighbours, oriented towards ``viewpoint``. With
    ``return_info`` the result is ``(cloud, info)`` where ``info`` records
    whether normals were estimated and from which viewpoint.
    """
    elements = read_ply(path)
    verts = elements.get("vertex")
    if verts is None or len(verts) == 0:
        raise EmptyCloud(f"{path} contains no points")
    xyz = np.column_stack([_column(verts, c) for c in "xyz"])
    normals = [_column(verts, c) for c in ("nx", "ny", "nz")]
    info = {"normals_estimated": False, "viewpoint": None}
    if all(n is not None for n in normals):
        cloud = OrientedPointCloud(xyz, np.column_stack(normals))
    else:
        # fewer than three points raises EmptyCloud
        cloud = estimate_normals(xyz, k=max(3, min(k, len(xyz))), viewpoint=viewpoint)
        info = {"normals_estimated": True, "viewpoint": [float(v) for v in viewpoint]}
    return (cloud, info) if return_info else cloud


def ply_bytes(points, normals=None, binary=True) -> bytes:
    pts = np.asarray(points, float).reshape(-1, 3)
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    cols = pts if normals is None else np.hstack([pts, np.asarray(normals, float).reshape(-1, 3)])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(pts)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        return head + np.ascontiguousarray(cols, dtype="<f8").tobytes()
    body = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in cols)
    return head + body.encode("ascii")


def write_ply(path, cloud, binary=True):
    """Write an :class:`OrientedPointCloud` (or bare ``(N, 3)`` points) to PLY."""
    if isinstance(cloud, OrientedPointCloud):
        data = ply_bytes(cloud.points, cloud.normals, binary)
    else:
        data = ply_bytes(cloud, None, binary)
    atomic_write_bytes(path, data)


def write_mesh_ply(path, mesh: TriMesh, binary=False):
    v = np.asarray(mesh.vertices, float)
    f = np.asarray(mesh.faces, np.int64)
    header = [
        "ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {len(v)}", "property double x", "property double y", "property double z",
        f"element face {len(f)}", "property list uchar int vertex_indices", "end_header",
    ]
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        fa = np.empty(len(f), face_dt)
        fa["n"], fa["idx"] = 3, f
        body = np.ascontiguousarray(v, "<f8").tobytes() + fa.tobytes()
    else:
        body = "".join(" ".join(repr(float(c)) for c in row) + "\n" for row in v)
        body += "".join(f"3 {a} {b} {c}\n" for a, b, c in f)
        body = body.encode("ascii")
    atomic_write_bytes(path, head + body)


# --------------------------------------------------------------------------
# JSON


def pose_to_list(pose: Pose) -> list:
    """3x4 row-major matrix as nested lists.

    Python's float repr is the shortest string that round-trips exactly,
    so poses survive a JSON round trip bit for bit.
    """
    return [[float(v) for v in row] for row in pose.matrix3x4()]


def pose_from_list(rows) -> Pose:
    M = np.asarray(rows, float)
    if M.shape != (3, 4):
        raise MalformedFile(f"pose must be a 3x4 matrix, got shape {M.shape}", None)
    return Pose(M[:, :3], M[:, 3])


def save_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1, allow_nan=True) + "\n")


def load_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"invalid JSON in {path}: {exc.msg}", exc.pos) from None
