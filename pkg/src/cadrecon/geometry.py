"""Rigid transforms, oriented point clouds, meshes and spatial indices.

Everything downstream speaks in terms of these types. Arrays are float64,
points are stored row-wise as ``(N, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from .errors import EmptyCloud, EmptyMesh

EXACT_DIAMETER_LIMIT = 5000


def skew(v):
    """Cross-product matrix ``[v]x`` so that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_angle_axis(w):
    """Rodrigues' formula. ``w`` is the rotation axis scaled by the angle."""
    w = np.asarray(w, dtype=float)
    phi = float(np.linalg.norm(w))
    if phi < 1e-12:
        # second order expansion keeps the result orthonormal to ~1e-24
        K = skew(w)
        return np.eye(3) + K + 0.5 * K @ K
    K = skew(w / phi)
    return np.eye(3) + np.sin(phi) * K + (1.0 - np.cos(phi)) * (K @ K)


def angle_axis_from_rotation(R):
    """Inverse of :func:`rotation_from_angle_axis`; returns ``w`` with ``|w|`` in [0, pi]."""
    R = np.asarray(R, dtype=float)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(v))
    c = 0.5 * (np.trace(R) - 1.0)
    phi = float(np.arctan2(s, c))
    if phi < 1e-8:
        return v
    if s > 1e-6:
        return v * (phi / s)
    # near pi: axis from the symmetric part, sign from the antisymmetric part
    B = 0.5 * (R + np.eye(3))
    col = int(np.argmax(np.diag(B)))
    axis = B[:, col] / np.sqrt(max(B[col, col], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ v < 0:
        axis = -axis
    return axis * phi


def rotation_about_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_about_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_angle_axis(cls, w, t=(0.0, 0.0, 0.0)):
        return cls(rotation_from_angle_axis(w), t)

    def apply(self, x):
        """Transform a single point ``(3,)`` or a batch ``(N, 3)``."""
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def rotate(self, v):
        """Rotate directions (normals) without translating them."""
        return np.asarray(v, dtype=float) @ self.rotation.T

    def compose(self, other: "Pose") -> "Pose":
        """``(self o other)(x) == self(other(x))``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def matrix3x4(self):
        return self.matrix()[:3]

    def angle_axis(self):
        return angle_axis_from_rotation(self.rotation)

    def rotation_angle_to(self, other: "Pose") -> float:
        """Geodesic angle between the two rotations, in radians."""
        c = 0.5 * (np.trace(self.rotation.T @ other.rotation) - 1.0)
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def translation_distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def allclose(self, other: "Pose", atol=1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        w = np.round(self.angle_axis(), 6)
        t = np.round(self.translation, 6)
        return f"Pose(w={w.tolist()}, t={t.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(p: Pose) -> Pose:
    return p.inverse()


def apply(p: Pose, x):
    return p.apply(x)


def pose_from_angle_axis(w, t=(0.0, 0.0, 0.0)) -> Pose:
    return Pose.from_angle_axis(w, t)


def random_pose(rng, max_translation=1.0) -> Pose:
    """Uniformly distributed rotation and a translation inside a cube."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(quaternion_to_rotation(q), rng.uniform(-max_translation, max_translation, size=3))


def rotation_to_quaternion(R):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_rotation(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    """Points with unit normals, both ``(N, 3)``."""

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        n = np.array(self.normals, dtype=float).reshape(-1, 3)
        if len(p) != len(n):
            raise ValueError(f"{len(p)} points but {len(n)} normals")
        if len(n) and np.max(np.abs(np.einsum("ij,ij->i", n, n) - 1.0)) > 1e-6:
            raise ValueError("normals must have unit length")
        p.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "OrientedPointCloud":
        return OrientedPointCloud(self.points[idx], self.normals[idx])

    def transformed(self, pose: Pose) -> "OrientedPointCloud":
        return OrientedPointCloud(pose.apply(self.points), pose.rotate(self.normals))

    @staticmethod
    def concatenate(clouds) -> "OrientedPointCloud":
        clouds = list(clouds)
        if not clouds:
            return OrientedPointCloud(np.empty((0, 3)), np.empty((0, 3)))
        return OrientedPointCloud(
            np.concatenate([c.points for c in clouds]), np.concatenate([c.normals for c in clouds])
        )


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def triangles(self):
        """``(M, 3, 3)`` array of triangle corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self):
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self):
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def without_degenerate_faces(self, eps=1e-15) -> "TriMesh":
        keep = self.face_areas() > eps
        return self if keep.all() else TriMesh(self.vertices, self.faces[keep])

    def transformed(self, pose: Pose) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.faces)


def surface_area(mesh: TriMesh) -> float:
    return float(mesh.face_areas().sum())


def diameter(mesh_or_points) -> float:
    """Largest distance between two vertices.

    Exact for up to 5000 candidate points. Larger inputs are first reduced
    to their convex hull (which contains both endpoints of the diameter);
    if the hull is still larger, a farthest-point double sweep is used,
    which returns at least ``true / sqrt(3)``.
    """
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else np.asarray(mesh_or_points, float)
    pts = pts.reshape(-1, 3)
    if len(pts) < 2:
        raise EmptyMesh("diameter needs at least two vertices")
    if len(pts) > EXACT_DIAMETER_LIMIT:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    if len(pts) <= EXACT_DIAMETER_LIMIT:
        return float(pdist(pts).max())
    a = pts[np.argmax(np.linalg.norm(pts - pts[0], axis=1))]
    d = np.linalg.norm(pts - a, axis=1)
    return float(d.max())


def sample_surface(mesh: TriMesh, n, rng) -> OrientedPointCloud:
    """Area-weighted random surface samples carrying their face normal."""
    areas = mesh.face_areas()
    if areas.sum() <= 0:
        raise EmptyMesh("mesh has no area")
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.triangles()[face]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return OrientedPointCloud(pts, mesh.face_normals()[face])


class KdIndex:
    """Exact nearest-neighbour index.

    Thin wrapper around :class:`scipy.spatial.cKDTree` that makes ties
    deterministic: among equidistant points the lowest index wins.
    """

    def __init__(self, points):
        self.points = np.array(points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloud("cannot index an empty point set")
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def nearest(self, queries, max_dist=None):
        """Return ``(distances, indices)`` of the nearest indexed point per query.

        With ``max_dist``, queries with nothing within that distance get
        ``(inf, -1)``; the search is pruned accordingly and much faster.
        """
        q = np.asarray(queries, dtype=float)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        if len(self.points) == 1:
            d = np.linalg.norm(q - self.points[0], axis=1)
            idx = np.zeros(len(q), dtype=np.int64)
            if max_dist is not None:
                far = d > max_dist
                d[far], idx[far] = np.inf, -1
        else:
            bound = np.inf if max_dist is None else float(max_dist)
            dd, ii = self._tree.query(q, k=2, distance_upper_bound=bound)
            d, idx = dd[:, 0].copy(), ii[:, 0].astype(np.int64)
            idx[~np.isfinite(d)] = -1
            for r in np.flatnonzero(np.isfinite(dd[:, 0]) & (dd[:, 1] <= dd[:, 0])):
                cand = np.asarray(self._tree.query_ball_point(q[r], d[r] * (1 + 1e-12) + 1e-300), dtype=np.int64)
                cd = np.linalg.norm(self.points[cand] - q[r], axis=1)
                idx[r] = cand[cd == cd.min()].min()
                d[r] = cd.min()
        return (d[0], idx[0]) if single else (d, idx)

    def knn(self, queries, k):
        dd, ii = self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=k)
        return dd.reshape(len(dd), -1), ii.reshape(len(ii), -1)

    def within(self, query, radius):
        return sorted(self._tree.query_ball_point(np.asarray(query, float), radius))


class VoxelGrid:
    """Axis-aligned regular grid. Points outside the grid are rejected, not clamped."""

    def __init__(self, origin, voxel_size, dims):
        self.origin = np.array(origin, dtype=float).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        if self.voxel_size <= 0 or min(self.dims) < 1:
            raise ValueError("voxel grid needs positive size and dimensions")

    @classmethod
    def around(cls, points, voxel_size, pad=0.1):
        """Grid covering the bounding box of ``points`` padded by ``pad`` of its extent."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        margin = pad * (hi - lo).max() + voxel_size
        lo, hi = lo - margin, hi + margin
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 1)
        return cls(lo, voxel_size, dims)

    @property
    def n_cells(self):
        return int(np.prod(self.dims))

    def voxel_of(self, points):
        """Integer voxel coordinates ``(N, 3)`` and an in-bounds mask."""
        ijk = np.floor((np.asarray(points, float).reshape(-1, 3) - self.origin) / self.voxel_size).astype(np.int64)
        valid = np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=1)
        return ijk, valid

    def linear_index(self, points):
        """Flat C-order cell index per point, ``-1`` for out-of-bounds points."""
        ijk, valid = self.voxel_of(points)
        lin = np.full(len(ijk), -1, dtype=np.int64)
        if valid.any():
            lin[valid] = np.ravel_multi_index(ijk[valid].T, self.dims)
        return lin

    def centers(self, ijk):
        return self.origin + (np.asarray(ijk, float) + 0.5) * self.voxel_size

    def all_centers(self):
        grid = np.indices(self.dims).reshape(3, -1).T
        return self.centers(grid)


def estimate_normals(points, k=10, viewpoint=(0.0, 0.0, 0.0), return_flags=False):
    """PCA normals from the ``k`` nearest neighbours, flipped towards ``viewpoint``.

    Neighbourhoods of rank < 2 get an arbitrary unit normal (``+z`` before
    flipping) and are reported through the returned flag array when
    ``return_flags`` is set.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(pts) < k:
        raise EmptyCloud(f"need at least k={k} points, got {len(pts)}")
    _, nbr = cKDTree(pts).query(pts, k=k)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale + 1e-300
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    to_view = np.asarray(viewpoint, float) - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    cloud = OrientedPointCloud(pts, normals)
    return (cloud, degenerate) if return_flags else cloud


def sample_uniform_indices(points, min_dist):
    """Indices kept by greedy, order-dependent poisson-disk thinning."""
    if min_dist <= 0:
        raise ValueError("min_dist must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    cells = np.floor((pts - pts.min(axis=0)) / min_dist).astype(np.int64)
    r2 = min_dist * min_dist
    grid: dict[tuple, list] = {}
    kept = []
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    plist = pts.tolist()
    for i, (cx, cy, cz) in enumerate(cells.tolist()):
        x, y, z = plist[i]
        ok = True
        for dx, dy, dz in offsets:
            bucket = grid.get((cx + dx, cy + dy, cz + dz))
            if bucket is None:
                continue
            for j in bucket:
                px, py, pz = plist[j]
                if (px - x) ** 2 + (py - y) ** 2 + (pz - z) ** 2 < r2:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            kept.append(i)
            grid.setdefault((cx, cy, cz), []).append(i)
    return np.asarray(kept, dtype=np.int64)


def sample_uniform(cloud: OrientedPointCloud, min_dist) -> OrientedPointCloud:
    """Keep a subset where no two points are closer than ``min_dist``."""
    return cloud.subset(sample_uniform_indices(cloud.points, min_dist))


def normalize_rows(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)
