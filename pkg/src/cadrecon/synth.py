"""Synthetic partial scans of a mesh, with ground truth, for end-to-end tests.

Visibility is approximated by back-face culling, so every scan is an
unoccluded "hemisphere" of the object minus an explicit occlusion patch.
Noise is applied along the surface normal. All randomness comes from
``numpy.random.default_rng`` (PCG64), which is reproducible across platforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    OrientedPointCloud,
    Pose,
    TriMesh,
    diameter,
    normalize_rows,
    quaternion_to_rotation,
    sample_surface,
)


# --------------------------------------------------------------------------
# procedural meshes


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box, 8 vertices and 12 outward-facing triangles."""
    sx, sy, sz = np.asarray(size, float) / 2
    v = np.array(
        [[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)], dtype=float
    ) + np.asarray(center, float)
    f = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return TriMesh(v, f)


def icosphere(subdivisions=3, radius=1.0) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts) * radius, faces)


def blob_mesh(diameter_target=0.3, seed=0, subdivisions=4, n_bumps=14) -> TriMesh:
    """Asymmetric star-shaped object: an ellipsoid with random Gaussian bumps and dents.

    Rich, non-symmetric geometry keeps pose estimation well posed.
    """
    rng = np.random.default_rng(seed)
    sphere = icosphere(subdivisions)
    u = sphere.vertices
    centers = normalize_rows(rng.normal(size=(n_bumps, 3)))
    amps = rng.uniform(-0.18, 0.3, size=n_bumps)
    widths = rng.uniform(0.25, 0.55, size=n_bumps)
    cosd = u @ centers.T
    r = 1.0 + (amps * np.exp(-(2 - 2 * cosd) / widths**2)).sum(axis=1)
    v = u * r[:, None] * np.array([1.0, 0.75, 0.55])
    mesh = TriMesh(v, sphere.faces)
    scale = diameter_target / diameter(mesh)
    v = (v - v.mean(axis=0)) * scale
    return TriMesh(v, sphere.faces)


# --------------------------------------------------------------------------
# scans


@dataclass
class SynthSpec:
    mesh_path: str | None = None
    n_views: int = 8
    noise_sigma: float = 0.0
    clutter_ratio: float = 0.0
    occlusion_ratio: float = 0.0
    dynamic: bool = False
    seed: int = 0
    # surface samples drawn over the whole object before culling
    n_surface_samples: int = 30000
    # CAD deviation: the scanned instance differs from the mesh by smooth bumps
    # of this amplitude (fraction of the diameter); 0 scans the mesh itself
    instance_deviation: float = 0.0

    def __post_init__(self):
        if not 0 <= self.clutter_ratio < 1 or not 0 <= self.occlusion_ratio < 1:
            raise ValueError("clutter_ratio and occlusion_ratio must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SynthScene:
    cloud: OrientedPointCloud  # scene frame
    gt_pose: Pose  # model -> scene
    visibility_mask: np.ndarray  # per object surface sample
    object_mask: np.ndarray = field(default=None)  # per scene point: True for object, False for clutter
    camera_dir: np.ndarray = field(default=None)


def fibonacci_directions(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _random_rotation(rng):
    q = rng.normal(size=4)
    return quaternion_to_rotation(q / np.linalg.norm(q))


def _camera_from_world(camera_dir, center, distance, rng) -> Pose:
    """Camera looking along ``camera_dir`` at ``center``, random roll."""
    z = np.asarray(camera_dir, float) / np.linalg.norm(camera_dir)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    roll = rng.uniform(-np.pi, np.pi)
    c, s = np.cos(roll), np.sin(roll)
    x, y = c * x + s * y, -s * x + c * y
    R = np.stack([x, y, z])
    eye = np.asarray(center, float) - z * distance
    return Pose(R, -R @ eye)


def deformed_instance(mesh: TriMesh, amplitude, seed) -> TriMesh:
    """Mesh displaced along vertex directions by smooth random bumps.

    Emulates a physical instance deviating from its nominal CAD model.
    """
    if amplitude == 0:
        return mesh
    rng = np.random.default_rng(seed + 7919)
    diam = diameter(mesh)
    c = mesh.vertices.mean(axis=0)
    u = normalize_rows(mesh.vertices - c)
    centers = normalize_rows(rng.normal(size=(6, 3)))
    amps = rng.uniform(-1, 1, size=6) * amplitude * diam
    disp = (amps * np.exp(-(2 - 2 * (u @ centers.T)) / 0.3)).sum(axis=1)
    return TriMesh(mesh.vertices + u * disp[:, None], mesh.faces)


def _clutter_primitives(rng, center, diam):
    prims = [box_mesh((3.0 * diam, 3.0 * diam, 0.02 * diam), center + np.array([0, 0, -0.8 * diam]))]
    for _ in range(rng.integers(2, 5)):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.85, 1.3) * diam
        size = rng.uniform(0.2, 0.5, size=3) * diam
        pos = center + np.array([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-0.4, 0.2) * diam])
        box = box_mesh(size, (0, 0, 0))
        R = Pose(_random_rotation(rng), pos)
        prims.append(box.transformed(R))
    return prims


def synth_view(mesh: TriMesh, camera_dir, spec: SynthSpec, view_index=0) -> SynthScene:
    """One partial, noisy, cluttered scan of ``mesh`` seen along ``camera_dir``."""
    camera_dir = np.asarray(camera_dir, float)
    camera_dir = camera_dir / np.linalg.norm(camera_dir)
    diam = diameter(mesh)
    static_rng = np.random.default_rng([spec.seed, 0])
    view_rng = np.random.default_rng([spec.seed, 1, view_index])
    placement_rng = view_rng if spec.dynamic else static_rng

    # object placement in the world and the clutter layout
    world_from_model = Pose(_random_rotation(placement_rng), placement_rng.uniform(-0.5, 0.5, 3) * diam)
    center = world_from_model.apply(mesh.vertices.mean(axis=0))
    prims = _clutter_primitives(placement_rng, center, diam)

    instance = deformed_instance(mesh, spec.instance_deviation, spec.seed)
    surf = sample_surface(instance, spec.n_surface_samples, np.random.default_rng([spec.seed, 2]))
    dir_model = world_from_model.inverse().rotate(camera_dir)
    visible = surf.normals @ (-dir_model) > 0
    vis_idx = np.flatnonzero(visible)
    n_occ = int(round(spec.occlusion_ratio * len(vis_idx)))
    if n_occ > 0:
        seed_pt = surf.points[vis_idx[view_rng.integers(len(vis_idx))]]
        _, ball = cKDTree(surf.points[vis_idx]).query(seed_pt, k=n_occ)
        visible[vis_idx[np.atleast_1d(ball)]] = False
    obj = surf.subset(np.flatnonzero(visible))
    pts = obj.points + view_rng.normal(0.0, 1.0, len(obj))[:, None] * spec.noise_sigma * obj.normals if spec.noise_sigma > 0 else obj.points
    obj = OrientedPointCloud(pts, obj.normals).transformed(world_from_model)

    n_clutter = int(round(spec.clutter_ratio / (1 - spec.clutter_ratio) * len(obj))) if spec.clutter_ratio > 0 else 0
    clutter = _sample_clutter(prims, camera_dir, n_clutter, spec.noise_sigma, view_rng)

    cam = _camera_from_world(camera_dir, center, 2.0 * diam, view_rng)
    scene = OrientedPointCloud.concatenate([obj, clutter]).transformed(cam)
    is_obj = np.r_[np.ones(len(obj), bool), np.zeros(len(clutter), bool)]
    order = view_rng.permutation(len(scene))
    return SynthScene(scene.subset(order), cam.compose(world_from_model), visible, is_obj[order], camera_dir)


def _sample_clutter(prims, camera_dir, n, sigma, rng) -> OrientedPointCloud:
    if n == 0:
        return OrientedPointCloud(np.empty((0, 3)), np.empty((0, 3)))
    tris = np.concatenate([p.triangles() for p in prims])
    normals = np.concatenate([p.face_normals() for p in prims])
    facing = normals @ (-camera_dir) > 0
    both = TriMesh(tris[facing].reshape(-1, 3), np.arange(3 * facing.sum()).reshape(-1, 3))
    cloud = sample_surface(both, n, rng)
    if sigma > 0:
        cloud = OrientedPointCloud(cloud.points + rng.normal(0, sigma, n)[:, None] * cloud.normals, cloud.normals)
    return cloud


def synth_clutter_scene(diam, n_points, seed, noise_sigma=0.0, n_distractors=3) -> OrientedPointCloud:
    """A scan of clutter only: ground slab, boxes and other bumpy objects.

    The distractors are blobs with different shapes of the same size, which
    makes the scene a hard negative for a detector trained on any blob.
    """
    rng = np.random.default_rng([seed, 3])
    center = np.zeros(3)
    prims = _clutter_primitives(rng, center, diam)
    for k in range(n_distractors):
        blob = blob_mesh(diam * rng.uniform(0.6, 1.0), seed=10_000 + int(rng.integers(1 << 30)), subdivisions=3)
        ang = 2 * np.pi * (k + rng.uniform(0, 0.5)) / max(n_distractors, 1)
        pos = np.array([0.6 * diam * np.cos(ang), 0.6 * diam * np.sin(ang), rng.uniform(-0.3, 0.1) * diam])
        prims.append(blob.transformed(Pose(_random_rotation(rng), pos)))
    camera_dir = normalize_rows(rng.normal(size=(1, 3)))[0]
    camera_dir[2] = -abs(camera_dir[2]) - 0.3
    camera_dir /= np.linalg.norm(camera_dir)
    cloud = _sample_clutter(prims, camera_dir, n_points, noise_sigma, rng)
    cam = _camera_from_world(camera_dir, center, 2.0 * diam, rng)
    return cloud.transformed(cam)


def synth_dataset(mesh: TriMesh, spec: SynthSpec, check_overlap=True) -> list[SynthScene]:
    """``spec.n_views`` scans from Fibonacci-sphere directions."""
    if spec.n_views < 2:
        raise ValueError("need at least two views")
    dirs = fibonacci_directions(spec.n_views)
    scenes = [synth_view(mesh, d, spec, i) for i, d in enumerate(dirs)]
    if check_overlap:
        overlaps = adjacent_view_overlaps(mesh, scenes)
        if overlaps.min() < 0.15:
            raise RuntimeError(f"adjacent views overlap only {overlaps.min():.2f}")
    return scenes


def adjacent_view_overlaps(mesh: TriMesh, scenes: list[SynthScene], voxel_fraction=0.05):
    """For each view, voxel overlap fraction with its closest-direction neighbour."""
    from .geometry import VoxelGrid

    grid = VoxelGrid.around(mesh.vertices, voxel_fraction * diameter(mesh))
    sets = []
    for s in scenes:
        model_pts = s.gt_pose.inverse().apply(s.cloud.points[s.object_mask])
        lin = grid.linear_index(model_pts)
        sets.append(set(lin[lin >= 0].tolist()))
    dirs = np.array([s.camera_dir for s in scenes])
    out = []
    for i in range(len(scenes)):
        cos = dirs @ dirs[i]
        cos[i] = -np.inf
        j = int(np.argmax(cos))
        out.append(len(sets[i] & sets[j]) / max(min(len(sets[i]), len(sets[j])), 1))
    return np.array(out)


# --------------------------------------------------------------------------
# evaluation


def closest_points_on_triangles(p, a, b, c):
    """Row-wise closest point on triangle ``(a, b, c)`` to ``p`` (all ``(N, 3)``)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), bool)

    def put(mask, val):
        nonlocal done
        m = mask & ~done
        out[m] = val[m] if np.ndim(val) == 2 else val
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


class TriangleIndex:
    """Exact point-to-mesh distance via a KD-tree over triangle centroids."""

    def __init__(self, mesh: TriMesh):
        self.tri = mesh.triangles()
        cent = self.tri.mean(axis=1)
        self.radius = np.linalg.norm(self.tri - cent[:, None], axis=2).max(axis=1)
        self.max_radius = float(self.radius.max())
        self.tree = cKDTree(cent)

    def _dist_pairs(self, q, qi, ti):
        cp = closest_points_on_triangles(q[qi], self.tri[ti, 0], self.tri[ti, 1], self.tri[ti, 2])
        return np.linalg.norm(q[qi] - cp, axis=1)

    def distance(self, points):
        q = np.asarray(points, float).reshape(-1, 3)
        k = min(8, len(self.tri))
        _, near = self.tree.query(q, k=k)
        near = near.reshape(len(q), -1)
        qi = np.repeat(np.arange(len(q)), near.shape[1])
        upper = self._dist_pairs(q, qi, near.ravel()).reshape(len(q), -1).min(axis=1)
        cand = self.tree.query_ball_point(q, upper + self.max_radius + 1e-12)
        sizes = np.array([len(c) for c in cand])
        qi = np.repeat(np.arange(len(q)), sizes)
        ti = np.fromiter((t for c in cand for t in c), dtype=np.int64, count=int(sizes.sum()))
        d = self._dist_pairs(q, qi, ti)
        best = np.full(len(q), np.inf)
        np.minimum.at(best, qi, d)
        return np.minimum(best, upper)


def eval_reconstruction(recon, mesh: TriMesh):
    """``(mean, stddev, rms)`` of unsigned point-to-surface distances."""
    pts = recon.points if isinstance(recon, OrientedPointCloud) else np.asarray(recon, float)
    if len(pts) == 0:
        raise ValueError("reconstruction is empty")
    d = TriangleIndex(mesh).distance(pts)
    return float(d.mean()), float(d.std()), float(np.sqrt((d**2).mean()))
