"""Pose-graph construction from segmented views in the model frame.

Every view contributes the voxels its segmented points fall in. Counting,
per camera pair, the voxels both cameras see gives the histogram of
pairwise overlaps (HPO). Edges are chosen by hysteresis on that histogram:
strong pairs are linked outright, weaker ones only until the graph is
connected. Node poses map camera (scene) coordinates into the model frame.
"""
from __future__ import annotations

import bisect
import contextlib
import gc
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateCamera, NonPositiveSceneArea
from .geometry import OrientedPointCloud, Pose


class UnionFind:
    """Disjoint sets with union by rank, path compression and sizes."""

    def __init__(self, n=0):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.size = [1] * n
        self.component_count = n

    def __len__(self):
        return len(self.parent)

    def add(self) -> int:
        """Append a singleton and return its id."""
        self.parent.append(len(self.parent))
        self.rank.append(0)
        self.size.append(1)
        self.component_count += 1
        return len(self.parent) - 1

    def find(self, x) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        """Merge the sets of ``a`` and ``b``; ``True`` if they were distinct."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        # higher rank wins; on equal rank the smaller id becomes the root
        if self.rank[ra] < self.rank[rb] or (self.rank[ra] == self.rank[rb] and rb < ra):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        self.component_count -= 1
        return True

    def connected(self, a, b) -> bool:
        return self.find(a) == self.find(b)

    def copy(self) -> "UnionFind":
        uf = UnionFind()
        uf.parent = list(self.parent)
        uf.rank = list(self.rank)
        uf.size = list(self.size)
        uf.component_count = self.component_count
        return uf

    def components(self) -> dict[int, list[int]]:
        groups = defaultdict(list)
        for x in range(len(self.parent)):
            groups[self.find(x)].append(x)
        return dict(groups)


_KEY_OFFSET = 1 << 20


@contextlib.contextmanager
def _gc_paused():
    # inserting many small sets triggers repeated full collections that
    # rescan every live cell; pausing keeps the build linear
    enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


@dataclass
class VoxelCameraIndex:
    """Sparse voxel grid whose cells hold the set of cameras that saw them.

    Cells are keyed by the integer voxel coordinates ``floor(p / voxel_size)``
    packed into one int64 (21 bits per axis), so the grid is unbounded in
    practice and views can be added one at a time. Each camera keeps the
    sorted array of its cell keys; the per-cell camera sets in ``cells`` are
    built on first access and kept up to date afterwards.
    """

    voxel_size: float
    camera_cells: dict = field(default_factory=dict)
    _cells: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")

    @property
    def cameras(self) -> list[int]:
        return sorted(self.camera_cells)

    @property
    def cells(self) -> dict[int, set]:
        if self._cells is None:
            self._cells = {}
            for cam in self.cameras:
                self._register(cam, self.camera_cells[cam])
        return self._cells

    def _register(self, cam, keys):
        with _gc_paused():
            for k in keys.tolist():
                self._cells.setdefault(k, set()).add(cam)

    def key_array(self, points) -> np.ndarray:
        pts = np.asarray(points, float).reshape(-1, 3)
        ijk = np.floor(pts / self.voxel_size).astype(np.int64) + _KEY_OFFSET
        if ijk.size and (ijk.min() < 0 or ijk.max() >= 2 * _KEY_OFFSET):
            raise ValueError("points too far from the origin for the voxel size")
        return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]

    def keys_of(self, points) -> list[int]:
        return np.unique(self.key_array(points)).tolist()

    def add_view(self, camera_id: int, points) -> np.ndarray:
        """Register ``camera_id`` in every cell hit by ``points``; returns the sorted cell keys."""
        if camera_id in self.camera_cells:
            raise DuplicateCamera(f"camera {camera_id} already indexed")
        if camera_id < 0:
            raise ValueError("camera ids must be non-negative")
        keys = np.unique(self.key_array(points))
        self.camera_cells[camera_id] = keys
        if self._cells is not None:
            self._register(camera_id, keys)
        return keys

    def covered_counts(self) -> dict[int, int]:
        return {c: len(k) for c, k in self.camera_cells.items()}

    def all_keys(self) -> np.ndarray:
        if not self.camera_cells:
            return np.empty(0, np.int64)
        return np.unique(np.concatenate(list(self.camera_cells.values())))


def _points_of(cloud):
    return cloud.points if isinstance(cloud, OrientedPointCloud) else np.asarray(cloud, float).reshape(-1, 3)


def build_voxel_index(segments, voxel_size) -> VoxelCameraIndex:
    """Index ``(camera_id, model-frame points)`` pairs into a voxel camera map."""
    index = VoxelCameraIndex(float(voxel_size))
    for cam, cloud in segments:
        index.add_view(int(cam), _points_of(cloud))
    return index


def compute_hpo(index: VoxelCameraIndex) -> dict[tuple[int, int], int]:
    """Number of shared voxels for every camera pair ``(i, j)``, ``i < j``."""
    cams = index.cameras
    if len(cams) < 2:
        return {}
    keys = np.concatenate([index.camera_cells[c] for c in cams])
    ids = np.concatenate([np.full(len(index.camera_cells[c]), c, np.int64) for c in cams])
    order = np.lexsort((ids, keys))
    keys, ids = keys[order], ids[order]
    # within a run of equal keys the ids are sorted; pair each entry with
    # the ones d places further on for every d that stays inside a run
    firsts, seconds = [], []
    for d in range(1, len(cams)):
        same = keys[d:] == keys[:-d]
        if not same.any():
            break
        firsts.append(ids[:-d][same])
        seconds.append(ids[d:][same])
    if not firsts:
        return {}
    m = int(cams[-1]) + 1
    packed, counts = np.unique(np.concatenate(firsts) * m + np.concatenate(seconds), return_counts=True)
    return {(int(p // m), int(p % m)): int(c) for p, c in zip(packed, counts)}


def _sorted_pairs(hpo):
    # decreasing overlap, then lexicographic pair for a deterministic order
    return sorted(hpo.items(), key=lambda kv: (-kv[1], kv[0]))


def _hysteresis(order, uf: UnionFind, alpha_l, alpha_h):
    edges = []
    rest = []
    for (i, j), w in order:
        if w > alpha_h:
            uf.union(i, j)
            edges.append((i, j, w))
        elif w >= alpha_l:
            rest.append(((i, j), w))
    for (i, j), w in rest:
        if uf.component_count <= 1:
            break
        if uf.union(i, j):
            edges.append((i, j, w))
    return edges


def select_edges(hpo, n_cameras, alpha_l, alpha_h, return_union_find=False):
    """Hysteresis edge selection.

    Pairs above ``alpha_h`` are all linked. Remaining pairs with overlap of
    at least ``alpha_l`` are then walked in decreasing order; a pair becomes
    an edge only if it joins two components, and the walk stops right after
    the edge that makes the graph connected. Returns
    ``(edges, connected)`` with edges as ``(i, j, overlap)``, plus the
    union-find when ``return_union_find`` is set.
    """
    if not 0 <= alpha_l <= alpha_h:
        raise ValueError("need 0 <= alpha_l <= alpha_h")
    uf = UnionFind(n_cameras)
    edges = _hysteresis(_sorted_pairs(hpo), uf, alpha_l, alpha_h)
    connected = uf.component_count <= 1
    return (edges, connected, uf) if return_union_find else (edges, connected)


def largest_component(uf: UnionFind) -> set[int]:
    """Members of the largest component; ties go to the smallest root id."""
    groups = uf.components()
    if not groups:
        return set()
    root = min(groups, key=lambda r: (-len(groups[r]), r))
    return set(groups[root])


def default_thresholds(index: VoxelCameraIndex, low_fraction=0.05, high_fraction=0.3):
    """``(alpha_l, alpha_h)`` as fractions of the smallest per-camera voxel count."""
    counts = index.covered_counts()
    base = min(counts.values()) if counts else 0
    return low_fraction * base, high_fraction * base


def coverage_feedback(index: VoxelCameraIndex, model_samples):
    """Fraction of model samples whose voxel was seen, and the unseen indices."""
    pts = _points_of(model_samples)
    if len(pts) == 0:
        return 0.0, []
    seen = np.isin(index.key_array(pts), index.all_keys())
    return float(seen.mean()), np.flatnonzero(~seen).tolist()


def clutter_metric(model_area, occlusion, scene_area, return_flag=False):
    """``1 - model_area * (1 - occlusion) / scene_area`` clamped to [0, 1].

    Out-of-range inputs or results raise a warning; with ``return_flag``
    the result is ``(value, in_range)``.
    """
    if not scene_area > 0:
        raise NonPositiveSceneArea(f"scene area must be positive, got {scene_area}")
    raw = 1.0 - model_area * (1.0 - occlusion) / scene_area
    in_range = 0.0 <= occlusion <= 1.0 and model_area >= 0 and 0.0 <= raw <= 1.0
    if not in_range:
        warnings.warn(f"clutter inputs out of range (raw value {raw:.4g}); clamping", stacklevel=2)
    value = float(min(max(raw, 0.0), 1.0))
    return (value, in_range) if return_flag else value


class IncrementalGraphBuilder:
    """Insert views one at a time with fixed absolute thresholds.

    Only HPO entries touching the new camera are computed. Linked pairs
    above ``alpha_h`` are kept in a persistent union-find; the weaker
    candidates live in a sorted list that is walked again after each
    insertion, so the edge set always equals the batch result on the views
    seen so far.
    """

    def __init__(self, voxel_size, alpha_l, alpha_h):
        if not 0 <= alpha_l <= alpha_h:
            raise ValueError("need 0 <= alpha_l <= alpha_h")
        self.index = VoxelCameraIndex(float(voxel_size))
        self.index.cells  # keep per-cell camera sets from the start
        self.alpha_l = alpha_l
        self.alpha_h = alpha_h
        self.hpo: dict[tuple[int, int], int] = {}
        self._ids: dict[int, int] = {}
        self._strong_uf = UnionFind()
        self._strong: list = []
        self._weak: list = []
        self.edges: list = []
        self.connected = False

    def _internal(self, cam):
        return self._ids[cam]

    def insert_view(self, camera_id: int, points):
        """Add a view; returns the edges that were not present before."""
        camera_id = int(camera_id)
        if camera_id in self._ids:
            raise DuplicateCamera(f"camera {camera_id} already inserted")
        keys = self.index.add_view(camera_id, _points_of(points))
        self._ids[camera_id] = self._strong_uf.add()
        touched = defaultdict(int)
        for k in keys:
            for other in self.index.cells[k]:
                if other != camera_id:
                    touched[other] += 1
        for other, w in touched.items():
            pair = (min(other, camera_id), max(other, camera_id))
            self.hpo[pair] = w
            item = (-w, pair)
            if w > self.alpha_h:
                self._strong_uf.union(self._internal(pair[0]), self._internal(pair[1]))
                bisect.insort(self._strong, item)
            elif w >= self.alpha_l:
                bisect.insort(self._weak, item)
        uf = self._strong_uf.copy()
        edges = [(i, j, -nw) for nw, (i, j) in self._strong]
        for nw, (i, j) in self._weak:
            if uf.component_count <= 1:
                break
            if uf.union(self._internal(i), self._internal(j)):
                edges.append((i, j, -nw))
        before = {(i, j) for i, j, _ in self.edges}
        self.edges = sorted(edges, key=lambda e: (-e[2], e[0], e[1]))
        self.connected = uf.component_count <= 1
        self._uf = uf
        return [e for e in self.edges if (e[0], e[1]) not in before]

    @property
    def component_count(self) -> int:
        return self._uf.component_count if self._ids else 0


@dataclass
class PoseEdge:
    i: int
    j: int
    overlap: int
    relative: Pose  # T_i^-1 o T_j, maps frame j into frame i


@dataclass
class PoseGraph:
    """Cameras with absolute poses (camera -> model frame) and overlap edges."""

    nodes: dict[int, Pose]
    edges: list[PoseEdge]
    coverage: float = float("nan")

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def adjacency(self) -> np.ndarray:
        """Symmetric boolean adjacency over ``node_ids`` order."""
        ids = self.node_ids
        pos = {c: k for k, c in enumerate(ids)}
        A = np.zeros((len(ids), len(ids)), bool)
        for e in self.edges:
            A[pos[e.i], pos[e.j]] = A[pos[e.j], pos[e.i]] = True
        return A

    def is_connected(self) -> bool:
        ids = self.node_ids
        if not ids:
            return False
        uf = UnionFind(len(ids))
        pos = {c: k for k, c in enumerate(ids)}
        for e in self.edges:
            uf.union(pos[e.i], pos[e.j])
        return uf.component_count == 1

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": c, "pose": self.nodes[c].matrix3x4().tolist()} for c in self.node_ids],
            "edges": [{"i": e.i, "j": e.j, "overlap": e.overlap} for e in self.edges],
            "coverage": self.coverage,
        }

    @classmethod
    def from_dict(cls, d) -> "PoseGraph":
        nodes = {int(n["id"]): Pose.from_matrix(np.asarray(n["pose"], float)) for n in d["nodes"]}
        edges = []
        for e in d["edges"]:
            i, j = int(e["i"]), int(e["j"])
            if i not in nodes or j not in nodes:
                raise ValueError(f"edge ({i}, {j}) references a missing node")
            edges.append(PoseEdge(i, j, int(e["overlap"]), nodes[i].inverse().compose(nodes[j])))
        return cls(nodes, edges, float(d.get("coverage", float("nan"))))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text) -> "PoseGraph":
        return cls.from_dict(json.loads(text))


@dataclass
class GraphBuild:
    graph: PoseGraph
    index: VoxelCameraIndex
    hpo: dict
    alpha_l: float
    alpha_h: float
    connected: bool
    dropped: list[int]


def build_pose_graph(poses: dict[int, Pose], segments: dict[int, object], voxel_size, alpha_l=None, alpha_h=None,
                     low_fraction=0.05, high_fraction=0.3, model_samples=None) -> GraphBuild:
    """Batch graph build.

    ``poses[c]`` maps camera ``c`` into the model frame and ``segments[c]``
    holds that camera's segmented points in its own frame. Thresholds left
    as ``None`` come from :func:`default_thresholds`. When the selected
    edges do not connect every camera, the largest component is kept.
    """
    cams = sorted(poses)
    if not cams:
        raise ValueError("no cameras")
    pos = {c: k for k, c in enumerate(cams)}
    index = build_voxel_index([(c, poses[c].apply(_points_of(segments[c]))) for c in cams], voxel_size)
    lo, hi = default_thresholds(index, low_fraction, high_fraction)
    alpha_l = lo if alpha_l is None else alpha_l
    alpha_h = hi if alpha_h is None else alpha_h
    hpo = compute_hpo(index)
    local = {(pos[i], pos[j]): w for (i, j), w in hpo.items()}
    edges, connected, uf = select_edges(local, len(cams), alpha_l, alpha_h, return_union_find=True)
    keep = largest_component(uf)
    kept_ids = {cams[k] for k in keep}
    nodes = {c: poses[c] for c in cams if c in kept_ids}
    pose_edges = [
        PoseEdge(cams[i], cams[j], int(w), nodes[cams[i]].inverse().compose(nodes[cams[j]]))
        for i, j, w in edges
        if cams[i] in kept_ids and cams[j] in kept_ids
    ]
    coverage = coverage_feedback(index, model_samples)[0] if model_samples is not None else float("nan")
    graph = PoseGraph(nodes, pose_edges, coverage)
    return GraphBuild(graph, index, hpo, alpha_l, alpha_h, connected, [c for c in cams if c not in kept_ids])
