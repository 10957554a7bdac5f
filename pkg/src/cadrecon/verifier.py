"""Refinement, scoring and rejection of detected pose hypotheses.

Poses are model -> scene throughout. ICP works on the inverse (scene ->
model) so that scene points can be looked up in model-space structures:
a voxel distance field for the sparse pyramid levels and an exact KD index
for the final dense pass. Normals are kept out of registration on purpose;
they are only used afterwards as an independent consistency check.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import PoseCluster
from .errors import Diverged
from .geometry import KdIndex, OrientedPointCloud, Pose, VoxelGrid, rotation_from_angle_axis, sample_uniform


@dataclass
class VerifierParams:
    # scans sampled near 3 mm spacing put the inlier radius between the
    # accurate (1.5 mm) and coarse (5 mm) sensor regimes
    tau_theta: float = 0.003
    score_threshold: float = 0.25
    normal_threshold: float = 0.6
    normal_angle_max: float = np.deg2rad(30.0)
    pyramid_levels: int = 3
    level_sample_factors: tuple = (0.25, 0.5, 1.0)
    icp_max_iters: int = 30
    dense_max_iters: int = 30
    lm_lambda_init: float = 1e-4
    lm_lambda_factor: float = 10.0
    # hypotheses taken from the top of the detector's cluster list
    max_hypotheses: int = 50
    # truncation radius per level, in units of the model sample spacing;
    # never below 3 * tau_theta
    level_trunc: tuple = (2.0, 1.0, 0.5)
    dedup_rot: float = np.deg2rad(5.0)
    # None means one model sample spacing
    dedup_trans: float | None = None

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if len(self.level_sample_factors) < self.pyramid_levels or len(self.level_trunc) < self.pyramid_levels:
            raise ValueError("need one sample factor and truncation per pyramid level")
        if not (0 < self.score_threshold <= 1 and 0 < self.normal_threshold <= 1):
            raise ValueError("thresholds must lie in (0, 1]")
        if self.tau_theta <= 0:
            raise ValueError("tau_theta must be positive")


@dataclass
class VerifiedPose:
    pose: Pose  # model -> scene
    score: float
    normal_consistency: float
    accepted: bool
    segment: np.ndarray = field(default=None, repr=False)  # scene indices on the model


class DistanceField:
    """Voxelized nearest-model-sample map over the padded model bounding box.

    Each cell stores the model sample nearest to its centre and the distance
    between them. Lookups snap a query to its cell, so the returned sample
    can differ from the exact nearest one near Voronoi boundaries.
    """

    def __init__(self, grid: VoxelGrid, distance, nearest, model_points, model_normals=None):
        self.grid = grid
        self.distance = distance
        self.nearest = nearest
        self.model_points = model_points
        self.model_normals = model_normals

    def query(self, points):
        """``(distance, model index)``; ``(inf, -1)`` outside the grid."""
        lin = self.grid.linear_index(points)
        ok = lin >= 0
        d = np.full(len(lin), np.inf)
        idx = np.full(len(lin), -1, dtype=np.int64)
        d[ok] = self.distance.ravel()[lin[ok]]
        idx[ok] = self.nearest.ravel()[lin[ok]]
        return d, idx


def build_distance_field(model_samples, voxel_size) -> DistanceField:
    if isinstance(model_samples, OrientedPointCloud):
        pts, nrm = model_samples.points, model_samples.normals
    else:
        pts, nrm = np.asarray(model_samples, float).reshape(-1, 3), None
    if len(pts) == 0:
        raise ValueError("distance field needs at least one model sample")
    grid = VoxelGrid.around(pts, voxel_size, pad=0.1)
    # the grid only spans the padded model box, so one batched query suffices
    distance, nearest = KdIndex(pts).nearest(grid.all_centers())
    distance = distance.reshape(grid.dims)
    nearest = nearest.reshape(grid.dims)
    return DistanceField(grid, distance, nearest, pts, nrm)


def _lm_surface(src, init: Pose, correspond, trunc, gate, max_iters, lam0, lam_factor, step_tol=1e-7):
    """LM on the scene -> model transform with truncated surface-distance residuals.

    ``correspond(x)`` returns, per row of ``x``, the matched model sample, its
    normal and a validity mask. The residual is the offset to the sample
    projected on the sample normal, i.e. the distance to the model's local
    tangent plane; matches farther than ``gate`` from their sample are
    outliers. Outliers and residuals beyond ``trunc`` count ``trunc**2``.
    Returns ``(pose, initial_cost, final_cost)`` with costs averaged per point.
    """
    G = init
    t2 = trunc * trunc
    g2 = gate * gate

    def evaluate(pose):
        x = pose.apply(src)
        m, n, ok = correspond(x)
        e = x - m
        r = np.einsum("ij,ij->i", e, n)
        inl = ok & (r * r < t2) & (np.einsum("ij,ij->i", e, e) < g2)
        cost = np.where(inl, r * r, t2).sum()
        return x, r, n, inl, cost

    x, r, n, inl, cost = evaluate(G)
    cost0 = cost
    lam = lam0
    for _ in range(max_iters):
        if inl.sum() < 6:
            break
        xi, ri, ni = x[inl], r[inl], n[inl]
        c = xi.mean(axis=0)
        # x' = exp(dw)(x - c) + c + dt  =>  dr/d(dw) = (x - c) x n,  dr/d(dt) = n
        J = np.hstack([np.cross(xi - c, ni), ni])
        H = J.T @ J
        g = J.T @ ri
        scale = max(np.trace(H) / 6, 1e-300)
        improved = False
        delta = np.zeros(6)
        for _ in range(12):
            try:
                delta = -np.linalg.solve(H + lam * scale * np.eye(6), g)
            except np.linalg.LinAlgError:
                lam *= lam_factor
                continue
            dR = rotation_from_angle_axis(delta[:3])
            cand = Pose(dR, c - dR @ c + delta[3:]).compose(G)
            xc, rc, nc, ic, cc = evaluate(cand)
            if cc <= cost:
                G, x, r, n, inl, cost = cand, xc, rc, nc, ic, cc
                lam = max(lam / lam_factor, 1e-12)
                improved = True
                break
            lam *= lam_factor
        if not improved or np.linalg.norm(delta) < step_tol:
            break
    count = max(len(src), 1)
    return G, cost0 / count, cost / count


def sparse_lm_icp(scene_samples, init: Pose, field: DistanceField, params: VerifierParams, level=0,
                  trunc=None, gate=None) -> Pose:
    """Refine a model -> scene pose against the distance field.

    Scene normals play no part. Raises :class:`Diverged` when the mean
    truncated residual ends above twice its initial value.
    """
    pts = scene_samples.points if isinstance(scene_samples, OrientedPointCloud) else np.asarray(scene_samples, float)
    if len(pts) == 0:
        raise ValueError("no scene samples")
    if trunc is None:
        trunc = 3.0 * params.tau_theta
    if gate is None:
        gate = 2.0 * field.grid.voxel_size + trunc
    mp, mn = field.model_points, field.model_normals

    def correspond(x):
        _, idx = field.query(x)
        ok = idx >= 0
        idx = np.maximum(idx, 0)
        return mp[idx], mn[idx], ok

    G, c0, c1 = _lm_surface(
        pts, init.inverse(), correspond, trunc, gate, params.icp_max_iters, params.lm_lambda_init,
        params.lm_lambda_factor,
    )
    if c1 > 2.0 * c0:
        raise Diverged(f"sparse ICP residual grew from {c0:.3g} to {c1:.3g}")
    return G.inverse()


def dense_icp(scene_points, init: Pose, model_samples: OrientedPointCloud, model_index: KdIndex,
              params: VerifierParams, trunc, gate) -> Pose:
    """Final refinement with exact nearest model samples."""
    mp, mn = model_samples.points, model_samples.normals

    def correspond(x):
        _, idx = model_index.nearest(x)
        return mp[idx], mn[idx], np.ones(len(x), bool)

    G, c0, c1 = _lm_surface(
        np.asarray(scene_points, float), init.inverse(), correspond, trunc, gate, params.dense_max_iters,
        params.lm_lambda_init, params.lm_lambda_factor,
    )
    if c1 > 2.0 * c0:
        raise Diverged("dense ICP residual grew")
    return G.inverse()


def score(pose: Pose, model_samples, scene_index: KdIndex, tau_theta) -> float:
    """Fraction of model samples landing within ``tau_theta`` of a scene point."""
    pts = model_samples.points if isinstance(model_samples, OrientedPointCloud) else np.asarray(model_samples, float)
    if len(pts) == 0:
        raise ValueError("no model samples")
    d, _ = scene_index.nearest(pose.apply(pts))
    return float(np.mean(d < tau_theta))


def normal_consistency(pose: Pose, scene_segment: OrientedPointCloud, model_samples: OrientedPointCloud,
                       model_index: KdIndex, normal_angle_max) -> float:
    """Fraction of segment points whose normal agrees with the nearest model sample's."""
    if len(scene_segment) == 0:
        raise ValueError("empty segment")
    inv = pose.inverse()
    _, idx = model_index.nearest(inv.apply(scene_segment.points))
    ns = inv.rotate(scene_segment.normals)
    cos = np.einsum("ij,ij->i", ns, model_samples.normals[idx])
    return float(np.mean(cos >= np.cos(normal_angle_max)))


def segment(pose: Pose, scene: OrientedPointCloud, model_samples: OrientedPointCloud, model_index: KdIndex,
            tau_theta, gate=None) -> np.ndarray:
    """Indices of scene points lying on the posed model surface.

    A point is on the surface when its offset to the nearest model sample,
    projected on that sample's normal, is below ``tau_theta``, and the
    sample itself is within ``gate`` (default: the model sample spacing).
    """
    if gate is None:
        gate = sample_spacing(model_index)
    x = pose.inverse().apply(scene.points)
    d, idx = model_index.nearest(x)
    off = np.abs(np.einsum("ij,ij->i", x - model_samples.points[idx], model_samples.normals[idx]))
    return np.flatnonzero((off < tau_theta) & (d < gate))


def sample_spacing(model_index: KdIndex) -> float:
    """Median nearest-neighbour distance of the indexed points."""
    if len(model_index) < 2:
        return 0.0
    d, _ = model_index.knn(model_index.points, 2)
    return float(np.median(d[:, 1]))


def _dedup(items, rot, trans):
    """Drop items whose pose is close to an earlier (better) one."""
    kept = []
    for it in items:
        pose = it[0]
        if any(pose.rotation_angle_to(k[0]) < rot and pose.translation_distance_to(k[0]) < trans for k in kept):
            continue
        kept.append(it)
    return kept


def verify_all(clusters: list[PoseCluster], scene: OrientedPointCloud, model_samples: OrientedPointCloud,
               params: VerifierParams | None = None, field: DistanceField | None = None,
               model_index: KdIndex | None = None) -> list[VerifiedPose]:
    """Coarse-to-fine refinement and scoring of the strongest clusters.

    Level ``l`` (1-based) of ``L`` refines every survivor against a scene
    subsampled at ``spacing / (4 * factor_l)`` and drops poses scoring below
    ``score_threshold * (0.5 + 0.5 * l / L)``. Survivors get a dense pass on
    the full scene, then the score and normal check decide acceptance.
    """
    params = params or VerifierParams()
    if not clusters or len(scene) == 0:
        return []
    model_index = model_index or KdIndex(model_samples.points)
    spacing = sample_spacing(model_index)
    if field is None:
        field = build_distance_field(model_samples, spacing / 2)
    scene_index = KdIndex(scene.points)
    dedup_trans = params.dedup_trans if params.dedup_trans is not None else spacing
    min_trunc = 3.0 * params.tau_theta

    poses = [c.mean_pose for c in clusters[: params.max_hypotheses]]
    L = params.pyramid_levels
    for level in range(L):
        pts = sample_uniform(scene, spacing / (4.0 * params.level_sample_factors[level])).points
        trunc = max(params.level_trunc[level] * spacing, min_trunc)
        cut = params.score_threshold * (0.5 + 0.5 * (level + 1) / L)
        scored = []
        for p in poses:
            try:
                q = sparse_lm_icp(pts, p, field, params, level, trunc=trunc, gate=spacing + trunc)
            except Diverged:
                continue
            xi = score(q, model_samples, scene_index, params.tau_theta)
            if xi >= cut:
                scored.append((q, xi))
        scored.sort(key=lambda it: -it[1])
        scored = _dedup(scored, params.dedup_rot, dedup_trans)
        poses = [q for q, _ in scored]
        if not poses:
            return []

    out = []
    for p in poses:
        try:
            q = dense_icp(scene.points, p, model_samples, model_index, params, trunc=min_trunc, gate=spacing + min_trunc)
        except Diverged:
            q = p
        xi = score(q, model_samples, scene_index, params.tau_theta)
        seg = segment(q, scene, model_samples, model_index, params.tau_theta)
        nc = normal_consistency(q, scene.subset(seg), model_samples, model_index, params.normal_angle_max) if len(seg) else 0.0
        ok = xi >= params.score_threshold and nc >= params.normal_threshold
        out.append(VerifiedPose(q, xi, nc, bool(ok), seg))
    out.sort(key=lambda v: -v.score)
    kept = _dedup([(v.pose, v) for v in out], params.dedup_rot, dedup_trans)
    return [v for _, v in kept]
