"""End-to-end object-based reconstruction from a set of scans.

Per scan: detect the model, verify the hypotheses and keep the best
accepted pose. The scan points explained by that pose form the view's
segment. Segments are linked into a pose graph over model space, the camera
poses are refined jointly, and the union of all segments mapped into the
model frame is the reconstruction.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .detector import PoseCluster, detect
from .errors import DisconnectedGraph, NoHypotheses
from .geometry import KdIndex, OrientedPointCloud, Pose, TriMesh
from .posegraph import GraphBuild, build_pose_graph
from .ppf import Codebook, train
from .refiner import RefineParams, RefineReport, refine
from .verifier import VerifiedPose, segment, verify_all

log = logging.getLogger(__name__)


def train_model(mesh: TriMesh, cfg: PipelineConfig) -> Codebook:
    return train(mesh, tau=cfg.tau, angle_step=cfg.angle_step, seed=cfg.seed)


@dataclass
class ViewResult:
    clusters: list[PoseCluster]
    verified: list[VerifiedPose]

    @property
    def best(self) -> VerifiedPose | None:
        return next((v for v in self.verified if v.accepted), None)


def process_view(scene: OrientedPointCloud, codebook: Codebook, cfg: PipelineConfig) -> ViewResult:
    """Detection followed by verification for one scan."""
    try:
        clusters = detect(scene, codebook, cfg.detector)
    except NoHypotheses:
        return ViewResult([], [])
    verified = verify_all(clusters, scene, codebook.sampled_model, cfg.verifier)
    return ViewResult(clusters, verified)


def view_segment(scene: OrientedPointCloud, pose: Pose, codebook: Codebook, cfg: PipelineConfig,
                 model_index: KdIndex | None = None) -> np.ndarray:
    """Indices of scene points within ``tau_theta`` of the posed model."""
    model = codebook.sampled_model
    model_index = model_index or KdIndex(model.points)
    return segment(pose, scene, model, model_index, cfg.verifier.tau_theta)


def budget_indices(n, budget, seed=0):
    """At most ``budget`` sorted indices out of ``n``, chosen reproducibly."""
    if n <= budget:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, budget, replace=False))


def graph_params_for(codebook: Codebook, cfg: PipelineConfig):
    voxel = cfg.graph.voxel_size if cfg.graph.voxel_size is not None else 2.0 * codebook.dist_step
    return voxel


def build_graph(camera_poses: dict[int, Pose], segments: dict[int, OrientedPointCloud], codebook: Codebook,
                cfg: PipelineConfig) -> GraphBuild:
    """Pose graph over views; ``camera_poses`` map each scan into the model frame."""
    g = cfg.graph
    return build_pose_graph(
        camera_poses, segments, graph_params_for(codebook, cfg), g.alpha_l, g.alpha_h, g.low_fraction,
        g.high_fraction, model_samples=codebook.sampled_model,
    )


def refine_params_for(codebook: Codebook, cfg: PipelineConfig) -> RefineParams:
    """Refinement settings with the model diameter filled in."""
    return dataclasses.replace(cfg.refine, diameter=codebook.model_diameter)


def reconstruct(camera_poses: dict[int, Pose], segments: dict[int, OrientedPointCloud]) -> OrientedPointCloud:
    """Union of all segments mapped into the model frame."""
    cams = sorted(set(camera_poses) & set(segments))
    if not cams:
        raise NoHypotheses("no view has an accepted pose")
    return OrientedPointCloud.concatenate([segments[c].transformed(camera_poses[c]) for c in cams])


@dataclass
class PipelineResult:
    views: list[ViewResult]
    camera_poses: dict[int, Pose]  # stitched from verified poses, scan -> model
    refined_poses: dict[int, Pose]
    segments: dict[int, OrientedPointCloud]
    graph: GraphBuild | None
    report: RefineReport | None
    stitched: OrientedPointCloud
    refined: OrientedPointCloud
    timings: dict = field(default_factory=dict)


def run_pipeline(mesh: TriMesh, scenes: list[OrientedPointCloud], cfg: PipelineConfig | None = None,
                 codebook: Codebook | None = None) -> PipelineResult:
    """train -> detect -> verify -> graph -> refine -> reconstruct."""
    cfg = cfg or PipelineConfig()
    timings = {}
    t0 = time.perf_counter()
    codebook = codebook or train_model(mesh, cfg)
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    views = [process_view(s, codebook, cfg) for s in scenes]
    timings["detect_verify"] = time.perf_counter() - t0

    camera_poses, segments = {}, {}
    for c, (scene, v) in enumerate(zip(scenes, views)):
        if v.best is None:
            log.info("view %d: no accepted pose", c)
            continue
        seg = v.best.segment
        seg = seg[budget_indices(len(seg), cfg.max_points_per_view, cfg.seed + c)]
        camera_poses[c] = v.best.pose.inverse()
        segments[c] = scene.subset(seg)
    if not camera_poses:
        raise NoHypotheses("no view has an accepted pose")
    stitched = reconstruct(camera_poses, segments)

    t0 = time.perf_counter()
    graph = report = None
    refined_poses = dict(camera_poses)
    if len(camera_poses) >= 2:
        graph = build_graph(camera_poses, segments, codebook, cfg)
        timings["graph"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        try:
            poses, report = refine(graph.graph, segments, refine_params_for(codebook, cfg))
            refined_poses.update(poses)
        except DisconnectedGraph:
            log.info("pose graph has a single camera; skipping refinement")
        timings["refine"] = time.perf_counter() - t0
    kept = graph.graph.node_ids if graph is not None else sorted(camera_poses)
    refined = reconstruct({c: refined_poses[c] for c in kept}, segments)
    return PipelineResult(views, camera_poses, refined_poses, segments, graph, report, stitched, refined, timings)
