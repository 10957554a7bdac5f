"""Command-line front end for the reconstruction pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 pipeline failure.
Diagnostics go to standard error; results are written to files only
(except ``eval``, whose table is its result).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig
from .detector import PoseCluster, detect
from .errors import DataError, NoHypotheses, PipelineFailure
from .geometry import KdIndex, OrientedPointCloud
from .pipeline import budget_indices, build_graph, reconstruct, train_model, view_segment
from .posegraph import PoseGraph, coverage_feedback
from .ppf import Codebook
from .refiner import refine
from .synth import SynthSpec, eval_reconstruction, synth_dataset
from .verifier import verify_all

log = logging.getLogger("cadrecon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config) if args.config else PipelineConfig()


def _scale_cloud(cloud: OrientedPointCloud, s):
    return cloud if s == 1.0 else OrientedPointCloud(cloud.points * s, cloud.normals)


def _load_scene(path, cfg):
    return _scale_cloud(io.load_cloud(path), cfg.unit_scale)


def _scene_files(directory) -> list[Path]:
    files = sorted(Path(directory).glob("*.ply"))
    if not files:
        raise DataError(f"no .ply scenes in {directory}")
    return files


def cmd_train(args):
    cfg = _config(args)
    if args.tau is not None:
        cfg.tau = args.tau
    mesh = io.load_mesh(args.model)
    if cfg.unit_scale != 1.0:
        mesh = type(mesh)(mesh.vertices * cfg.unit_scale, mesh.faces)
    cb = train_model(mesh, cfg)
    cb.save(args.out)
    log.info("codebook: %d samples, %d buckets, %d entries", cb.n_samples, len(cb.keys), cb.n_entries)


def cmd_detect(args):
    cfg = _config(args)
    cb = Codebook.load(args.codebook)
    scene = _load_scene(args.scene, cfg)
    clusters = detect(scene, cb, cfg.detector)
    io.save_json(args.out, {
        "scene": str(args.scene),
        "clusters": [
            {"pose": io.pose_to_list(c.mean_pose), "mass": c.total_mass, "members": c.member_count} for c in clusters
        ],
    })
    log.info("%d pose clusters", len(clusters))


def cmd_verify(args):
    cfg = _config(args)
    cb = Codebook.load(args.codebook)
    scene = _load_scene(args.scene, cfg)
    hyps = io.load_json(args.hyps)
    clusters = [
        PoseCluster(io.pose_from_list(h["pose"]), float(h["mass"]), int(h["members"])) for h in hyps.get("clusters", [])
    ]
    verified = verify_all(clusters, scene, cb.sampled_model, cfg.verifier)
    accepted = [v for v in verified if v.accepted]
    io.save_json(args.out, {
        "scene": str(args.scene),
        "poses": [
            {"pose": io.pose_to_list(v.pose), "score": v.score, "normal_consistency": v.normal_consistency}
            for v in accepted
        ],
        "rejected": len(verified) - len(accepted),
    })
    log.info("%d accepted, %d rejected", len(accepted), len(verified) - len(accepted))


def cmd_graph(args):
    cfg = _config(args)
    cb = Codebook.load(args.codebook)
    model_index = KdIndex(cb.sampled_model.points)
    poses, segments, names, seg_idx = {}, {}, {}, {}
    for cam, path in enumerate(_scene_files(args.scenes)):
        vpath = Path(args.verified) / f"{path.stem}.json"
        if not vpath.exists():
            log.info("%s: no verification file, skipped", path.name)
            continue
        ver = io.load_json(vpath).get("poses", [])
        if not ver:
            log.info("%s: no accepted pose, skipped", path.name)
            continue
        scene = _load_scene(path, cfg)
        pose = io.pose_from_list(ver[0]["pose"])
        idx = view_segment(scene, pose, cb, cfg, model_index)
        idx = idx[budget_indices(len(idx), cfg.max_points_per_view, cfg.seed + cam)]
        poses[cam] = pose.inverse()
        segments[cam] = scene.subset(idx)
        names[cam] = path.name
        seg_idx[cam] = idx
    if not poses:
        raise NoHypotheses("no scene has an accepted pose")
    build = build_graph(poses, segments, cb, cfg)
    frac, uncovered = coverage_feedback(build.index, cb.sampled_model)
    d = build.graph.to_dict()
    for node in d["nodes"]:
        node["scene"] = names[node["id"]]
        node["segment"] = seg_idx[node["id"]].tolist()
    d.update(
        model_diameter=cb.model_diameter, alpha_l=build.alpha_l, alpha_h=build.alpha_h,
        connected=build.connected, dropped=build.dropped, uncovered_samples=len(uncovered),
    )
    io.save_json(args.out, d)
    print(f"coverage {frac:.3f}, unscanned model samples {len(uncovered)}", file=sys.stderr)


def _graph_views(d, scenes_dir, cfg):
    clouds = {}
    for node in d["nodes"]:
        scene = _load_scene(Path(scenes_dir) / node["scene"], cfg)
        idx = np.asarray(node["segment"], np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(scene)):
            raise DataError(f"segment of camera {node['id']} does not match {node['scene']}")
        clouds[int(node["id"])] = scene.subset(idx)
    return clouds


def cmd_refine(args):
    cfg = _config(args)
    d = io.load_json(args.graph)
    graph = PoseGraph.from_dict(d)
    clouds = _graph_views(d, args.scenes, cfg)
    params = dataclasses.replace(cfg.refine, diameter=float(d.get("model_diameter", cfg.refine.diameter)))
    poses, report = refine(graph, clouds, params)
    cams = [
        {"id": n["id"], "scene": n["scene"], "segment": n["segment"], "pose": io.pose_to_list(poses[int(n["id"])])}
        for n in d["nodes"]
    ]
    io.save_json(args.out, {"cameras": cams, "fixed_frame": report.fixed_frame})
    if args.report:
        io.save_json(args.report, report.to_dict())
    log.info("refined %d cameras, final energy %.6g", len(cams), report.energies[-1])


def cmd_reconstruct(args):
    cfg = _config(args)
    d = io.load_json(args.poses)
    cams = d.get("cameras", [])
    if not cams:
        raise NoHypotheses("no camera poses to reconstruct from")
    clouds = _graph_views({"nodes": cams}, args.scenes, cfg)
    poses = {int(c["id"]): io.pose_from_list(c["pose"]) for c in cams}
    recon = reconstruct(poses, clouds)
    io.write_ply(args.out, recon)
    log.info("reconstruction with %d points", len(recon))


def cmd_synth(args):
    spec_d = io.load_json(args.spec)
    try:
        spec = SynthSpec(**{**spec_d, "mesh_path": str(args.mesh)})
    except TypeError as exc:
        raise DataError(f"bad synth spec: {exc}") from None
    mesh = io.load_mesh(args.mesh)
    scenes = synth_dataset(mesh, spec)
    out = Path(args.out)
    views = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:03d}.ply"
        io.write_ply(out / name, s.cloud)
        views.append({"scene": name, "gt_pose": io.pose_to_list(s.gt_pose), "camera_dir": s.camera_dir.tolist()})
    io.save_json(out / "ground_truth.json", {"spec": {**spec_d, "mesh_path": str(args.mesh)}, "views": views})
    log.info("wrote %d scenes to %s", len(scenes), out)


def cmd_eval(args):
    cfg = _config(args)
    recon = _load_scene(args.recon, cfg)
    mesh = io.load_mesh(args.mesh)
    mean, std, rms = eval_reconstruction(recon, mesh)
    print(f"{'points':>8} {'mean':>12} {'std':>12} {'rms':>12}")
    print(f"{len(recon):>8d} {mean:>12.6g} {std:>12.6g} {rms:>12.6g}")
    if args.out:
        io.save_json(args.out, {"points": len(recon), "mean": mean, "std": std, "rms": rms})


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cadrecon", description="CAD-prior multiview reconstruction")
    p.add_argument("--config", help="pipeline configuration JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train", help="build a codebook from a model mesh")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="pose hypotheses in one scene")
    s.add_argument("--codebook", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("verify", help="refine and accept or reject hypotheses")
    s.add_argument("--codebook", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--hyps", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("graph", help="pose graph over verified scenes")
    s.add_argument("--codebook", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--verified", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("refine", help="joint multiview pose refinement")
    s.add_argument("--graph", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("reconstruct", help="stitch segments into the model frame")
    s.add_argument("--poses", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("synth", help="synthetic scans of a mesh")
    s.add_argument("--mesh", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="distance of a reconstruction to a mesh")
    s.add_argument("--recon", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except PipelineFailure as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
