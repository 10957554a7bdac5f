"""How the overlap histogram turns scans into a pose graph.

Uses ground-truth object segments so that only the graph logic is on show:
the model-space voxel index, the pairwise overlap counts, and the
hysteresis rule that keeps strong pairs and adds weak ones only until
everything is connected.

    python demos/pose_graph.py
"""
import numpy as np

from cadrecon.geometry import diameter
from cadrecon.posegraph import build_pose_graph, coverage_feedback
from cadrecon.synth import SynthSpec, blob_mesh, sample_surface, synth_dataset

mesh = blob_mesh(0.3, seed=1)
scans = synth_dataset(mesh, SynthSpec(n_views=8, seed=1))
cams = {c: s.gt_pose.inverse() for c, s in enumerate(scans)}
segments = {c: s.cloud.subset(np.flatnonzero(s.object_mask)) for c, s in enumerate(scans)}

build = build_pose_graph(cams, segments, 0.02 * diameter(mesh))
print(f"thresholds: alpha_l {build.alpha_l:.1f}, alpha_h {build.alpha_h:.1f} voxels")
for (i, j), w in sorted(build.hpo.items(), key=lambda kv: -kv[1]):
    linked = any({e.i, e.j} == {i, j} for e in build.graph.edges)
    print(f"  cameras {i}-{j}: {w:5d} shared voxels {'edge' if linked else ''}")
print(f"connected: {build.connected}, dropped cameras: {build.dropped}")

frac, missing = coverage_feedback(build.index, sample_surface(mesh, 5000, np.random.default_rng(0)))
print(f"model coverage {frac:.1%}; {len(missing)} model samples were never scanned")
