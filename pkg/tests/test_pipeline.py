import numpy as np
import pytest

from cadrecon.config import PipelineConfig
from cadrecon.errors import NoHypotheses
from cadrecon.pipeline import budget_indices, reconstruct, run_pipeline
from cadrecon.synth import SynthSpec, eval_reconstruction, synth_clutter_scene, synth_dataset

SIGMA = 0.0006


@pytest.fixture(scope="module")
def scenes(blob):
    spec = SynthSpec(n_views=5, noise_sigma=SIGMA, clutter_ratio=0.3, occlusion_ratio=0.1, seed=21)
    return synth_dataset(blob, spec)


@pytest.fixture(scope="module")
def result(blob, codebook, scenes):
    return run_pipeline(blob, [s.cloud for s in scenes], PipelineConfig(), codebook=codebook)


def _pose_error(a, b):
    d = a.inverse().compose(b)
    return np.degrees(np.linalg.norm(d.angle_axis())), np.linalg.norm(d.translation)


def test_every_view_is_registered(result, scenes):
    assert sorted(result.camera_poses) == list(range(len(scenes)))
    for c, s in enumerate(scenes):
        # error in the model frame; scan-frame translations carry the camera lever arm
        deg, trans = _pose_error(s.gt_pose, result.camera_poses[c].inverse())
        assert deg < 1.0 and trans < 0.0015


def test_segments_are_mostly_object(result, scenes):
    for c, s in enumerate(scenes):
        seg = result.views[c].best.segment
        assert s.object_mask[seg].mean() > 0.97


def test_refinement_keeps_the_fixed_frame_and_stays_accurate(result, scenes, blob):
    fixed = result.report.fixed_frame
    assert np.array_equal(result.refined_poses[fixed].matrix(), result.camera_poses[fixed].matrix())
    # relative camera poses agree with the ground truth
    gt = {c: s.gt_pose.inverse() for c, s in enumerate(scenes)}
    for c in result.refined_poses:
        rel = result.refined_poses[fixed].inverse().compose(result.refined_poses[c])
        rel_gt = gt[fixed].inverse().compose(gt[c])
        deg, trans = _pose_error(rel, rel_gt)
        assert deg < 0.5 and trans < 0.001
    _, _, rms = eval_reconstruction(result.refined, blob)
    assert rms < 1.5 * SIGMA


def test_reconstruction_is_union_of_segments(result):
    assert len(result.refined) == sum(len(s) for s in result.segments.values())
    assert len(result.stitched) == len(result.refined)
    assert set(result.timings) >= {"train", "detect_verify", "graph", "refine"}


def test_single_view_skips_refinement(blob, codebook, scenes):
    res = run_pipeline(blob, [scenes[0].cloud], codebook=codebook)
    assert res.graph is None and res.report is None
    assert np.array_equal(res.refined.points, res.stitched.points)


def test_clutter_only_input_fails(blob, codebook):
    clutter = [synth_clutter_scene(0.3, 5000, seed=s, noise_sigma=SIGMA) for s in (1, 2)]
    with pytest.raises(NoHypotheses):
        run_pipeline(blob, clutter, codebook=codebook)


def test_reconstruct_requires_a_camera():
    with pytest.raises(NoHypotheses):
        reconstruct({}, {})


def test_budget_indices():
    assert budget_indices(5, 10).tolist() == [0, 1, 2, 3, 4]
    idx = budget_indices(1000, 100, seed=3)
    assert len(idx) == 100 and len(set(idx.tolist())) == 100
    assert np.all(np.diff(idx) > 0)
    assert np.array_equal(idx, budget_indices(1000, 100, seed=3))
