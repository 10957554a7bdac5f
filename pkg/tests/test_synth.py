import numpy as np
import pytest

from cadrecon.geometry import diameter, sample_surface
from cadrecon.posegraph import build_pose_graph
from cadrecon.synth import (
    SynthSpec,
    TriangleIndex,
    box_mesh,
    closest_points_on_triangles,
    eval_reconstruction,
    fibonacci_directions,
    icosphere,
    synth_clutter_scene,
    synth_dataset,
    synth_view,
)


def _model_points(scene):
    return scene.gt_pose.inverse().apply(scene.cloud.points[scene.object_mask])


def test_noise_free_points_lie_on_the_surface(blob):
    s = synth_view(blob, [0, 0, 1], SynthSpec(seed=3, clutter_ratio=0.3))
    d = TriangleIndex(blob).distance(_model_points(s))
    assert d.max() < 1e-9


def test_occlusion_removes_the_requested_fraction(blob):
    full = synth_view(blob, [1, 0, 0], SynthSpec(seed=4))
    half = synth_view(blob, [1, 0, 0], SynthSpec(seed=4, occlusion_ratio=0.5))
    ratio = half.visibility_mask.sum() / full.visibility_mask.sum()
    assert ratio == pytest.approx(0.5, abs=0.05)
    # occlusion only hides points that were visible
    assert not np.any(half.visibility_mask & ~full.visibility_mask)


def test_clutter_fraction(blob):
    s = synth_view(blob, [0, 1, 0], SynthSpec(seed=5, clutter_ratio=0.4))
    assert 1 - s.object_mask.mean() == pytest.approx(0.4, abs=0.01)


def test_visible_points_face_the_camera(blob):
    s = synth_view(blob, [0, 0, 1], SynthSpec(seed=6))
    # in the camera frame the camera looks along +z, so visible normals point towards -z
    n = s.cloud.normals[s.object_mask]
    assert np.all(n[:, 2] < 0)


def test_same_spec_is_bit_identical(blob):
    spec = SynthSpec(seed=9, noise_sigma=1e-3, clutter_ratio=0.3, occlusion_ratio=0.2)
    a = synth_view(blob, [0.3, 0.4, 0.5], spec, 2)
    b = synth_view(blob, [0.3, 0.4, 0.5], spec, 2)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert np.array_equal(a.cloud.normals, b.cloud.normals)
    assert np.array_equal(a.gt_pose.matrix(), b.gt_pose.matrix())


def test_dynamic_scenes_move_the_object(blob):
    static = synth_dataset(blob, SynthSpec(n_views=4, seed=2), check_overlap=False)
    moving = synth_dataset(blob, SynthSpec(n_views=4, seed=2, dynamic=True), check_overlap=False)
    diffs = [
        np.abs(a.gt_pose.matrix() - b.gt_pose.matrix()).max() for a, b in zip(static, moving)
    ]
    assert min(diffs) > 1e-3
    # every dynamic view places the object differently from the others
    mats = [s.gt_pose.matrix() for s in moving]
    assert all(np.abs(mats[i] - mats[j]).max() > 1e-3 for i in range(4) for j in range(i + 1, 4))


def test_dataset_of_eight_views_builds_a_connected_graph(blob):
    scenes = synth_dataset(blob, SynthSpec(n_views=8, seed=1))
    cams = {i: s.gt_pose.inverse() for i, s in enumerate(scenes)}
    segs = {i: s.cloud.subset(np.flatnonzero(s.object_mask)) for i, s in enumerate(scenes)}
    build = build_pose_graph(cams, segs, 0.02 * diameter(blob), low_fraction=0.05, high_fraction=0.3)
    assert build.connected
    assert build.graph.node_ids == list(range(8))


def test_fibonacci_directions_are_unit_and_spread():
    d = fibonacci_directions(50)
    assert np.allclose(np.linalg.norm(d, axis=1), 1)
    assert np.linalg.norm(d.mean(axis=0)) < 0.05


def test_clutter_scene_is_deterministic():
    a = synth_clutter_scene(0.3, 2000, seed=8)
    b = synth_clutter_scene(0.3, 2000, seed=8)
    assert len(a) == 2000
    assert np.array_equal(a.points, b.points)


def test_invalid_spec():
    with pytest.raises(ValueError):
        SynthSpec(clutter_ratio=1.0)
    with pytest.raises(ValueError):
        SynthSpec(noise_sigma=-1)
    with pytest.raises(ValueError):
        synth_dataset(box_mesh(), SynthSpec(n_views=1))


# --------------------------------------------------------------------------
# evaluation


def test_eval_of_vertices_is_zero():
    mesh = icosphere(2)
    mean, std, rms = eval_reconstruction(mesh.vertices, mesh)
    assert mean == pytest.approx(0, abs=1e-12) and rms == pytest.approx(0, abs=1e-12)


def test_eval_of_offset_corners_is_exact():
    mesh = box_mesh()
    # a corner pushed along its diagonal stays closest to the corner itself
    v = mesh.vertices
    offset = v + 1e-3 * v / np.linalg.norm(v, axis=1, keepdims=True)
    mean, std, rms = eval_reconstruction(offset, mesh)
    assert mean == pytest.approx(1e-3, abs=1e-6)
    assert std == pytest.approx(0, abs=1e-9)


def test_eval_of_normal_noise_is_half_normal():
    mesh = box_mesh()
    rng = np.random.default_rng(0)
    s = sample_surface(mesh, 40000, rng)
    sigma = 1e-3
    noisy = s.points + rng.normal(0, sigma, len(s))[:, None] * s.normals
    mean, std, rms = eval_reconstruction(noisy, mesh)
    assert mean == pytest.approx(sigma * np.sqrt(2 / np.pi), rel=0.05)
    assert rms == pytest.approx(sigma, rel=0.05)


def test_eval_of_ground_truth_union_tracks_the_noise(blob):
    sigma = 5e-4
    scenes = synth_dataset(blob, SynthSpec(n_views=4, seed=2, noise_sigma=sigma), check_overlap=False)
    union = np.concatenate([_model_points(s) for s in scenes])
    mean, _, rms = eval_reconstruction(union, blob)
    # points near creases can be closer to another face, so the rms is at most sigma
    assert rms == pytest.approx(sigma, rel=0.1)
    assert mean == pytest.approx(sigma * np.sqrt(2 / np.pi), rel=0.1)


def test_eval_rejects_empty():
    with pytest.raises(ValueError):
        eval_reconstruction(np.empty((0, 3)), box_mesh())


def test_closest_point_on_triangle_regions():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    p = np.array([
        [0.2, 0.2, 1.0],  # interior
        [-1.0, -1.0, 0.0],  # vertex a
        [2.0, -0.5, 0.0],  # vertex b
        [0.5, -1.0, 0.0],  # edge ab
        [1.0, 1.0, 0.0],  # edge bc
    ])
    n = len(p)
    cp = closest_points_on_triangles(p, np.tile(a, (n, 1)), np.tile(b, (n, 1)), np.tile(c, (n, 1)))
    expected = [[0.2, 0.2, 0], [0, 0, 0], [1, 0, 0], [0.5, 0, 0], [0.5, 0.5, 0]]
    assert np.allclose(cp, expected)


def test_triangle_index_matches_brute_force(rng):
    mesh = icosphere(1)
    q = rng.normal(size=(200, 3)) * 1.5
    tri = mesh.triangles()
    n = len(tri)
    brute = np.array([
        np.linalg.norm(x - closest_points_on_triangles(np.tile(x, (n, 1)), tri[:, 0], tri[:, 1], tri[:, 2]), axis=1).min()
        for x in q
    ])
    assert np.allclose(TriangleIndex(mesh).distance(q), brute, atol=1e-12)

