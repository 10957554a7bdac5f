"""The seven acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""
import time
from collections import deque

import numpy as np
import pytest

from cadrecon.config import PipelineConfig
from cadrecon.detector import self_match_recovery
from cadrecon.geometry import (
    KdIndex,
    OrientedPointCloud,
    Pose,
    normalize_rows,
    random_pose,
    rotation_from_angle_axis,
    sample_surface,
)
from cadrecon.pipeline import process_view, reconstruct, run_pipeline, train_model
from cadrecon.posegraph import (
    IncrementalGraphBuilder,
    PoseEdge,
    PoseGraph,
    build_pose_graph,
    build_voxel_index,
    compute_hpo,
    default_thresholds,
    select_edges,
)
from cadrecon.ppf import compute_ppf, train
from cadrecon.refiner import (
    RefineParams,
    analytic_jacobian,
    choose_fixed_frame,
    perturb,
    point_to_plane,
    refine,
)
from cadrecon.synth import (
    SynthSpec,
    blob_mesh,
    eval_reconstruction,
    fibonacci_directions,
    synth_clutter_scene,
    synth_dataset,
    synth_view,
)
from cadrecon.verifier import score

DIAM = 0.3
SIGMA = 0.002 * DIAM


def _model_frame_error(gt: Pose, est: Pose):
    """Rotation (degrees) and translation of ``gt^-1 est``, both model -> scene poses."""
    d = gt.inverse().compose(est)
    return np.degrees(np.linalg.norm(d.angle_axis())), np.linalg.norm(d.translation)


def _bfs_component_count(n, edges):
    adj = {k: set() for k in range(n)}
    for i, j, *_ in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen, count = set(), 0
    for s in range(n):
        if s in seen:
            continue
        count += 1
        todo = deque([s])
        while todo:
            x = todo.popleft()
            if x not in seen:
                seen.add(x)
                todo.extend(adj[x] - seen)
    return count


# --------------------------------------------------------------------------
# 1. end-to-end reconstruction


@pytest.fixture(scope="module")
def end_to_end():
    mesh = blob_mesh(DIAM, seed=1)
    spec = SynthSpec(n_views=8, noise_sigma=SIGMA, clutter_ratio=0.4, occlusion_ratio=0.2, seed=7)
    t0 = time.perf_counter()
    scenes = synth_dataset(mesh, spec)
    res = run_pipeline(mesh, [s.cloud for s in scenes], PipelineConfig())
    pre = eval_reconstruction(res.stitched, mesh)[2]
    post = eval_reconstruction(res.refined, mesh)[2]
    elapsed = time.perf_counter() - t0
    # the same segments placed with ground-truth poses: the noise floor of the metric
    gt = {c: scenes[c].gt_pose.inverse() for c in res.segments}
    floor = eval_reconstruction(reconstruct(gt, res.segments), mesh)[2]
    return elapsed, pre, post, floor, res


def test_criterion_1_end_to_end(end_to_end, acceptance):
    elapsed, pre, post, floor, res = end_to_end
    fast = elapsed < 120
    accurate = post <= 1.5 * SIGMA
    improved = post <= 0.5 * pre
    acceptance[1] = (
        fast and accurate and improved,
        f"time {elapsed:.1f}s (<120) {'ok' if fast else 'FAIL'}; "
        f"rms {post / SIGMA:.3f} sigma (<=1.5) {'ok' if accurate else 'FAIL'}; "
        f"refined/pre rms {post / pre:.3f} (<=0.5) {'ok' if improved else 'FAIL'}, "
        f"pre-refinement rms {pre / SIGMA:.3f} sigma vs ground-truth-pose floor {floor / SIGMA:.3f} sigma",
    )
    assert len(res.segments) == 8 and res.graph.connected
    assert fast, f"pipeline took {elapsed:.1f}s"
    assert accurate, f"rms {post / SIGMA:.3f} sigma"
    # Known red: stitching from verified poses is already within a few percent of
    # the noise floor, so no refinement can halve the rms on this dataset.
    assert improved, (
        f"refined/pre rms {post / pre:.3f} > 0.5; pre {pre / SIGMA:.3f} sigma, floor {floor / SIGMA:.3f} sigma"
    )


# --------------------------------------------------------------------------
# 2. false positives and recall


@pytest.mark.slow
def test_criterion_2_false_positives_and_recall(acceptance):
    mesh = blob_mesh(DIAM, seed=1)
    cfg = PipelineConfig()
    cb = train_model(mesh, cfg)
    false_pos = 0
    for i in range(50):
        scene = synth_clutter_scene(DIAM, 20000, seed=100 + i, noise_sigma=SIGMA)
        false_pos += sum(v.accepted for v in process_view(scene, cb, cfg).verified)
    dirs = fibonacci_directions(8)
    recalled, worst = 0, (0.0, 0.0)
    for i in range(50):
        spec = SynthSpec(noise_sigma=SIGMA, clutter_ratio=0.15 * (i % 4 + 1), occlusion_ratio=0.2, seed=200 + i)
        s = synth_view(mesh, dirs[i % 8], spec, i % 8)
        best = process_view(s.cloud, cb, cfg).best
        if best is None:
            continue
        deg, trans = _model_frame_error(s.gt_pose, best.pose)
        if deg < 2.0 and trans < 0.01 * DIAM:
            recalled += 1
            worst = (max(worst[0], deg), max(worst[1], trans))
    ok = false_pos == 0 and recalled >= 45
    acceptance[2] = (
        ok,
        f"false positives {false_pos}/50 clutter scenes (need 0); recall {recalled}/50 (need >=45), "
        f"worst recalled error {worst[0]:.2f} deg, {worst[1] / DIAM:.4f} diam",
    )
    assert false_pos == 0
    assert recalled >= 45


# --------------------------------------------------------------------------
# 3. detection argmax oracle


def test_criterion_3_self_match_argmax(acceptance):
    cb = train(blob_mesh(DIAM, seed=1), tau=0.05)
    k1, k4 = self_match_recovery(cb, 1, 0.3, seed=0), self_match_recovery(cb, 4, 0.3, seed=0)
    # at 0.3 bins K=1 saturates; the soft-quantization gain shows at a wider jitter
    w1, w4 = self_match_recovery(cb, 1, 0.5, seed=0), self_match_recovery(cb, 4, 0.5, seed=0)
    ok = k1 >= 0.90 and k4 >= 0.95 and w4 > w1
    acceptance[3] = (
        ok,
        f"jitter 0.3 bins: K=1 {k1:.4f} (>=0.90), K=4 {k4:.4f} (>=0.95); "
        f"jitter 0.5 bins: K=1 {w1:.4f} < K=4 {w4:.4f}",
    )
    assert k1 >= 0.90 and k4 >= 0.95
    assert w4 > w1


# --------------------------------------------------------------------------
# 4. pose graph


def _linear_timing():
    rng = np.random.default_rng(0)

    def run(n_views):
        views = [(c, rng.uniform(0, 1, (30000, 3)) * [2, 1, 1] + [c, 0, 0]) for c in range(n_views)]
        best = np.inf
        for _ in range(7):
            t = time.perf_counter()
            idx = build_voxel_index(views, 0.05)
            select_edges(compute_hpo(idx), n_views, *default_thresholds(idx))
            best = min(best, time.perf_counter() - t)
        return best

    t8, t16, t32 = run(8), run(16), run(32)
    return t16 / t8, t32 / t16


def test_criterion_4_pose_graph(acceptance):
    mismatches = below = conn_errors = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 10))
        views = [
            (c, rng.uniform(0, 1, (int(rng.integers(20, 200)), 3)) * rng.uniform(0.3, 1) + rng.uniform(0, 0.7, 3))
            for c in range(n)
        ]
        lo, hi = sorted(rng.uniform(0, 30, 2))
        hpo = compute_hpo(build_voxel_index(views, 0.1))
        edges, ok = select_edges(hpo, n, lo, hi)
        inc = IncrementalGraphBuilder(0.1, lo, hi)
        for k in rng.permutation(n):
            inc.insert_view(int(k), views[k][1])
        mismatches += sorted(inc.edges) != sorted(edges) or inc.hpo != hpo or inc.connected != ok
        below += sum(w < lo for *_, w in edges)
        conn_errors += ok != (_bfs_component_count(n, edges) == 1)
    g1, g2 = _linear_timing()
    linear = g1 <= 2.5 and g2 <= 2.5
    ok = mismatches == 0 and below == 0 and conn_errors == 0 and linear
    acceptance[4] = (
        ok,
        f"100 layouts: batch/incremental mismatches {mismatches}, edges below alpha_l {below}, "
        f"connectivity errors {conn_errors}; time growth 8->16 {g1:.2f}x, 16->32 {g2:.2f}x (<=2.5)",
    )
    assert mismatches == 0 and below == 0 and conn_errors == 0
    assert linear


# --------------------------------------------------------------------------
# 5. multiview optimizer numerics


def _partial_views(mesh, seed, n_views, n_samples):
    rng = np.random.default_rng(seed)
    clouds, gt = {}, {}
    for c, d in enumerate(fibonacci_directions(n_views)):
        s = sample_surface(mesh, n_samples, rng)
        s = s.subset(np.flatnonzero(s.normals @ (-d) > 0))
        pts = s.points + rng.normal(0, SIGMA, (len(s), 1)) * s.normals
        T = random_pose(rng, 0.3)
        gt[c] = T
        clouds[c] = OrientedPointCloud(pts, s.normals).transformed(T.inverse())
    return clouds, gt


def _perturbed(gt, seed, fixed, deg, trans):
    rng = np.random.default_rng(seed + 1000)
    out = {}
    for c, T in gt.items():
        if c == fixed:
            out[c] = T
            continue
        axis, direction = normalize_rows(rng.normal(size=(2, 3)))
        out[c] = Pose(rotation_from_angle_axis(axis * np.deg2rad(deg)), direction * trans).compose(T)
    return out


def test_criterion_5_optimizer_numerics(acceptance):
    rng = np.random.default_rng(7)
    h = 1e-6
    worst = 0.0
    for _ in range(200):
        th, tk = random_pose(rng), random_pose(rng)
        p, q = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        n = normalize_rows(rng.normal(size=(1, 3)))
        _, J = analytic_jacobian(p, q, n, th, tk)
        fd = np.zeros(12)
        for k in range(12):
            d = np.zeros(6)
            d[k % 6] = h
            plus = (perturb(th, d), tk) if k < 6 else (th, perturb(tk, d))
            minus = (perturb(th, -d), tk) if k < 6 else (th, perturb(tk, -d))
            fd[k] = (analytic_jacobian(p, q, n, *plus)[0][0] - analytic_jacobian(p, q, n, *minus)[0][0]) / (2 * h)
        worst = max(worst, np.linalg.norm(J[0] - fd) / max(np.linalg.norm(fd), 1e-12))

    mesh = blob_mesh(DIAM, seed=1)
    increases = 0
    for seed in range(20):
        clouds, gt = _partial_views(mesh, 100 + seed, 3, 1500)
        init = _perturbed(gt, seed, choose_fixed_frame(clouds, sorted(clouds)), 3.0, 0.008)
        _, report = refine(build_pose_graph(init, clouds, 0.01).graph, clouds, RefineParams(outer_iters=6))
        increases += sum(b > a for steps in report.step_energies for a, b in zip(steps, steps[1:]))

    clouds, gt = _partial_views(mesh, 0, 5, 3000)
    init = _perturbed(gt, 0, choose_fixed_frame(clouds, sorted(clouds)), 2.0, 0.006)
    graph = build_pose_graph(init, clouds, 0.01).graph
    G = random_pose(np.random.default_rng(1234), 1.0)
    moved = PoseGraph({c: G.compose(p) for c, p in graph.nodes.items()},
                      [PoseEdge(e.i, e.j, e.overlap, e.relative) for e in graph.edges])
    a, _ = refine(graph, clouds, RefineParams())
    b, _ = refine(moved, clouds, RefineParams())
    gauge = max(np.abs(b[c].matrix() - G.compose(a[c]).matrix()).max() for c in a)

    ok = worst <= 1e-5 and increases == 0 and gauge <= 1e-6
    acceptance[5] = (
        ok,
        f"jacobian rel. error {worst:.2e} over 200 states (<=1e-5); energy increases over accepted steps "
        f"on 20 seeds {increases} (need 0); gauge deviation {gauge:.2e} (<=1e-6)",
    )
    assert worst <= 1e-5 and increases == 0 and gauge <= 1e-6


# --------------------------------------------------------------------------
# 6. unit oracles


def test_criterion_6_unit_oracles(acceptance):
    rng = np.random.default_rng(0)
    ppf_err = 0.0
    for _ in range(100):
        p1, p2 = rng.normal(size=(2, 3))
        n1, n2 = normalize_rows(rng.normal(size=(2, 3)))
        T = random_pose(rng)
        f = compute_ppf(p1, n1, p2, n2)
        g = compute_ppf(T.apply(p1), T.rotate(n1), T.apply(p2), T.rotate(n2))
        ppf_err = max(ppf_err, np.abs(np.subtract(f, g)).max())

    pts = rng.uniform(size=(10000, 3))
    q = rng.uniform(size=(1000, 3))
    _, idx = KdIndex(pts).nearest(q)
    brute = np.array([np.argmin(np.linalg.norm(pts - x, axis=1)) for x in q])
    kd_ok = np.array_equal(idx, brute)

    cell = lambda i: np.array([[i + 0.5, 0.5, 0.5]])  # noqa: E731
    hpo_ok = (
        compute_hpo(build_voxel_index([(0, np.vstack([cell(0), cell(2)])), (1, np.vstack([cell(0), cell(1), cell(2)])),
                                       (2, cell(1))], 1.0)) == {(0, 1): 2, (1, 2): 1}
        and compute_hpo(build_voxel_index([(c, cell(c)) for c in range(4)], 1.0)) == {}
        and compute_hpo(build_voxel_index([(c, cell(0)) for c in range(3)], 1.0)) == {(0, 1): 1, (0, 2): 1, (1, 2): 1}
    )

    model = OrientedPointCloud(rng.uniform(size=(400, 3)), np.tile([0.0, 0.0, 1.0], (400, 1)))
    T = random_pose(rng, 0.2)
    scene = T.apply(model.points)
    xi = (
        score(T, model, KdIndex(scene), 0.003),
        score(T, model, KdIndex(scene + 10.0), 0.003),
        score(T, model, KdIndex(scene[:200]), 1e-9),
    )
    xi_ok = xi == (1.0, 0.0, 0.5)

    n = np.array([[0.0, 0.0, 1.0]])
    q0 = np.zeros((1, 3))
    Rz = rotation_from_angle_axis([0, 0, 0.7])
    cases = [
        (point_to_plane(np.array([[0.3, -0.2, 0.0]]), q0, n, np.eye(3), np.zeros(3)), 0.0),
        (point_to_plane(np.array([[0.3, -0.2, 0.25]]), q0, n, np.eye(3), np.zeros(3)), 0.25),
        (point_to_plane(np.array([[0.0, 0.0, 0.0]]), q0, n, np.eye(3), [0.0, 0.0, -0.5]), -0.5),
        (point_to_plane(np.array([[1.0, 2.0, 0.0]]), q0, n, Rz, [0.4, 0.1, 0.0]), 0.0),
    ]
    p2p_ok = all(float(r[0]) == v for r, v in cases)

    ok = ppf_err <= 1e-9 and kd_ok and hpo_ok and xi_ok and p2p_ok
    acceptance[6] = (
        ok,
        f"PPF invariance max error {ppf_err:.1e} (<=1e-9); KdIndex exact on 1000 queries {kd_ok}; "
        f"HPO layouts {hpo_ok}; score oracles {xi}; point-to-plane closed forms {p2p_ok}",
    )
    assert ok


# --------------------------------------------------------------------------
# 7. determinism


def _run_once(mesh):
    spec = SynthSpec(n_views=4, noise_sigma=SIGMA, clutter_ratio=0.4, occlusion_ratio=0.2, seed=7)
    scenes = synth_dataset(mesh, spec)
    cfg = PipelineConfig()
    cb = train_model(mesh, cfg)
    res = run_pipeline(mesh, [s.cloud for s in scenes], cfg, codebook=cb)
    return {
        "synth": [np.concatenate([s.cloud.points, s.cloud.normals]).tobytes() for s in scenes],
        "train": cb.to_bytes(),
        "detect": [[c.mean_pose.matrix().tobytes() + np.float64(c.total_mass).tobytes() for c in v.clusters]
                   for v in res.views],
        "verify": [[v.pose.matrix().tobytes() + np.float64(v.score).tobytes() for v in view.verified]
                   for view in res.views],
        "graph": res.graph.graph.to_dict(),
        "refine": {c: p.matrix().tobytes() for c, p in res.refined_poses.items()},
        "reconstruct": res.refined.points.tobytes() + res.refined.normals.tobytes(),
    }


def test_criterion_7_determinism(acceptance):
    mesh = blob_mesh(DIAM, seed=1)
    a, b = _run_once(mesh), _run_once(mesh)
    differing = [stage for stage in a if a[stage] != b[stage]]
    acceptance[7] = (
        not differing,
        f"stages compared: {', '.join(a)}; differing: {', '.join(differing) or 'none'}",
    )
    assert not differing
