"""End-to-end runs of the command-line tool on a small synthetic dataset."""
import json

import numpy as np
import pytest

from cadrecon import io
from cadrecon.cli import main
from cadrecon.synth import blob_mesh, synth_clutter_scene

SPEC = {"n_views": 4, "noise_sigma": 0.0006, "clutter_ratio": 0.4, "occlusion_ratio": 0.2, "seed": 7}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth -> train -> detect -> verify -> graph -> refine -> reconstruct -> eval."""
    d = tmp_path_factory.mktemp("cli")
    io.write_mesh_ply(d / "model.ply", blob_mesh(0.3, seed=1))
    (d / "spec.json").write_text(json.dumps(SPEC))
    codes = {}
    codes["synth"] = run("synth", "--mesh", d / "model.ply", "--spec", d / "spec.json", "--out", d / "scenes")
    codes["train"] = run("train", "--model", d / "model.ply", "--out", d / "model.ppfc")
    codes["detect"] = codes["verify"] = 0
    for scene in sorted((d / "scenes").glob("*.ply")):
        codes["detect"] |= run("detect", "--codebook", d / "model.ppfc", "--scene", scene,
                               "--out", d / "hyps" / f"{scene.stem}.json")
        codes["verify"] |= run("verify", "--codebook", d / "model.ppfc", "--scene", scene,
                               "--hyps", d / "hyps" / f"{scene.stem}.json", "--out", d / "ver" / f"{scene.stem}.json")
    codes["graph"] = run("graph", "--codebook", d / "model.ppfc", "--scenes", d / "scenes", "--verified", d / "ver",
                         "--out", d / "graph.json")
    codes["refine"] = run("refine", "--graph", d / "graph.json", "--scenes", d / "scenes", "--out", d / "poses.json",
                          "--report", d / "report.json")
    codes["reconstruct"] = run("reconstruct", "--poses", d / "poses.json", "--scenes", d / "scenes",
                               "--out", d / "recon.ply")
    codes["eval"] = run("eval", "--recon", d / "recon.ply", "--mesh", d / "model.ply", "--out", d / "eval.json")
    return d, codes


def test_every_stage_succeeds(chain):
    _, codes = chain
    assert codes == dict.fromkeys(codes, 0)


def test_synth_writes_scenes_and_ground_truth(chain):
    d, _ = chain
    gt = io.load_json(d / "scenes" / "ground_truth.json")
    assert len(gt["views"]) == 4
    assert sorted(p.name for p in (d / "scenes").glob("*.ply")) == [v["scene"] for v in gt["views"]]


def test_verified_poses_match_ground_truth(chain):
    d, _ = chain
    gt = io.load_json(d / "scenes" / "ground_truth.json")
    for v in gt["views"]:
        poses = io.load_json(d / "ver" / v["scene"].replace(".ply", ".json"))["poses"]
        assert poses, v["scene"]
        est, truth = io.pose_from_list(poses[0]["pose"]), io.pose_from_list(v["gt_pose"])
        err = truth.inverse().compose(est)
        assert np.degrees(np.linalg.norm(err.angle_axis())) < 1.0
        assert np.linalg.norm(err.translation) < 0.005 * 0.3


def test_graph_and_refined_poses(chain):
    d, _ = chain
    graph = io.load_json(d / "graph.json")
    assert graph["connected"]
    assert [n["id"] for n in graph["nodes"]] == [0, 1, 2, 3]
    poses = io.load_json(d / "poses.json")
    assert len(poses["cameras"]) == 4
    report = io.load_json(d / "report.json")
    # within an outer iteration the correspondences are fixed and the energy never rises
    for steps in report["step_energies"]:
        assert all(b <= a for a, b in zip(steps, steps[1:]))
    assert report["converged"]


def test_reconstruction_is_close_to_the_model(chain):
    d, _ = chain
    ev = io.load_json(d / "eval.json")
    assert ev["points"] == len(io.load_cloud(d / "recon.ply"))
    assert ev["rms"] < 1.5 * SPEC["noise_sigma"]


def test_eval_prints_a_table(chain, capsys):
    d, _ = chain
    assert run("eval", "--recon", d / "recon.ply", "--mesh", d / "model.ply") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["points", "mean", "std", "rms"]
    assert len(out) == 2


def test_train_is_byte_identical(chain, tmp_path):
    d, _ = chain
    assert run("train", "--model", d / "model.ply", "--out", tmp_path / "again.ppfc") == 0
    assert (tmp_path / "again.ppfc").read_bytes() == (d / "model.ppfc").read_bytes()


def test_clutter_scene_yields_no_pose_and_graph_fails(chain, tmp_path):
    d, _ = chain
    scenes = tmp_path / "scenes"
    io.write_ply(scenes / "clutter.ply", synth_clutter_scene(0.3, 6000, seed=5, noise_sigma=0.0006))
    assert run("detect", "--codebook", d / "model.ppfc", "--scene", scenes / "clutter.ply",
               "--out", tmp_path / "hyps.json") == 0
    assert run("verify", "--codebook", d / "model.ppfc", "--scene", scenes / "clutter.ply",
               "--hyps", tmp_path / "hyps.json", "--out", tmp_path / "ver" / "clutter.json") == 0
    assert io.load_json(tmp_path / "ver" / "clutter.json")["poses"] == []
    assert run("graph", "--codebook", d / "model.ppfc", "--scenes", scenes, "--verified", tmp_path / "ver",
               "--out", tmp_path / "graph.json") == 3
    assert not (tmp_path / "graph.json").exists()


def test_reconstruct_without_cameras_fails(tmp_path):
    io.save_json(tmp_path / "poses.json", {"cameras": []})
    assert run("reconstruct", "--poses", tmp_path / "poses.json", "--scenes", tmp_path, "--out", tmp_path / "r.ply") == 3


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--model", "m.ply"], ["train", "--bogus"]])
def test_usage_errors(argv, capsys):
    assert run(*argv) == 1
    assert "usage" in capsys.readouterr().err


def test_data_errors(chain, tmp_path, capsys):
    d, _ = chain
    assert run("train", "--model", tmp_path / "missing.ply", "--out", tmp_path / "m.ppfc") == 2
    (tmp_path / "bad.ply").write_text("ply\nformat ascii 1.0\nelement vertex 3\n")
    assert run("train", "--model", tmp_path / "bad.ply", "--out", tmp_path / "m.ppfc") == 2
    (tmp_path / "cfg.json").write_text('{"tua": 0.05}')
    assert run("--config", tmp_path / "cfg.json", "train", "--model", d / "model.ply", "--out", tmp_path / "m.ppfc") == 2
    assert "unknown configuration key" in capsys.readouterr().err
    (tmp_path / "junk.ppfc").write_bytes(b"not a codebook")
    assert run("detect", "--codebook", tmp_path / "junk.ppfc", "--scene", d / "scenes" / "scene_000.ply",
               "--out", tmp_path / "h.json") == 2
    (tmp_path / "spec.json").write_text('{"n_viewz": 3}')
    assert run("synth", "--mesh", d / "model.ply", "--spec", tmp_path / "spec.json", "--out", tmp_path / "s") == 2
    assert not (tmp_path / "m.ppfc").exists()


def test_refine_rejects_mismatched_segments(chain, tmp_path):
    d, _ = chain
    graph = io.load_json(d / "graph.json")
    graph["nodes"][0]["segment"] = [10**9]
    io.save_json(tmp_path / "graph.json", graph)
    assert run("refine", "--graph", tmp_path / "graph.json", "--scenes", d / "scenes", "--out", tmp_path / "p.json") == 2


def test_unit_scale_config(chain, tmp_path):
    d, _ = chain
    (tmp_path / "cfg.json").write_text('{"unit_scale": 1000.0}')
    assert run("--config", tmp_path / "cfg.json", "eval", "--recon", d / "recon.ply", "--mesh", d / "model.ply",
               "--out", tmp_path / "e.json") == 0
    # scaling the reconstruction by 1000 moves it far from the unscaled mesh
    assert io.load_json(tmp_path / "e.json")["mean"] > 0.1
