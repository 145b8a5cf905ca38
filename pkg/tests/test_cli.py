import csv
import json

import numpy as np
import pytest

from tspifu import cli
from tspifu.capture import NoiseModel, Rig, SceneSdf, Sphere, sphere_capsule_scene
from tspifu.config import load_config
from tspifu.geometry import Mesh, is_watertight, load_mesh, save_mesh
from tspifu.implicit import BodyAssembly, BodyConfig, BodyModel
from tspifu.pipeline import TrainConfig, prepare_training, scene_mesh, simulate_capture, train
from tspifu.tensor import checkpoint as ckpt

FAST = {
    "rig": {"image_size": 32},
    "sample": {"pool_points": 2000},
    "train": {"steps_phase1": 6, "steps_phase2": 4, "batch_points": 256, "checkpoint_every": 5, "reg_points": 8},
    "grid": {"resolution": 24},
    "eval": {"n_samples": 2000, "gt_resolution": 64, "iou_samples": 20000},
}


def write_config(path, **sections):
    data = json.loads(json.dumps(FAST))
    for k, v in sections.items():
        data.setdefault(k, {}).update(v)
    path.write_text(json.dumps(data))
    return path


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fast(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return write_config(root / "fast.json"), root / "runs"


@pytest.fixture(scope="module")
def chain(fast):
    cfg, out = fast
    assert run_cli("all", "--config", cfg, "--out", out) == 0
    return load_config(cfg, [f"out_dir={json.dumps(str(out))}"]).run_dir()


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# render and config handling
# ---------------------------------------------------------------------------
def test_render_writes_one_file_set_per_view(fast, tmp_path):
    cfg, _ = fast
    assert run_cli("render", "--config", cfg, "--run-dir", tmp_path / "a") == 0
    render = tmp_path / "a" / "render"
    assert len(list(render.glob("depth_*.png"))) == 3
    assert len(list(render.glob("camera_*.json"))) == 3
    manifest = json.loads((render / "manifest.json").read_text())
    assert len(manifest["views"]) == 3


def test_render_rerun_is_byte_identical(fast, tmp_path):
    cfg, _ = fast
    for name in ("a", "b"):
        assert run_cli("render", "--config", cfg, "--run-dir", tmp_path / name, "--seed", 3) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


@pytest.mark.parametrize("flag, metres", [("1.0cm", 0.01), ("5mm", 0.005), ("2.5cm", 0.025)])
def test_noise_flag_sets_manifest_level(fast, tmp_path, flag, metres):
    cfg, _ = fast
    assert run_cli("render", "--config", cfg, "--run-dir", tmp_path, "--noise", flag) == 0
    manifest = json.loads((tmp_path / "render" / "manifest.json").read_text())
    assert manifest["noise_level_m"] == pytest.approx(metres, rel=1e-12)


def test_seed_changes_the_noise(fast, tmp_path):
    cfg, _ = fast
    run_cli("render", "--config", cfg, "--run-dir", tmp_path / "a", "--seed", 1)
    run_cli("render", "--config", cfg, "--run-dir", tmp_path / "b", "--seed", 2)
    a, b = (tmp_path / d / "render" / "depth_0.png" for d in "ab")
    assert a.read_bytes() != b.read_bytes()


def test_unknown_override_key_exits_2(fast, tmp_path, capsys):
    cfg, _ = fast
    assert run_cli("render", "--config", cfg, "--run-dir", tmp_path, "--set", "train.bogus=1") == 2
    assert "train.bogus" in capsys.readouterr().err


def test_unknown_file_key_exits_2(tmp_path, capsys):
    path = write_config(tmp_path / "bad.json", grid={"voxels": 3})
    assert run_cli("render", "--config", path, "--run-dir", tmp_path / "r") == 2
    assert "grid.voxels" in capsys.readouterr().err


def test_unreadable_scene_exits_2(fast, tmp_path, capsys):
    cfg, _ = fast
    missing = tmp_path / "nope.json"
    assert run_cli("render", "--config", cfg, "--run-dir", tmp_path, "--set", f"scene.path={missing}") == 2
    assert "cannot read scene" in capsys.readouterr().err


def test_bad_noise_level_exits_2(fast, tmp_path):
    cfg, _ = fast
    assert run_cli("render", "--config", cfg, "--run-dir", tmp_path, "--noise", "loud") == 2


def test_flag_beats_file_beats_default(fast):
    cfg, _ = fast
    parser = cli.build_parser()
    assert cli.resolve_config(parser.parse_args(["render", "--config", str(cfg)])).grid.resolution == 24
    assert cli.resolve_config(parser.parse_args(["render", "--config", str(cfg), "--res", "20"])).grid.resolution == 20
    assert cli.resolve_config(parser.parse_args(["render"])).grid.resolution == 64
    assert cli.resolve_config(parser.parse_args(["render", "--res", "256"])).grid.resolution == 256


def test_json_scene_file_is_used(fast, tmp_path):
    cfg, _ = fast
    scene = tmp_path / "ball.json"
    scene.write_text(json.dumps({"primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 0.3}]}))
    assert run_cli("render", "--config", cfg, "--run-dir", tmp_path / "r", "--set", f"scene.path={scene}") == 0
    manifest = json.loads((tmp_path / "r" / "render" / "manifest.json").read_text())
    assert manifest["scene"] == str(scene)


# ---------------------------------------------------------------------------
# stage ordering errors
# ---------------------------------------------------------------------------
def test_train_before_render_exits_2(fast, tmp_path, capsys):
    cfg, _ = fast
    assert run_cli("train-toy", "--config", cfg, "--run-dir", tmp_path) == 2
    assert "render" in capsys.readouterr().err


def test_resume_without_checkpoint_exits_2(fast, tmp_path):
    cfg, _ = fast
    run_cli("render", "--config", cfg, "--run-dir", tmp_path)
    assert run_cli("train-toy", "--config", cfg, "--run-dir", tmp_path, "--resume") == 2


def test_reconstruct_without_checkpoint_exits_2(fast, tmp_path):
    cfg, _ = fast
    run_cli("render", "--config", cfg, "--run-dir", tmp_path)
    assert run_cli("reconstruct", "--config", cfg, "--run-dir", tmp_path) == 2


# ---------------------------------------------------------------------------
# the chained pipeline
# ---------------------------------------------------------------------------
def test_chain_outputs(chain):
    train_dir = chain / "train"
    for name in ("checkpoint.pfw", "history.csv", "loss_curves.png", "seeds.json"):
        assert (train_dir / name).exists(), name
    recon = chain / "recon_24"
    for name in ("grid.raw", "mesh.obj", "mesh.ply", "manifest.json", "metrics.json", "metrics.csv",
                 "depth_l1.csv", "depth_comparison_0.png", "refined_0.raw"):
        assert (recon / name).exists(), name
    manifest = json.loads((recon / "manifest.json").read_text())
    assert manifest["method"] == "tspifu" and manifest["faces"] > 0
    seeds = json.loads((train_dir / "seeds.json").read_text())
    assert set(seeds) == {"model_init", "noise", "sampling", "batches"}


def test_history_has_both_phases(chain):
    rows = cli.read_history(chain / "train" / "history.csv")
    assert [r["step"] for r in rows] == list(range(10))
    assert [r["phase"] for r in rows] == [1] * 6 + [2] * 4
    assert all(r["l_reg"] == 0 for r in rows[:6])
    assert all(r["l_depth"] == 0 for r in rows[6:])


def test_resume_reproduces_uninterrupted_run(fast, chain, tmp_path):
    cfg, _ = fast
    split = tmp_path / "split"
    assert run_cli("render", "--config", cfg, "--run-dir", split) == 0
    assert run_cli("sample", "--config", cfg, "--run-dir", split) == 0
    assert run_cli("train-toy", "--config", cfg, "--run-dir", split, "--stop-at", 7) == 0
    assert ckpt.load(split / "train" / "checkpoint.pfw")["train.step"][0] == 7
    assert run_cli("train-toy", "--config", cfg, "--run-dir", split, "--resume") == 0
    for name in ("checkpoint.pfw", "history.csv"):
        assert (split / "train" / name).read_bytes() == (chain / "train" / name).read_bytes(), name


def test_checkpoint_model_mismatch_exits_3(fast, chain, tmp_path, capsys):
    cfg, _ = fast
    run_cli("render", "--config", cfg, "--run-dir", tmp_path)
    code = run_cli("reconstruct", "--config", cfg, "--run-dir", tmp_path, "--set", "model.preset=full",
                   "--checkpoint", chain / "train" / "checkpoint.pfw")
    assert code == 3
    assert "tensor" in capsys.readouterr().err


def test_unknown_preset_exits_2(fast, chain, tmp_path):
    cfg, _ = fast
    run_cli("render", "--config", cfg, "--run-dir", tmp_path)
    assert run_cli("reconstruct", "--config", cfg, "--run-dir", tmp_path, "--set", "model.preset=huge",
                   "--checkpoint", chain / "train" / "checkpoint.pfw") == 2


def test_baseline_tsdf_routing(fast, chain):
    cfg, out = fast
    assert run_cli("reconstruct", "--config", cfg, "--out", out, "--baseline", "tsdf") == 0
    manifest = json.loads((chain / "tsdf_24" / "manifest.json").read_text())
    assert manifest["method"] == "tsdf" and manifest["faces"] > 0
    assert not (chain / "tsdf_24" / "refined_0.raw").exists()


def test_tsdf_baseline_command_matches_routing(fast, chain):
    cfg, out = fast
    before = (chain / "tsdf_24" / "mesh.obj").read_bytes() if (chain / "tsdf_24").exists() else None
    assert run_cli("tsdf-baseline", "--config", cfg, "--out", out) == 0
    if before is not None:
        assert (chain / "tsdf_24" / "mesh.obj").read_bytes() == before


def test_mesh_command_reproduces_reconstruction(fast, chain, tmp_path):
    cfg, out = fast
    target = tmp_path / "again.obj"
    assert run_cli("mesh", "--config", cfg, "--out", out, chain / "recon_24" / "grid.raw", target) == 0
    assert target.read_bytes() == (chain / "recon_24" / "mesh.obj").read_bytes()


def test_mesh_command_rejects_garbage(fast, tmp_path):
    cfg, out = fast
    bad = tmp_path / "grid.raw"
    bad.write_bytes(b"not a grid")
    assert run_cli("mesh", "--config", cfg, "--out", out, bad, tmp_path / "m.obj") == 2


def test_fuse_face_output(fast, chain):
    cfg, out = fast
    assert run_cli("fuse-face", "--config", cfg, "--out", out) == 0
    manifest = json.loads((chain / "fused_24" / "manifest.json").read_text())
    assert manifest["method"] == "tspifu+face" and manifest["faces"] > 0
    x0, y0, x1, y1 = manifest["face_box"]
    assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32


def test_report_renders_figures(fast, chain):
    cfg, out = fast
    for png in chain.rglob("*.png"):
        if png.parent.name != "render":
            png.unlink()
    assert run_cli("report", "--config", cfg, "--out", out) == 0
    assert (chain / "train" / "loss_curves.png").stat().st_size > 0
    assert (chain / "recon_24" / "depth_comparison_2.png").stat().st_size > 0


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def test_eval_identity_gives_zero_metrics(fast, tmp_path):
    cfg, out = fast
    gt = tmp_path / "gt.obj"
    save_mesh(gt, scene_mesh(sphere_capsule_scene(), 48))
    assert run_cli("eval", "--config", cfg, "--out", out, gt, "--gt", gt) == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    # barycentric samples sit on their triangle only up to rounding (~1e-15 cm)
    for key in ("p2s_cm", "chamfer_cm", "normal_l2", "normal_cosine"):
        assert report[key] < 1e-9, key
    assert report["iou"] == 1.0


def test_eval_is_bit_stable(fast, chain, tmp_path):
    cfg, out = fast
    mesh = chain / "recon_24" / "mesh.obj"
    for name in ("a", "b"):
        assert run_cli("eval", "--config", cfg, "--out", out, mesh, "--metrics-dir", tmp_path / name) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_eval_reports_refined_depth(chain):
    report = json.loads((chain / "recon_24" / "metrics.json").read_text())
    assert report["depth_l1"] is not None and report["depth_l1"] > 0


def test_eval_empty_mesh_exits_4(fast, tmp_path, capsys):
    cfg, out = fast
    empty = tmp_path / "empty.obj"
    save_mesh(empty, Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)))
    assert run_cli("eval", "--config", cfg, "--out", out, empty) == 4
    assert "empty" in capsys.readouterr().err


def test_eval_missing_mesh_exits_2(fast, tmp_path):
    cfg, out = fast
    assert run_cli("eval", "--config", cfg, "--out", out, tmp_path / "missing.obj") == 2


def test_divergence_exits_4_and_keeps_finite_checkpoint(fast, tmp_path, capsys):
    cfg, _ = fast
    run_cli("render", "--config", cfg, "--run-dir", tmp_path)
    code = run_cli("train-toy", "--config", cfg, "--run-dir", tmp_path, "--set", "train.lr=1e30",
                   "--set", "train.checkpoint_every=1")
    assert code == 4
    assert "last checkpoint" in capsys.readouterr().err
    state = ckpt.load(tmp_path / "train" / "checkpoint.pfw")
    assert all(np.isfinite(v).all() for v in state.values())


def test_sweep_tsdf_emits_five_rows(fast, tmp_path):
    cfg, _ = fast
    out = tmp_path / "runs"
    assert run_cli("sweep", "--config", cfg, "--out", out, "--method", "tsdf") == 0
    (table,) = out.glob("sweep_tsdf_*/sweep.csv")
    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["noise_cm"]) for r in rows] == pytest.approx([0.5, 1.0, 1.5, 2.0, 2.5])
    assert all(float(r["chamfer_cm"]) > 0 for r in rows)
    assert (table.parent / "noise_sweep.png").stat().st_size > 0
    assert len({r["run"] for r in rows}) == 5
    (table.parent / "noise_sweep.png").unlink()
    assert run_cli("report", "--config", cfg, "--out", out) == 0
    assert (table.parent / "noise_sweep.png").exists()


# ---------------------------------------------------------------------------
# training behaviour through the pipeline API
# ---------------------------------------------------------------------------
def _sphere_capture(noise=0.0):
    scene = SceneSdf(Sphere((0.0, 0.0, 0.0), 0.3))
    return simulate_capture(scene, Rig(image_size=32), NoiseModel(noise, dropout_rate=0.0))


def test_phase_two_freezes_the_feature_net():
    cap = _sphere_capture()
    cfg = TrainConfig(steps_phase1=0, steps_phase2=3, pool_points=400, batch_points=128, reg_points=8)
    mcfg = BodyConfig.toy()
    model = BodyModel(mcfg, seed=0)
    data = prepare_training(cap, mcfg, cfg)
    assert data.samples.s_j.any()
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    history = train(model, data, cfg)
    assert all(r["phase"] == 2 and r["l_reg"] >= 0 for r in history)
    after = model.named_parameters()
    frozen = set(model.backbone())
    assert frozen
    for name in frozen:
        assert np.array_equal(after[name].data, before[name]), name
    moved = [k for k in after if k not in frozen and not np.array_equal(after[k].data, before[k])]
    assert moved


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps_phase1=-1)
    with pytest.raises(ValueError):
        TrainConfig(reduction="median")
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_stages=0)


def test_phase_one_lr_halves_per_stage():
    cfg = TrainConfig(steps_phase1=8, lr=1.0, lr_decay_stages=4)
    assert [cfg.phase1_lr(t) for t in range(8)] == [1, 1, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125]
    assert TrainConfig(steps_phase1=8, lr=1.0, lr_decay_stages=1).phase1_lr(7) == 1.0


@pytest.mark.slow
def test_sphere_overfit_reduces_occupancy_loss_tenfold():
    cap = _sphere_capture(noise=0.01)
    # halving schedule: at a constant lr the Adam trace oscillates and the last step can land on a spike
    cfg = TrainConfig(steps_phase1=200, steps_phase2=0, pool_points=512, batch_points=512, lr_decay_stages=4)
    mcfg = BodyConfig.toy()
    model = BodyModel(mcfg, seed=0)
    history = train(model, prepare_training(cap, mcfg, cfg), cfg)
    assert history[-1]["l_sigma"] < 0.1 * history[0]["l_sigma"]
    sigma = BodyAssembly(model, cap.views).query(np.array([[0.0, 0.0, 0.0], [0.6, 0.0, 0.0], [0.0, 0.0, -0.6]]))
    assert sigma[0] > 0.9 and (sigma[1:] < 0.1).all()


def test_reference_mesh_is_watertight(tmp_path):
    mesh = scene_mesh(sphere_capsule_scene(), 48)
    assert not mesh.empty and is_watertight(mesh)
    save_mesh(tmp_path / "m.ply", mesh)
    assert is_watertight(load_mesh(tmp_path / "m.ply"))
