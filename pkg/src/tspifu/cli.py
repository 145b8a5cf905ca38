"""Command-line entry point: ``tspifu <command> [--config run.json] [--set key=value ...]``.

Exit codes: 0 success, 2 input error, 3 config/model mismatch, 4 evaluation or
numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import plotting
from .capture import NoiseModel, Rig, SceneSdf, parse_noise_level, sphere_capsule_scene
from .config import UPSTREAM, ConfigError, RunConfig, load_config
from .fusion import OccupancyGrid, marching_cubes
from .geometry import (Mesh, View, ViewTriplet, is_watertight, load_camera, load_depth_png,
                       load_depth_raw, load_mesh, save_camera, save_depth_png, save_depth_raw, save_mesh)
from .implicit import BodyAssembly, BodyConfig, BodyModel
from .metrics import MetricReport, depth_l1, evaluate_meshes, volumetric_iou, write_csv
from .pipeline import (AnalyticFace, Capture, TrainConfig, TrainingDiverged, frontal_face, prepare_training,
                       reconstruct, scene_mesh, simulate_capture, state_mismatch, train, tsdf_reconstruct)
from .sampling import OccupancyOracle, SampleBatch
from .tensor import checkpoint as ckpt

log = logging.getLogger("tspifu")

EXIT_OK, EXIT_INPUT, EXIT_MISMATCH, EXIT_EVAL = 0, 2, 3, 4
HISTORY_FIELDS = ("step", "phase", "loss", "l_sigma", "l_depth", "l_reg")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------
class Run:
    """Resolved config plus the run directory layout."""

    def __init__(self, cfg: RunConfig, root=None):
        self.cfg = cfg
        self.root = Path(root) if root else cfg.run_dir()
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    @property
    def render_dir(self):
        return self.root / "render"

    @property
    def train_dir(self):
        return self.root / "train"

    @property
    def samples_path(self):
        return self.root / "samples.bin"

    @property
    def checkpoint_path(self):
        return self.train_dir / "checkpoint.pfw"

    def scene(self):
        return load_scene(self.cfg.scene.path)

    def rig(self):
        r = self.cfg.rig
        return Rig(r.radius_m, r.height_m, r.image_size, tuple(r.azimuths_deg), r.fov_deg)

    def noise(self):
        n = self.cfg.noise
        try:
            level = parse_noise_level(n.level)
            return NoiseModel(level, n.depth_coeff, n.dropout_rate, correlation_px=n.correlation_px,
                              seed=self.cfg.seed)
        except ValueError as exc:
            raise CliError(EXIT_INPUT, f"bad noise settings: {exc}") from None

    def model_config(self):
        preset = self.cfg.model.preset
        if preset not in ("toy", "full"):
            raise CliError(EXIT_INPUT, f"unknown model preset {preset!r}")
        return BodyConfig.toy() if preset == "toy" else BodyConfig()

    def train_config(self):
        t, s = self.cfg.train, self.cfg.sample
        return TrainConfig(t.steps_phase1, t.steps_phase2, t.lr, t.lr_phase2, t.lr_decay_stages, t.batch_points,
                           s.pool_points, s.sigma_near, s.uniform_frac, t.reduction, t.depth_loss, t.reg_points,
                           s.jump_threshold, t.checkpoint_every, self.cfg.seed, t.weights)

    def bounds(self):
        return np.asarray(self.cfg.grid.bounds, dtype=np.float64)


def load_scene(path):
    if path is None:
        return sphere_capsule_scene()
    p = Path(path)
    try:
        if p.suffix in (".obj", ".ply"):
            return load_mesh(p)
        return SceneSdf.load(p)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read scene {path}: {exc}") from None


def scene_key(scene):
    if isinstance(scene, Mesh):
        return hashlib.sha256(scene.vertices.tobytes() + scene.faces.tobytes()).hexdigest()
    return repr(scene.shape)


@functools.lru_cache(maxsize=4)
def _reference_mesh(key, scene_ref, resolution):
    return scene_mesh(scene_ref, resolution)


def reference_mesh(scene, resolution):
    if isinstance(scene, Mesh):
        return scene
    return _reference_mesh(scene_key(scene), scene, resolution)


class OracleField:
    def __init__(self, source):
        self.oracle = OccupancyOracle(source)

    def query(self, X):
        return self.oracle.occupied(X).astype(np.float64)


# ---------------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------------
def save_views(directory, capture):
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (v, g) in enumerate(zip(capture.views, capture.gt)):
        names = {"depth": f"depth_{i}.png", "depth_gt": f"depth_gt_{i}.raw", "rgb": f"rgb_{i}.png",
                 "mask": f"mask_{i}.png", "camera": f"camera_{i}.json"}
        save_depth_png(directory / names["depth"], v.depth)
        save_depth_raw(directory / names["depth_gt"], g.depth)
        Image.fromarray(np.round(np.clip(v.rgb, 0, 1) * 255).astype(np.uint8)).save(directory / names["rgb"])
        Image.fromarray(v.mask.astype(np.uint8) * 255).save(directory / names["mask"])
        save_camera(directory / names["camera"], v.camera)
        files.append(names)
    return files


def load_views(directory):
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CliError(EXIT_INPUT, f"no rendered views in {directory}; run 'render' first")
    manifest = json.loads(manifest_path.read_text())
    views, gts = [], []
    try:
        for names in manifest["views"]:
            cam = load_camera(directory / names["camera"])
            depth = load_depth_png(directory / names["depth"])
            rgb = np.asarray(Image.open(directory / names["rgb"]), dtype=np.float32) / 255.0
            mask = np.asarray(Image.open(directory / names["mask"])) > 127
            views.append(View(rgb, depth, mask, cam))
            gts.append(View(rgb, load_depth_raw(directory / names["depth_gt"]), mask, cam))
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read rendered views: {exc}") from None
    return ViewTriplet(views), ViewTriplet(gts)


def read_history(path):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "phase") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_history(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in HISTORY_FIELDS})


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------
def stage_render(run):
    scene = run.scene()
    capture = simulate_capture(scene, run.rig(), run.noise())
    files = save_views(run.render_dir, capture)
    write_json(run.render_dir / "manifest.json", {
        "views": files, "rig": run.rig().to_json(), "noise_level_m": run.noise().sigma_base,
        "seed": run.cfg.seed, "scene": run.cfg.scene.path or "builtin:sphere_capsule"})
    return run.render_dir


def _capture(run):
    views, gts = load_views(run.render_dir)
    return Capture(run.scene(), views, gts)


def stage_sample(run):
    capture = _capture(run)
    data = prepare_training(capture, run.model_config(), run.train_config(), run.cfg.sample.k)
    data.samples.save(run.samples_path)
    return run.samples_path


def _load_state(model, path):
    try:
        state = ckpt.load(path)
    except (OSError, ckpt.CheckpointError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read checkpoint {path}: {exc}") from None
    problem = state_mismatch(model, state)
    if problem:
        raise CliError(EXIT_MISMATCH, f"checkpoint does not match the model config: {problem}")
    return state


def stage_train(run, resume=False, stop_at=None):
    capture = _capture(run)
    mcfg, tcfg = run.model_config(), run.train_config()
    data = prepare_training(capture, mcfg, tcfg, run.cfg.sample.k)
    if run.samples_path.exists():
        data.samples = SampleBatch.load(run.samples_path)
    model = BodyModel(mcfg, seed=run.cfg.seed)
    run.train_dir.mkdir(parents=True, exist_ok=True)
    state = None
    history = []
    if resume:
        if not run.checkpoint_path.exists():
            raise CliError(EXIT_INPUT, f"nothing to resume: {run.checkpoint_path} is missing")
        state = _load_state(model, run.checkpoint_path)
        done = int(state["train.step"][0])
        history = [r for r in read_history(run.train_dir / "history.csv") if r["step"] < done]
    write_json(run.train_dir / "seeds.json", {"model_init": run.cfg.seed, "noise": run.cfg.seed,
                                              "sampling": run.cfg.seed, "batches": run.cfg.seed})
    try:
        history += train(model, data, tcfg, checkpoint_path=run.checkpoint_path, resume=state,
                         on_step=_progress, stop_at=stop_at)
    except TrainingDiverged as exc:
        raise CliError(EXIT_EVAL, str(exc)) from None
    finally:
        if history:
            write_history(run.train_dir / "history.csv", history)
    if history:
        plotting.loss_curves(history, run.train_dir / "loss_curves.png")
    return run.checkpoint_path


def _progress(row):
    if row["step"] % 50 == 0:
        log.info("step %d phase %d loss %.5f", row["step"], row["phase"], row["loss"])


def _trained_model(run, checkpoint=None):
    model = BodyModel(run.model_config(), seed=run.cfg.seed)
    path = Path(checkpoint) if checkpoint else run.checkpoint_path
    if not path.exists():
        raise CliError(EXIT_INPUT, f"checkpoint {path} not found; run 'train-toy' first")
    state = _load_state(model, path)
    model.load_state({k: v for k, v in state.items() if not k.startswith(("adam.", "train."))})
    return model


def _write_recon(out, grid, mesh, extra):
    out.mkdir(parents=True, exist_ok=True)
    grid.save(out / "grid.raw")
    save_mesh(out / "mesh.obj", mesh)
    save_mesh(out / "mesh.ply", mesh)
    write_json(out / "manifest.json", dict(extra, resolution=list(grid.resolution), bounds=grid.bounds.tolist(),
                                           vertices=len(mesh.vertices), faces=len(mesh.faces),
                                           watertight=bool(not mesh.empty and is_watertight(mesh))))


def stage_reconstruct(run, baseline=None, checkpoint=None):
    res = run.cfg.grid.resolution
    if baseline == "tsdf":
        return stage_tsdf(run)
    capture = _capture(run)
    model = _trained_model(run, checkpoint)
    grid, mesh, body = reconstruct(model, capture.views, run.bounds(), res)
    out = run.root / f"recon_{res}"
    out.mkdir(parents=True, exist_ok=True)
    refined = body.refined_depth(0)
    for i, d in enumerate(refined):
        save_depth_raw(out / f"refined_{i}.raw", d)
    rows = []
    for i, (n, r, g) in enumerate(zip(capture.views, refined, capture.gt)):
        rows.append([i, repr(depth_l1(n.depth, g.depth)), repr(depth_l1(r, g.depth))])
        plotting.depth_comparison(n.depth, r, g.depth, out / f"depth_comparison_{i}.png", f"view {i}")
    (out / "depth_l1.csv").write_text(write_csv(rows, ["view", "noisy_l1_cm", "refined_l1_cm"]))
    _write_recon(out, grid, mesh, {"method": "tspifu",
                                   "refined_depth": [f"refined_{i}.raw" for i in range(len(refined))]})
    return out


def stage_tsdf(run):
    res = run.cfg.grid.resolution
    capture = _capture(run)
    grid, mesh = tsdf_reconstruct([v.depth for v in capture.views], capture.cameras, run.bounds(), res,
                                  run.cfg.grid.tsdf_trunc)
    out = run.root / f"tsdf_{res}"
    _write_recon(out, grid, mesh, {"method": "tsdf"})
    return out


def stage_fuse_face(run, checkpoint=None):
    """Body field fused with an analytic face field bound to the frontal crop."""
    res = run.cfg.grid.resolution
    capture = _capture(run)
    scene = run.scene()
    if isinstance(scene, Mesh):
        raise CliError(EXIT_INPUT, "fuse-face needs an analytic scene for its face field")
    model = _trained_model(run, checkpoint)
    f = run.cfg.face
    body = BodyAssembly(model, capture.views)
    front = capture.views[0]
    transform, face_depth, eroded = frontal_face(front, body.refined_depth(0)[0], f.head_box, f.upsample,
                                                 f.erosion_px)
    face = AnalyticFace(scene.sdf, front.camera, transform, face_depth, alpha=f.alpha)
    grid, mesh, _ = reconstruct(model, capture.views, run.bounds(), res, face=(face, eroded, f.beta))
    out = run.root / f"fused_{res}"
    _write_recon(out, grid, mesh, {"method": "tspifu+face", "face_box": list(transform.box)})
    return out


def stage_mesh(grid_path, out_path):
    try:
        grid = OccupancyGrid.load(grid_path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read grid {grid_path}: {exc}") from None
    mesh = marching_cubes(grid)
    save_mesh(out_path, mesh)
    return out_path


def evaluate(run, pred_path, gt_path=None, refined_dir=None):
    try:
        pred = load_mesh(pred_path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read mesh {pred_path}: {exc}") from None
    if gt_path is not None:
        try:
            gt = load_scene(gt_path) if str(gt_path).endswith(".json") else load_mesh(gt_path)
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_INPUT, f"cannot read ground truth {gt_path}: {exc}") from None
    else:
        gt = run.scene()
    if pred.empty:
        raise CliError(EXIT_EVAL, f"predicted mesh {pred_path} is empty")
    ec = run.cfg.eval
    gt_mesh = gt if isinstance(gt, Mesh) else reference_mesh(gt, ec.gt_resolution)
    if gt_mesh.empty:
        raise CliError(EXIT_EVAL, "ground-truth mesh is empty")
    iou = None
    if is_watertight(pred):
        gt_field = OracleField(gt)
        iou = volumetric_iou(OracleField(pred), gt_field, run.bounds(), ec.iou_samples, run.cfg.seed)
    depth = None
    refined_dir = Path(refined_dir) if refined_dir else Path(pred_path).parent
    refined = sorted(refined_dir.glob("refined_*.raw"))
    if refined and (run.render_dir / "manifest.json").exists():
        _, gts = load_views(run.render_dir)
        depth = depth_l1([load_depth_raw(p) for p in refined], [g.depth for g in gts][:len(refined)])
    return evaluate_meshes(pred, gt_mesh, ec.n_samples, run.cfg.seed, iou, depth)


def stage_eval(run, pred_path, gt_path=None, out_dir=None, refined_dir=None):
    report = evaluate(run, pred_path, gt_path, refined_dir)
    out = Path(out_dir) if out_dir else Path(pred_path).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(write_csv([report.csv_row([str(pred_path)])],
                                               MetricReport.csv_header(["mesh"])))
    return report


def stage_sweep(base_cfg, method=None):
    method = method or base_cfg.sweep.method
    if method not in ("tspifu", "tsdf"):
        raise CliError(EXIT_INPUT, f"unknown sweep method {method!r}")
    rows = []
    for level in base_cfg.sweep.levels:
        cfg = dataclasses.replace(base_cfg, noise=dataclasses.replace(base_cfg.noise, level=str(level)))
        run = Run(cfg)
        log.info("sweep level %s -> %s", level, run.root)
        stage_render(run)
        if method == "tsdf":
            out = stage_tsdf(run)
        else:
            stage_sample(run)
            stage_train(run)
            out = stage_reconstruct(run)
        report = stage_eval(run, out / "mesh.obj")
        rows.append({"noise_cm": parse_noise_level(level) * 100, "method": method, "run": run.root.name,
                     **{k: v for k, v in json.loads(report.to_json()).items()}})
    key = base_cfg.digest(tuple(k for k in UPSTREAM if k != "noise") + ("grid", "eval", "sweep"))
    sweep_dir = Path(base_cfg.out_dir) / f"sweep_{method}_{key}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    header = ["noise_cm", "method", "run"] + MetricReport.csv_header()
    body = [[repr(r["noise_cm"]), r["method"], r["run"]] +
            ["" if r[k] is None else repr(r[k]) for k in MetricReport.csv_header()] for r in rows]
    (sweep_dir / "sweep.csv").write_text(write_csv(body, header))
    plotting.noise_sweep(rows, sweep_dir / "noise_sweep.png")
    return sweep_dir


def stage_report(run):
    """Re-render every figure the run has data for, plus sweep plots under the output root."""
    written = []
    hist = read_history(run.train_dir / "history.csv")
    if hist:
        plotting.loss_curves(hist, run.train_dir / "loss_curves.png")
        written.append(run.train_dir / "loss_curves.png")
    for recon in sorted(run.root.glob("recon_*")):
        refined = sorted(recon.glob("refined_*.raw"))
        if not refined:
            continue
        views, gts = load_views(run.render_dir)
        for i, p in enumerate(refined):
            path = recon / f"depth_comparison_{i}.png"
            plotting.depth_comparison(views[i].depth, load_depth_raw(p), gts[i].depth, path, f"view {i}")
            written.append(path)
    for table in sorted(Path(run.cfg.out_dir).glob("sweep_*/sweep.csv")):
        with open(table, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            plotting.noise_sweep(rows, table.parent / "noise_sweep.png")
            written.append(table.parent / "noise_sweep.png")
    return written


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.lr=5e-4 (repeatable)")
    common.add_argument("--seed", type=int, help="seed for noise, sampling, init and batches")
    common.add_argument("--out", help="output root (run directories are created below it)")
    common.add_argument("--run-dir", help="use this directory instead of the config-hash run directory")
    common.add_argument("--noise", help="depth noise std, e.g. 1.0cm or 5mm")
    common.add_argument("--res", type=int, help="grid resolution per axis")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tspifu", description="Two-scale pixel-aligned implicit reconstruction "
                                "from simulated three-view RGBD captures.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("render", parents=[common], help="render the scene on the rig and inject depth noise")
    sub.add_parser("sample", parents=[common], help="draw labelled training points and mark depth-jump points")
    t = sub.add_parser("train-toy", parents=[common], help="two-phase training of the body field")
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.add_argument("--stop-at", type=int, help="stop after this many total steps")
    r = sub.add_parser("reconstruct", parents=[common], help="evaluate the field on a grid and mesh it")
    r.add_argument("--baseline", choices=["tsdf"], help="produce the TSDF-fusion mesh instead")
    r.add_argument("--checkpoint", help="checkpoint path (default: the run's)")
    f = sub.add_parser("fuse-face", parents=[common], help="reconstruct with the face field blended in")
    f.add_argument("--checkpoint")
    m = sub.add_parser("mesh", parents=[common], help="marching cubes on a saved grid")
    m.add_argument("grid")
    m.add_argument("output")
    e = sub.add_parser("eval", parents=[common], help="compare a mesh against ground truth")
    e.add_argument("pred")
    e.add_argument("--gt", help="ground-truth mesh or scene JSON (default: the config scene)")
    e.add_argument("--refined-dir", help="directory with refined_*.raw depth maps")
    e.add_argument("--metrics-dir", help="where to write metrics.json/csv (default: next to the mesh)")
    sub.add_parser("tsdf-baseline", parents=[common], help="TSDF fusion of the noisy depth maps")
    s = sub.add_parser("sweep", parents=[common], help="render/reconstruct/eval at every sweep noise level")
    s.add_argument("--method", choices=["tspifu", "tsdf"])
    sub.add_parser("report", parents=[common], help="re-render figures for a run")
    sub.add_parser("all", parents=[common], help="render, sample, train-toy, reconstruct and eval in sequence")
    return p


def resolve_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    if args.noise is not None:
        overrides.append(f"noise.level={json.dumps(args.noise)}")
    if args.res is not None:
        overrides.append(f"grid.resolution={args.res}")
    return load_config(args.config, overrides)


def run_command(args):
    cfg = resolve_config(args)
    if args.command == "sweep":
        return stage_sweep(cfg, args.method)
    run = Run(cfg, args.run_dir)
    if args.command == "render":
        return stage_render(run)
    if args.command == "sample":
        return stage_sample(run)
    if args.command == "train-toy":
        return stage_train(run, args.resume, args.stop_at)
    if args.command == "reconstruct":
        return stage_reconstruct(run, args.baseline, args.checkpoint)
    if args.command == "fuse-face":
        return stage_fuse_face(run, args.checkpoint)
    if args.command == "mesh":
        return stage_mesh(args.grid, args.output)
    if args.command == "eval":
        return stage_eval(run, args.pred, args.gt, args.metrics_dir, args.refined_dir)
    if args.command == "tsdf-baseline":
        return stage_tsdf(run)
    if args.command == "report":
        return stage_report(run)
    if args.command == "all":
        stage_render(run)
        stage_sample(run)
        stage_train(run)
        out = stage_reconstruct(run)
        return stage_eval(run, out / "mesh.obj")
    raise CliError(EXIT_INPUT, f"unknown command {args.command}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run_command(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if isinstance(result, MetricReport):
        print(result.to_json(), end="")
    elif isinstance(result, list):
        for p in result:
            print(p)
    elif result is not None:
        print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
