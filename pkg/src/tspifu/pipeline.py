"""Simulated capture, two-phase training of the body field, and reconstruction."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .capture import (SceneSdf, add_noise, face_box_from_3d, face_crop, face_mask_from_3d,
                      render_views, upsample_raster)
from .features import prepare_views
from .fusion import FusedField, erode_weights, evaluate_grid, marching_cubes, tsdf_fuse
from .geometry import DepthMap, Mesh, View, ViewTriplet
from .implicit import BodyAssembly, sigmoid
from .losses import LossWeights, gt_pyramid, loss_depth, loss_reg, loss_sigma, total_loss
from .sampling import OccupancyOracle, depth_jump_mask, facial_flag, mark_sj, sample_training_points
from .tensor import checkpoint as ckpt
from .tensor.autograd import NonFiniteError, no_grad
from .tensor.optim import Adam

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = ((-0.4, -0.7, -0.4), (0.4, 0.7, 0.4))


# ---------------------------------------------------------------------------
# capture
# ---------------------------------------------------------------------------
@dataclass
class Capture:
    scene: SceneSdf
    views: ViewTriplet  # noisy sensor input
    gt: ViewTriplet     # noise-free renders

    @property
    def cameras(self):
        return [v.camera for v in self.views]


def simulate_capture(scene, rig, noise):
    """Render the rig and corrupt each depth map with its own noise stream."""
    gt = render_views(scene, rig.cameras())
    noisy = [View(v.rgb, add_noise(v.depth, noise, i), v.mask, v.camera) for i, v in enumerate(gt)]
    return Capture(scene, ViewTriplet(noisy), gt)


class SdfRamp:
    """Occupancy clip(0.5 - sdf / width, 0, 1): exact iso-surface under linear interpolation."""

    def __init__(self, sdf, width):
        self.sdf = sdf
        self.width = width

    def query(self, X):
        return np.clip(0.5 - self.sdf(np.asarray(X, dtype=np.float64).reshape(-1, 3)) / self.width, 0, 1)


def scene_mesh(scene, resolution=128, pad=0.05):
    """Reference surface of an analytic scene."""
    lo, hi = scene.bounds(expand=pad)
    vs = float(np.max((np.asarray(hi) - np.asarray(lo)) / resolution))
    grid = evaluate_grid(SdfRamp(scene.sdf, 2 * vs), (lo, hi), resolution)
    return marching_cubes(grid)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    steps_phase1: int = 600
    steps_phase2: int = 100
    lr: float = 1e-3
    lr_phase2: float = 2e-4
    lr_decay_stages: int = 1  # >1 halves the phase-1 lr at each of that many equal stages
    batch_points: int = 1024
    pool_points: int = 24000
    sigma_near: float = 0.03
    uniform_frac: float = 0.2
    reduction: str = "mean"
    depth_loss: bool = True
    reg_points: int = 32
    jump_threshold: float = 0.06
    checkpoint_every: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.steps_phase1 < 0 or self.steps_phase2 < 0:
            raise ValueError("step counts must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.lr_decay_stages < 1:
            raise ValueError("lr_decay_stages must be at least 1")

    def phase1_lr(self, step):
        stage = step * self.lr_decay_stages // max(self.steps_phase1, 1)
        return self.lr * 0.5 ** stage

    @property
    def total_steps(self):
        return self.steps_phase1 + self.steps_phase2

    def to_json(self):
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainData:
    prep: object
    cameras: list
    samples: object
    gt_vals: list
    gt_oks: list


def prepare_training(capture, model_cfg, cfg, k=0):
    """Network inputs, the labelled point pool with S_j flags, and the ground-truth depth pyramid."""
    oracle = OccupancyOracle(capture.scene)
    surface = capture.scene if isinstance(capture.scene, Mesh) else scene_mesh(capture.scene, 64)
    pool = sample_training_points(oracle, surface, cfg.pool_points, cfg.sigma_near, cfg.uniform_frac, cfg.seed)
    masks = [depth_jump_mask(v.depth, cfg.jump_threshold) for v in capture.views]
    pool = mark_sj(pool, masks, capture.cameras, k=k)
    gt_vals, gt_oks = gt_pyramid([v.depth.values for v in capture.gt], [v.depth.valid for v in capture.gt])
    return TrainData(prepare_views(capture.views, model_cfg.encoder), capture.cameras, pool, gt_vals, gt_oks)


def _step_rng(seed, step):
    return np.random.Generator(np.random.Philox(key=[int(seed), int(step)]))


def training_state(model, opt, step):
    state = {k: v.data for k, v in model.named_parameters().items()}
    state.update(opt.state())
    state["train.step"] = np.array([step], dtype=np.float32)
    return state


def resume_step(state):
    return int(state["train.step"][0])


def load_training_state(model, opt, state):
    model.load_state({k: v for k, v in state.items() if not k.startswith(("adam.", "train."))})
    opt.load_state(state)
    return int(state["train.step"][0])


def train(model, data, cfg, checkpoint_path=None, resume=None, on_step=None, stop_at=None):
    """Two-phase optimisation of F_b; returns the loss history as a list of dicts.

    Phase 1 trains everything on L_sigma (+ L_D); phase 2 freezes the feature net and
    adds L_reg on depth-jump points. The batch for step t depends only on (seed, t),
    so resuming from a checkpoint reproduces the uninterrupted run. Non-finite losses
    or parameters raise TrainingDiverged; the last checkpoint on disk stays finite.
    """
    history = []
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            _train_loop(model, data, cfg, history, checkpoint_path, resume, on_step, stop_at)
    except NonFiniteError as exc:
        step = history[-1]["step"] + 1 if history else (resume_step(resume) if resume else 0)
        kept = checkpoint_path if checkpoint_path and os.path.exists(checkpoint_path) else None
        raise TrainingDiverged(f"{exc} at step {step}; last checkpoint: {kept}") from None
    return history


def _train_loop(model, data, cfg, history, checkpoint_path, resume, on_step, stop_at):
    w = cfg.weights
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    start = 0
    if resume is not None:
        start = load_training_state(model, opt, resume)
    pts = data.samples.points.astype(np.float64)
    labels = data.samples.labels
    sj = np.nonzero(data.samples.s_j)[0]
    frozen_out = None
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    last_saved = None
    for step in range(start, end):
        phase = 1 if step < cfg.steps_phase1 else 2
        rng = _step_rng(cfg.seed, step)
        idx = np.sort(rng.choice(len(pts), size=min(cfg.batch_points, len(pts)), replace=False))
        comps = {}
        if phase == 1:
            opt.lr = cfg.phase1_lr(step)
            out = model.encode(data.prep)
        else:
            if frozen_out is None:
                with no_grad():
                    frozen_out = model.encode(data.prep)
            out = frozen_out
            opt.lr = cfg.lr_phase2
        sig = model.occupancy(out, data.cameras, pts[idx])
        comps["sigma"] = loss_sigma(sig, labels[idx], mu0=w.mu0, reduction=cfg.reduction)
        if phase == 1 and cfg.depth_loss:
            comps["depth"] = loss_depth(out.depth, data.gt_vals, data.gt_oks, out.masks, data.cameras, w.rho_d,
                                        w.rho_n, w.lambda_s, w.smooth_l1_beta)
        if phase == 2 and len(sj):
            chosen = np.sort(rng.choice(sj, size=min(cfg.reg_points, len(sj)), replace=False))
            comps["reg"], _ = loss_reg(lambda Q: model.occupancy(out, data.cameras, Q), pts[chosen], w.epsilon,
                                       rng, h=w.normal_h, reduction=cfg.reduction)
        values = {k: float(v.item()) for k, v in comps.items()}
        if not all(math.isfinite(v) for v in values.values()):
            bad = next(k for k, v in values.items() if not math.isfinite(v))
            raise TrainingDiverged(f"non-finite {bad} loss at step {step}; last checkpoint: {last_saved}")
        loss = total_loss(comps, w, phase)
        model.zero_grad()
        loss.backward()
        if phase == 2:
            for p in model.backbone().values():
                p.grad = None
        opt.step()
        bad = next((k for k, p in model.named_parameters().items() if not np.isfinite(p.data).all()), None)
        if bad is not None:
            raise TrainingDiverged(f"parameter {bad!r} became non-finite at step {step}; "
                                   f"last checkpoint: {last_saved}")
        row = {"step": step, "phase": phase, "loss": float(loss.item()), "l_sigma": values.get("sigma", 0.0),
               "l_depth": values.get("depth", 0.0), "l_reg": values.get("reg", 0.0)}
        history.append(row)
        if on_step:
            on_step(row)
        done = step + 1
        if checkpoint_path and (done % cfg.checkpoint_every == 0 or done == end):
            ckpt.save(checkpoint_path, training_state(model, opt, done))
            last_saved = str(checkpoint_path)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------
def reconstruct(model, views, bounds=DEFAULT_BOUNDS, resolution=64, face=None, chunk=8192):
    """Evaluate F_b (fused with a face field when given) on a grid and mesh it."""
    body = BodyAssembly(model, views)
    fieldfn = body if face is None else FusedField(body, *face)
    grid = evaluate_grid(fieldfn, bounds, resolution, chunk)
    return grid, marching_cubes(grid), body


def tsdf_reconstruct(depths, cameras, bounds=DEFAULT_BOUNDS, resolution=64, trunc=None):
    vs = float(np.min((np.asarray(bounds[1]) - np.asarray(bounds[0])) / resolution))
    grid = tsdf_fuse(depths, cameras, bounds, resolution, 3 * vs if trunc is None else trunc)
    return grid, marching_cubes(grid)


# ---------------------------------------------------------------------------
# face
# ---------------------------------------------------------------------------
HEAD_BOX = ((-0.16, 0.28, -0.16), (0.16, 0.58, 0.16))


class AnalyticFace:
    """Face field backed by an analytic SDF, bound to a frontal face crop.

    Exposes the same interface FusedField expects from a FaceAssembly.
    """

    def __init__(self, sdf, camera, transform, face_depth, k=200.0, alpha=0.15):
        self.sdf = sdf
        self.camera = camera
        self.transform = transform
        self._depth = face_depth
        self.k = k
        self.alpha = alpha

    def face_depth(self):
        return self._depth

    def flags(self, X):
        return facial_flag(X, self.camera, self._depth, self.transform, self.alpha)

    def query(self, X, v_f=None):
        return sigmoid(-self.k * self.sdf(np.asarray(X, dtype=np.float64).reshape(-1, 3)))


def frontal_face(view, refined_depth, head_box=HEAD_BOX, up=4, erosion_px=8):
    """Face crop of the frontal view: (transform, upsampled refined face depth, eroded mask weights)."""
    box = face_box_from_3d(view.camera, *head_box, margin_px=1)
    mask = face_mask_from_3d(View(view.rgb, refined_depth, view.mask, view.camera), *head_box)
    crop = face_crop(View(view.rgb, refined_depth, view.mask, view.camera), box, face_mask=mask)
    w, h = crop.transform.box[2] - crop.transform.box[0], crop.transform.box[3] - crop.transform.box[1]
    out = (w * up, h * up)
    t = type(crop.transform)(crop.transform.box, out)
    m_up = upsample_raster(crop.mask.astype(np.float64), out, order=0) > 0.5
    valid_up = upsample_raster(crop.depth.valid.astype(np.float64), out, order=0) > 0.5
    d_up = upsample_raster(np.where(crop.depth.valid, crop.depth.values, 0.0), out, order=0)
    m_up &= valid_up
    depth = DepthMap(np.where(m_up, d_up, 0.0).astype(np.float32), m_up)
    return t, depth, erode_weights(m_up, max(1, erosion_px * up // 4))


def state_mismatch(model, state):
    """Name of the first tensor whose presence or shape disagrees with ``model``, else None."""
    params = model.named_parameters()
    for name, p in params.items():
        if name not in state:
            return f"missing tensor {name!r}"
        if tuple(state[name].shape) != tuple(p.shape):
            return f"tensor {name!r}: checkpoint {tuple(state[name].shape)} vs model {tuple(p.shape)}"
    extra = sorted(k for k in state if k not in params and not k.startswith(("adam.", "train.")))
    if extra:
        return f"unexpected tensor {extra[0]!r}"
    return None

