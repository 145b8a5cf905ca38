"""Run configuration: one JSON document with a section per pipeline stage.

Every key has a default and unknown keys are rejected. Values resolve as
command-line flag > config file > default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .capture import SWEEP_NOISE_LEVELS_CM
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    path: str | None = None  # JSON scene; None uses the built-in sphere-capsule subject


@dataclass
class RigSection:
    radius_m: float = 1.8
    height_m: float = 0.0
    image_size: int = 64
    azimuths_deg: tuple = (0.0, 135.0, -135.0)
    fov_deg: float = 40.0


@dataclass
class NoiseSection:
    level: str = "1.0cm"
    depth_coeff: float = 0.0
    dropout_rate: float = 0.3
    correlation_px: float = 0.0


@dataclass
class SampleSection:
    pool_points: int = 24000
    sigma_near: float = 0.03
    uniform_frac: float = 0.2
    jump_threshold: float = 0.06
    k: int = 0


@dataclass
class ModelSection:
    preset: str = "toy"  # "toy" or "full"


@dataclass
class TrainSection:
    steps_phase1: int = 600
    steps_phase2: int = 100
    lr: float = 1e-3
    lr_phase2: float = 2e-4
    lr_decay_stages: int = 1
    batch_points: int = 1024
    reduction: str = "mean"
    depth_loss: bool = True
    reg_points: int = 32
    checkpoint_every: int = 100
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class GridSection:
    resolution: int = 64
    bounds: tuple = ((-0.4, -0.7, -0.4), (0.4, 0.7, 0.4))
    tsdf_trunc: float | None = None


@dataclass
class FaceSection:
    erosion_px: int = 8
    beta: float = 1e3
    alpha: float = 0.15
    upsample: int = 4
    head_box: tuple = ((-0.16, 0.28, -0.16), (0.16, 0.58, 0.16))


@dataclass
class EvalSection:
    n_samples: int = 10000
    gt_resolution: int = 256
    iou_samples: int = 200000


@dataclass
class SweepSection:
    levels: tuple = tuple(f"{c}cm" for c in SWEEP_NOISE_LEVELS_CM)
    method: str = "tspifu"  # or "tsdf"


UPSTREAM = ("seed", "scene", "rig", "noise", "sample", "model", "train")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    scene: SceneSection = field(default_factory=SceneSection)
    rig: RigSection = field(default_factory=RigSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    sample: SampleSection = field(default_factory=SampleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    grid: GridSection = field(default_factory=GridSection)
    face: FaceSection = field(default_factory=FaceSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def digest(self, sections=UPSTREAM):
        """Short hash of the named sections.

        The default covers everything that determines renders, samples and the checkpoint,
        so reconstructions at several grid resolutions share one run directory.
        """
        d = self.to_dict()
        return hashlib.sha256(json.dumps({k: d[k] for k in sections}, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self):
        return Path(self.out_dir) / self.digest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _convert(tp, value, where):
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return build(tp, value, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if tp is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{where}: not a boolean: {value!r}")
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: not a boolean: {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{where}: not an integer: {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: not an integer: {value!r}") from None
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: not a number: {value!r}") from None
    if tp is str:
        return str(value)
    if tp is tuple:
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def build(cls, data, where=""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {(where + '.' if where else '') + unknown[0]!r}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _convert(hints[key], value, f"{where}.{key}" if where else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def load_config(path=None, overrides=()):
    """Read a RunConfig from ``path`` (optional) and apply ``section.key=value`` overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return build(RunConfig, data)
