"""Surface, normal, depth and volumetric evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .geometry import SurfaceQuery, sample_surface

N_SAMPLES = 10_000


def _rng(seed, stream):
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


def _check(mesh, name):
    if mesh.empty:
        raise ValueError(f"{name} mesh is empty")


def chamfer_and_p2s(pred, gt, n_samples=N_SAMPLES, seed=0):
    """(p2s_cm, chamfer_cm): mean distance from pred samples to gt, and the mean of both directions."""
    _check(pred, "predicted")
    _check(gt, "ground-truth")
    pa, _ = sample_surface(pred, n_samples, _rng(seed, 0))
    pb, _ = sample_surface(gt, n_samples, _rng(seed, 1))
    a2b = SurfaceQuery(gt).query(pa)[0].mean()
    b2a = SurfaceQuery(pred).query(pb)[0].mean()
    return 100.0 * a2b, 100.0 * 0.5 * (a2b + b2a)


def normal_metrics(pred, gt, n_samples=N_SAMPLES, seed=0):
    """(mean squared normal difference, mean 1 - cos) at nearest-surface correspondences.

    Raw values; MetricReport applies the reporting scales.
    """
    _check(pred, "predicted")
    _check(gt, "ground-truth")
    P, f = sample_surface(pred, n_samples, _rng(seed, 2))
    n_p = pred.face_normals()[f]
    _, g, _ = SurfaceQuery(gt).query(P)
    n_g = gt.face_normals()[g]
    l2 = float(((n_p - n_g) ** 2).sum(axis=1).mean())
    cosine = max(0.0, float((1.0 - (n_p * n_g).sum(axis=1)).mean()))
    return l2, cosine


def volumetric_iou(field_a, field_b, bounds, n_samples=200_000, seed=0):
    """Monte-Carlo IoU of the {sigma > 0.5} sets inside ``bounds``; 1 when both are empty."""
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    X = bounds[0] + _rng(seed, 3).random((n_samples, 3)) * (bounds[1] - bounds[0])
    a = np.asarray(field_a.query(X)) > 0.5
    b = np.asarray(field_b.query(X)) > 0.5
    union = int((a | b).sum())
    return 1.0 if union == 0 else int((a & b).sum()) / union


def depth_l1(pred, gt):
    """Mean |pred - gt| in centimetres over pixels valid in both; accepts DepthMaps or lists of them."""
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    total, count = 0.0, 0
    for p, g in zip(preds, gts):
        ok = p.valid & g.valid
        total += float(np.abs(p.values[ok].astype(np.float64) - g.values[ok].astype(np.float64)).sum())
        count += int(ok.sum())
    if count == 0:
        raise ValueError("no pixel is valid in both depth maps")
    return 100.0 * total / count


@dataclass
class MetricReport:
    """Reported at the usual table scales: distances in cm, normal L2 in units of 1e-1,
    normal cosine distance in units of 1e-3, depth L1 in cm."""

    p2s_cm: float | None = None
    chamfer_cm: float | None = None
    normal_l2: float | None = None
    normal_cosine: float | None = None
    depth_l1: float | None = None
    iou: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            v = float(v)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"metric {f.name} must be finite and non-negative, got {v}")
            setattr(self, f.name, v)
        if self.iou is not None and self.iou > 1:
            raise ValueError("iou must lie in [0, 1]")

    @classmethod
    def from_raw(cls, p2s_cm=None, chamfer_cm=None, normal_l2=None, normal_cosine=None, depth_l1=None, iou=None):
        return cls(p2s_cm, chamfer_cm, None if normal_l2 is None else normal_l2 * 10.0,
                   None if normal_cosine is None else normal_cosine * 1e3, depth_l1, iou)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown metric fields: {sorted(unknown)}")
        return cls(**d)

    @staticmethod
    def csv_header(extra=()):
        return list(extra) + [f.name for f in fields(MetricReport)]

    def csv_row(self, extra=()):
        return list(extra) + ["" if getattr(self, f.name) is None else repr(getattr(self, f.name))
                              for f in fields(self)]


def write_csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def evaluate_meshes(pred, gt, n_samples=N_SAMPLES, seed=0, iou=None, depth=None):
    p2s, chamfer = chamfer_and_p2s(pred, gt, n_samples, seed)
    l2, cosine = normal_metrics(pred, gt, n_samples, seed)
    return MetricReport.from_raw(p2s, chamfer, l2, cosine, depth, iou)
