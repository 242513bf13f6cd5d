"""Segmentation, heatmap, landmark and pose error metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import AppFrame, RigidPose, euler_decompose
from .imaging import N_LABELS, LabelImage2D
from .similarity import ncc

SUCCESS_ROTATION_DEG = 1.0


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelImage2D) else np.asarray(x)


@dataclass
class DiceResult:
    per_class: np.ndarray
    mean: float
    vacuous: np.ndarray  # classes absent from both inputs (scored 1)


def dice_score(est, gt, classes: Sequence[int] | None = None) -> DiceResult:
    """Per-class dice ``2 sum(M Mhat) / (sum M^2 + sum Mhat^2)`` on hard masks and their mean."""
    e, g = _labels(est), _labels(gt)
    if e.shape != g.shape:
        raise ValueError("label maps differ in shape")
    classes = range(N_LABELS) if classes is None else classes
    vals, vac = [], []
    for k in classes:
        m, h = (e == k), (g == k)
        den = int(m.sum()) + int(h.sum())
        vac.append(den == 0)
        vals.append(1.0 if den == 0 else 2.0 * int((m & h).sum()) / den)
    vals = np.array(vals)
    return DiceResult(vals, float(vals.mean()), np.array(vac))


def _heatmap_arrays(h) -> list[np.ndarray]:
    if isinstance(h, Mapping):
        h = list(h.values())
    return [np.asarray(getattr(x, "values", x), dtype=float) for x in h]


def heatmap_loss(est, gt, *, with_flags: bool = False):
    """Mean NCC between estimated and ground-truth heatmaps (higher is better)."""
    e, g = _heatmap_arrays(est), _heatmap_arrays(gt)
    if len(e) != len(g) or not e:
        raise ValueError("heatmap lists must be non-empty and of equal length")
    vals, flags = [], []
    for a, b in zip(e, g):
        v, f = ncc(a, b, with_flag=True)
        vals.append(v)
        flags.append(f)
    H = float(np.mean(vals))
    return (H, flags) if with_flags else H


def combined_loss(est_labels, est_heatmaps, gt_labels, gt_heatmaps) -> float:
    """``-(D + (H + 1) / 2)``: -2 for perfect predictions, 0 in the worst case."""
    D = dice_score(est_labels, gt_labels).mean
    H = heatmap_loss(est_heatmaps, gt_heatmaps)
    return -(D + 0.5 * (H + 1.0))


@dataclass
class LandmarkStats:
    errors_px: dict = field(default_factory=dict)
    errors_mm: dict = field(default_factory=dict)
    false_negatives: list = field(default_factory=list)
    false_positives: list = field(default_factory=list)
    n_visible: int = 0
    n_invisible: int = 0

    @property
    def fnr(self) -> float:
        return len(self.false_negatives) / self.n_visible if self.n_visible else 0.0

    @property
    def fpr(self) -> float:
        return len(self.false_positives) / self.n_invisible if self.n_invisible else 0.0

    @property
    def mean_error_px(self) -> float:
        return float(np.mean(list(self.errors_px.values()))) if self.errors_px else float("nan")

    @property
    def mean_error_mm(self) -> float:
        return float(np.mean(list(self.errors_mm.values()))) if self.errors_mm else float("nan")


def landmark_stats(dets, gt: Mapping[str, tuple], spacing) -> LandmarkStats:
    """Landmark error (true detections), false-negative and false-positive rates.

    ``gt`` maps names to ``(pixel, visible)``; ``spacing`` is the (row, col)
    pixel size in mm used for the mm errors.
    """
    sp = np.broadcast_to(np.asarray(spacing, dtype=float), (2,))
    d = {x.name: x for x in dets}
    st = LandmarkStats()
    for name, (pix, vis) in gt.items():
        det = d.get(name)
        found = det is not None and det.detected
        if vis:
            st.n_visible += 1
            if found:
                diff = np.asarray(det.pixel, float) - np.asarray(pix, float)
                st.errors_px[name] = float(np.hypot(*diff))
                st.errors_mm[name] = float(np.hypot(*(diff * sp)))
            else:
                st.false_negatives.append(name)
        else:
            st.n_invisible += 1
            if found:
                st.false_positives.append(name)
    return st


# --------------------------------------------------------------------------
# pose errors


@dataclass
class PoseError:
    rotation_deg: float
    rotation_xyz_deg: np.ndarray
    translation_mm: float
    translation_xyz_mm: np.ndarray

    def to_dict(self) -> dict:
        return {"rot_deg": self.rotation_deg,
                "rot_x_deg": float(self.rotation_xyz_deg[0]), "rot_y_deg": float(self.rotation_xyz_deg[1]),
                "rot_z_deg": float(self.rotation_xyz_deg[2]), "trans_mm": self.translation_mm,
                "trans_x_mm": float(self.translation_xyz_mm[0]), "trans_y_mm": float(self.translation_xyz_mm[1]),
                "trans_z_mm": float(self.translation_xyz_mm[2])}


def _centred_error(delta: RigidPose, centre: np.ndarray) -> PoseError:
    """Error of a rigid correction ``delta`` about ``centre`` in ``delta``'s own axes."""
    centre = np.asarray(centre, dtype=float)
    shift = delta.apply(centre) - centre
    e = euler_decompose(RigidPose(delta.rotation, np.zeros(3)))
    return PoseError(float(np.rad2deg(delta.rotation_angle())), np.abs(e[:3]),
                     float(np.linalg.norm(shift)), np.abs(shift))


def pelvis_pose_error(est: RigidPose, gt: RigidPose, fh_mid) -> PoseError:
    """Pelvis error in projective axes (z = depth) about the true femoral-head midpoint.

    The correction ``est . gt^-1`` is expressed in the world frame; its
    translation is reported as the displacement of the FH midpoint.
    """
    delta = est @ gt.inverse()
    return _centred_error(delta, gt.apply(np.asarray(fh_mid, float)))


def femur_pose_error(est_rel: RigidPose, gt_rel: RigidPose, app: AppFrame, fh) -> PoseError:
    """Femur-relative-to-pelvis error in APP axes about the ipsilateral femoral head.

    ``est_rel``/``gt_rel`` map femur CT coordinates to pelvis CT coordinates.
    """
    A = RigidPose(app.axes, np.zeros(3))
    delta_ct = est_rel @ gt_rel.inverse()
    delta_app = A.inverse() @ delta_ct @ A
    return _centred_error(delta_app, A.inverse().apply(np.asarray(fh, float)))


def is_success(err: PoseError, threshold_deg: float = SUCCESS_ROTATION_DEG) -> bool:
    return err.rotation_deg < threshold_deg


# --------------------------------------------------------------------------
# reporting


def write_csv(rows: Sequence[Mapping], path: str) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def summarize(rows: Sequence[Mapping]) -> dict:
    """Mean, standard deviation and a ``mean ± std`` string for every numeric column."""
    out = {}
    keys = {k for r in rows for k, v in r.items() if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool)}
    for k in sorted(keys):
        vals = np.array([float(r[k]) for r in rows if k in r and r[k] is not None], dtype=float)
        vals = vals[np.isfinite(vals)]
        if not len(vals):
            continue
        m, s = float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[k] = {"mean": m, "std": s, "n": int(len(vals)), "text": f"{m:.2f} ± {s:.2f}"}
    flags = {k for r in rows for k, v in r.items() if isinstance(v, bool)}
    for k in sorted(flags):
        n = sum(1 for r in rows if r.get(k))
        out[k] = {"count": n, "n": len(rows), "text": f"{n} ({100.0 * n / max(len(rows), 1):.0f}%)"}
    return out


def write_summary(rows, path: str) -> dict:
    s = summarize(rows)
    with open(path, "w") as fh:
        json.dump(s, fh, indent=2)
    return s
