"""Landmark heatmaps, heatmap peak extraction, PnP and AP initialization."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import (AppFrame, ProjectionGeometry, RigidPose, WORLD_FROM_APP_AP,
                       project_points, skew, so3_exp)
from .imaging import FEMUR_L, FEMUR_R, HEMIPELVIS_L, HEMIPELVIS_R, LabelImage2D
from .similarity import ncc

log = logging.getLogger(__name__)

HEATMAP_SIGMA_PX = 2.5
INIT_PREFERENCE = ("FH_L", "FH_R", "IOF_L", "IOF_R", "IPS_L", "IPS_R", "MOF_L", "MOF_R",
                   "SPS_L", "SPS_R", "GSN_L", "GSN_R", "ASIS_L", "ASIS_R")
APP_LANDMARKS = ("ASIS_L", "ASIS_R", "SPS_L", "SPS_R")


def owning_label(name: str) -> int:
    """Label class a landmark must sit on: ipsilateral femur for FH, else ipsilateral hemipelvis."""
    side = name.rsplit("_", 1)[-1]
    if side not in ("L", "R"):
        raise ValueError(f"landmark {name!r} has no side suffix")
    if name.startswith("FH"):
        return FEMUR_L if side == "L" else FEMUR_R
    return HEMIPELVIS_L if side == "L" else HEMIPELVIS_R


@dataclass
class Heatmap:
    values: np.ndarray
    name: str = ""

    @property
    def shape(self):
        return self.values.shape


def gaussian_2d(shape, center, sigma: float) -> np.ndarray:
    """Normalized isotropic Gaussian ``(2 pi s^2)^-1 exp(-d^2 / 2 s^2)`` on a pixel grid."""
    r = np.arange(shape[0], dtype=float)[:, None] - center[0]
    c = np.arange(shape[1], dtype=float)[None, :] - center[1]
    return np.exp(-(r * r + c * c) / (2.0 * sigma * sigma)) / (2.0 * np.pi * sigma * sigma)


def make_heatmap(lm, dims, sigma_px: float = HEATMAP_SIGMA_PX, name: str = "") -> Heatmap:
    """Gaussian heatmap centred on ``lm`` = (row, col); all zeros when ``lm`` is None."""
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    dims = (int(dims[0]), int(dims[1]))
    if lm is None:
        return Heatmap(np.zeros(dims), name)
    return Heatmap(gaussian_2d(dims, lm, sigma_px), name)


@dataclass
class Detection:
    name: str
    pixel: np.ndarray        # (row, col)
    template_ncc: float
    detected: bool

    def to_dict(self) -> dict:
        return {"row": float(self.pixel[0]), "col": float(self.pixel[1]),
                "ncc": float(self.template_ncc), "detected": bool(self.detected)}


def detections_to_json(dets: Iterable[Detection]) -> str:
    return json.dumps({d.name: d.to_dict() for d in dets}, indent=2)


def detections_from_json(text: str) -> list[Detection]:
    d = json.loads(text)
    return [Detection(k, np.array([v["row"], v["col"]], dtype=float), float(v["ncc"]), bool(v["detected"]))
            for k, v in d.items()]


def detected_pixels(dets: Iterable[Detection]) -> dict[str, np.ndarray]:
    return {d.name: d.pixel for d in dets if d.detected}


def _as_heatmaps(heatmaps) -> list[Heatmap]:
    if isinstance(heatmaps, Mapping):
        return [h if isinstance(h, Heatmap) else Heatmap(np.asarray(h, float), k) for k, h in heatmaps.items()]
    return list(heatmaps)


def extract_landmarks(heatmaps, lbl, region: int = 25, threshold: float = 0.9,
                      sigma_px: float = HEATMAP_SIGMA_PX) -> list[Detection]:
    """Peak detection restricted to each landmark's owning bone label.

    The proposal is the maximum of the heatmap over pixels carrying the
    owning label.  It is accepted when the NCC between the ``region``
    square around it and a Gaussian template centred on it exceeds
    ``threshold``; both are truncated identically at the image border.
    """
    labels = lbl.labels if isinstance(lbl, LabelImage2D) else np.asarray(lbl)
    half = region // 2
    out = []
    for hm in _as_heatmaps(heatmaps):
        h = np.asarray(hm.values, dtype=float)
        if h.shape != labels.shape:
            raise ValueError(f"heatmap {hm.name!r} shape {h.shape} != label shape {labels.shape}")
        mask = labels == owning_label(hm.name)
        if not mask.any():
            out.append(Detection(hm.name, np.array([np.nan, np.nan]), 0.0, False))
            continue
        flat = np.where(mask, h, -np.inf).ravel()
        r, c = np.unravel_index(int(np.argmax(flat)), h.shape)
        r0, r1 = max(0, r - half), min(h.shape[0], r + half + 1)
        c0, c1 = max(0, c - half), min(h.shape[1], c + half + 1)
        patch = h[r0:r1, c0:c1]
        templ = gaussian_2d(patch.shape, (r - r0, c - c0), sigma_px)
        score = ncc(patch, templ)
        out.append(Detection(hm.name, np.array([float(r), float(c)]), score, score > threshold))
    return out


# --------------------------------------------------------------------------
# PnP


@dataclass
class PnPResult:
    pose: RigidPose
    rms_mm: float
    initial_rms_mm: float
    iterations: int
    converged: bool

    @property
    def diverged(self) -> bool:
        return self.rms_mm > self.initial_rms_mm


def _pnp_residuals(pose: RigidPose, P3, obs, g: ProjectionGeometry):
    pr = project_points(g, pose, P3)
    return ((pr.pixel - obs) * np.asarray(g.pixel_spacing)).ravel()


def solve_pnp_detailed(p3d, p2d, g: ProjectionGeometry, init: RigidPose,
                       max_iter: int = 100, tol: float = 1e-8) -> PnPResult:
    """Levenberg-Marquardt on se(3) minimizing detector-plane reprojection error (mm).

    Updates are left perturbations about the current world-frame centroid
    of the points, which keeps rotation and translation well decoupled.
    """
    P3 = np.asarray(p3d, dtype=float).reshape(-1, 3)
    obs = np.asarray(p2d, dtype=float).reshape(-1, 2)
    if len(P3) < 4 or len(obs) != len(P3):
        raise ValueError("PnP needs at least 4 matching correspondences")
    sdd = g.src_to_det
    pose = init
    res = _pnp_residuals(pose, P3, obs, g)
    cost = float(res @ res)
    cost0 = cost
    mu = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        X = pose.apply(P3)
        c = X.mean(axis=0)
        Xc = X - c
        J = np.zeros((2 * len(X), 6))
        for i, (x, xc) in enumerate(zip(X, Xc)):
            z = x[2]
            dproj = sdd / z * np.array([[1.0, 0.0, -x[0] / z], [0.0, 1.0, -x[1] / z]])
            dX = np.hstack([-skew(xc), np.eye(3)])
            # residual rows are (row, col) = (y, x) on the detector
            J[2 * i:2 * i + 2] = (dproj @ dX)[::-1]
        A = J.T @ J
        b = -J.T @ res
        step_taken = False
        for _ in range(30):
            try:
                delta = np.linalg.solve(A + mu * np.diag(np.diag(A) + 1e-12), b)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            T = RigidPose.from_translation(c)
            upd = T @ RigidPose(so3_exp(delta[:3]), delta[3:]) @ T.inverse()
            cand = upd @ pose
            r_new = _pnp_residuals(cand, P3, obs, g)
            c_new = float(r_new @ r_new)
            if c_new <= cost:
                pose, res, cost = cand, r_new, c_new
                mu = max(mu / 3, 1e-12)
                step_taken = True
                break
            mu *= 4
        if not step_taken or np.linalg.norm(delta) < tol:
            converged = True
            break
    n = len(P3)
    return PnPResult(pose, float(np.sqrt(cost / n)), float(np.sqrt(cost0 / n)), it, converged)


def solve_pnp(corr, g: ProjectionGeometry, init: RigidPose, **kw) -> RigidPose:
    """Pose from >= 4 (3D point mm, 2D pixel) correspondences.

    ``corr`` is a sequence of ``(p3d, p2d)`` pairs or a pair of arrays.
    """
    if isinstance(corr, tuple) and len(corr) == 2 and np.ndim(corr[0]) == 2:
        p3d, p2d = corr
    else:
        corr = list(corr)
        if len(corr) < 4:
            raise ValueError("PnP needs at least 4 correspondences")
        p3d = [c[0] for c in corr]
        p2d = [c[1] for c in corr]
    res = solve_pnp_detailed(p3d, p2d, g, init, **kw)
    if res.diverged:
        log.warning("PnP diverged: rms %.3f mm > initial %.3f mm", res.rms_mm, res.initial_rms_mm)
    return res.pose


# --------------------------------------------------------------------------
# AP initialization


def _ap_rotation(app: AppFrame) -> np.ndarray:
    return WORLD_FROM_APP_AP @ app.axes.T


def _place(rot, point3d, anchor, depth_point, depth_ratio, g):
    """Translation putting ``depth_point`` at ``depth_ratio`` and ``point3d`` on ``anchor``."""
    tz = depth_ratio * g.src_to_det - (rot @ depth_point)[2]
    q = rot @ point3d
    zq = q[2] + tz
    if zq <= 0:
        raise ValueError("anchor landmark would lie behind the source")
    det = g.pixel_to_detector(anchor[0], anchor[1])
    tx = det[0] * zq / g.src_to_det - q[0]
    ty = det[1] * zq / g.src_to_det - q[1]
    return np.array([tx, ty, tz])


def select_init_landmark(available: Iterable[str], preference: Sequence[str] = INIT_PREFERENCE) -> str:
    available = set(available)
    for name in preference:
        if name in available:
            return name
    raise ValueError("none of the preferred landmarks is available")


def init_ap_single_landmark(lms3d: Mapping[str, np.ndarray], anchor2d, g: ProjectionGeometry,
                            app: AppFrame, depth_ratio: float = 0.7,
                            preference: Sequence[str] = INIT_PREFERENCE) -> RigidPose:
    """Nominal AP pelvis pose from one 2D landmark.

    The APP is made parallel to the detector (patient-up), the centroid of
    the 3D landmarks is put at ``depth_ratio`` of the source-to-detector
    distance, and the in-plane translation makes one landmark project onto
    its 2D location.

    ``anchor2d`` is either a mapping of detected 2D landmarks, from which
    the first entry in ``preference`` with a 3D counterpart is used, or
    ``None`` to put the ASIS/SPS centroid at the image centre.
    """
    rot = _ap_rotation(app)
    pts = np.array([np.asarray(v, dtype=float) for v in lms3d.values()])
    if anchor2d is None:
        missing = [k for k in APP_LANDMARKS if k not in lms3d]
        if missing:
            raise ValueError(f"centroid initialization needs {', '.join(missing)}")
        c = np.mean([lms3d[k] for k in APP_LANDMARKS], axis=0)
        centre = ((g.rows - 1) / 2.0, (g.cols - 1) / 2.0)
        return RigidPose(rot, _place(rot, c, centre, c, depth_ratio, g))
    name = select_init_landmark([k for k in anchor2d if k in lms3d], preference)
    t = _place(rot, np.asarray(lms3d[name], float), np.asarray(anchor2d[name], float),
               pts.mean(axis=0), depth_ratio, g)
    return RigidPose(rot, t)


def init_ap_centroid(lms3d, g: ProjectionGeometry, app: AppFrame, depth_ratio: float = 0.7) -> RigidPose:
    """ASIS/SPS centroid on the image centre (intensity-only initialization)."""
    return init_ap_single_landmark(lms3d, None, g, app, depth_ratio)
