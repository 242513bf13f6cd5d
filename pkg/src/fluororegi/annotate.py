"""Ground-truth annotation sets and training-time augmentation.

Dataset layout, one directory per image::

    image.raw / image.json          preprocessed intensities (f32)
    labels.raw / labels.json        projected segmentation (u8)
    heatmaps.raw / heatmaps.json    landmark heatmaps stacked along z (f32)
    landmarks.json                  {name: {row, col, visible}} in heatmap order
    provenance.json                 pose, geometry, sigma, seed, augmentation record
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage

from .geometry import LANDMARK_NAMES, ProjectionGeometry
from .imaging import Image2D, LabelImage2D, read_image, read_raw, write_image, write_raw
from .landmarks import HEATMAP_SIGMA_PX, make_heatmap
from .projector import MultiBodyPose, project_labels, project_landmarks


@dataclass
class LandmarkAnnotation:
    pixel: np.ndarray   # (row, col), sub-pixel
    visible: bool


@dataclass
class AnnotationSet:
    labels: LabelImage2D
    landmarks: dict                     # name -> LandmarkAnnotation
    heatmaps: dict                      # name -> (rows, cols) array
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, lm in self.landmarks.items():
            if not lm.visible and np.any(self.heatmaps.get(name, 0)):
                raise ValueError(f"heatmap of invisible landmark {name} must be zero")

    @property
    def shape(self):
        return self.labels.shape

    def visible_pixels(self) -> dict[str, np.ndarray]:
        return {k: v.pixel for k, v in self.landmarks.items() if v.visible}

    def truth(self) -> dict[str, tuple]:
        """``{name: (pixel, visible)}`` as used by landmark statistics."""
        return {k: (v.pixel, v.visible) for k, v in self.landmarks.items()}


def _ordered(names):
    known = [n for n in LANDMARK_NAMES if n in names]
    return known + sorted(n for n in names if n not in LANDMARK_NAMES)


def generate_annotations(scene, g: ProjectionGeometry, gt_pose: MultiBodyPose,
                         sigma_px: float = HEATMAP_SIGMA_PX, step_mm: float = 1.0,
                         snap_heatmaps: bool = True) -> AnnotationSet:
    """Project labels and landmarks of ``scene`` at ``gt_pose``.

    Landmarks off the detector (or behind the source) are invisible with
    all-zero heatmaps.  Heatmaps are centred on the nearest pixel when
    ``snap_heatmaps`` is set so that their peak is a pixel-exact mode;
    the stored landmark coordinates stay sub-pixel.
    """
    labels = project_labels(scene, g, gt_pose, step_mm)
    proj = project_landmarks(scene, g, gt_pose)
    lms, hms = {}, {}
    dims = (g.rows, g.cols)
    for name in _ordered(proj):
        p = proj[name]
        lms[name] = LandmarkAnnotation(np.asarray(p.pixel, float), bool(p.visible))
        centre = (np.round(p.pixel) if snap_heatmaps else p.pixel) if p.visible else None
        hms[name] = make_heatmap(centre, dims, sigma_px).values
    prov = {"pose": gt_pose.to_dict(), "geometry": g.to_dict(), "sigma_px": sigma_px,
            "step_mm": step_mm, "snap_heatmaps": snap_heatmaps}
    return AnnotationSet(labels, lms, hms, prov)


# --------------------------------------------------------------------------
# dataset I/O


def write_annotated(directory: str, img: Optional[Image2D], ann: AnnotationSet) -> None:
    os.makedirs(directory, exist_ok=True)
    if img is not None:
        write_image(os.path.join(directory, "image"), img)
    write_image(os.path.join(directory, "labels"), ann.labels)
    names = list(ann.heatmaps)
    stack = np.stack([ann.heatmaps[n] for n in names], axis=0) if names else np.zeros((0,) + ann.shape)
    # stored x = column, y = row, z = landmark index
    write_raw(os.path.join(directory, "heatmaps"), np.transpose(stack, (2, 1, 0)).astype(np.float32),
              (1.0, 1.0, 1.0))
    with open(os.path.join(directory, "landmarks.json"), "w") as fh:
        json.dump({n: {"row": float(ann.landmarks[n].pixel[0]), "col": float(ann.landmarks[n].pixel[1]),
                       "visible": bool(ann.landmarks[n].visible)} for n in names}, fh, indent=2)
    with open(os.path.join(directory, "provenance.json"), "w") as fh:
        json.dump(ann.provenance, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def read_annotated(directory: str) -> tuple[Optional[Image2D], AnnotationSet]:
    img_path = os.path.join(directory, "image.json")
    img = read_image(img_path) if os.path.exists(img_path) else None
    labels = read_image(os.path.join(directory, "labels"))
    with open(os.path.join(directory, "landmarks.json")) as fh:
        lm = json.load(fh)
    arr, _ = read_raw(os.path.join(directory, "heatmaps.json"))
    stack = np.transpose(arr, (2, 1, 0)).astype(float)
    names = list(lm)
    lms = {n: LandmarkAnnotation(np.array([lm[n]["row"], lm[n]["col"]], float), bool(lm[n]["visible"]))
           for n in names}
    hms = {n: stack[i] for i, n in enumerate(names)}
    prov_path = os.path.join(directory, "provenance.json")
    prov = {}
    if os.path.exists(prov_path):
        with open(prov_path) as fh:
            prov = json.load(fh)
    return img, AnnotationSet(labels, lms, hms, prov)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    apply_prob: float = 0.5
    invert_prob: float = 0.5
    noise_sigma: tuple = (0.005, 0.01)      # fraction of the intensity range
    gamma: tuple = (0.7, 1.3)
    translation_px: tuple = (0.0, 20.0)
    rotation_deg: tuple = (-5.0, 5.0)
    shear_deg: tuple = (-2.0, 2.0)
    scale: tuple = (0.9, 1.1)
    corrupt_prob: float = 0.25
    corrupt_regions: tuple = (1, 5)
    corrupt_dim_frac: float = 0.15
    corrupt_noise_frac: float = 0.2
    pad_ratio: float = 384.0 / 180.0

    def __post_init__(self):
        for p in (self.apply_prob, self.invert_prob, self.corrupt_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentParams":
        """Always applied, but every operation is a no-op."""
        return cls(apply_prob=1.0, invert_prob=0.0, noise_sigma=(0.0, 0.0), gamma=(1.0, 1.0),
                   translation_px=(0.0, 0.0), rotation_deg=(0.0, 0.0), shear_deg=(0.0, 0.0),
                   scale=(1.0, 1.0), corrupt_prob=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def affine_matrix(shape, translation, rotation_deg: float, shear_deg: float, scale: float) -> np.ndarray:
    """3x3 map from input (row, col, 1) to output pixel coordinates, about the image centre."""
    c = np.array([(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0])
    a = np.deg2rad(rotation_deg)
    # (row, col) = (y, x); rotation/shear built in (x, y) then reordered
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    Sh = np.array([[1.0, np.tan(np.deg2rad(shear_deg))], [0.0, 1.0]])
    L_xy = R @ Sh * scale
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    L = P @ L_xy @ P
    M = np.eye(3)
    M[:2, :2] = L
    M[:2, 2] = c + np.asarray(translation, float) - L @ c
    return M


def _warp(a: np.ndarray, M: np.ndarray, order: int, pad: int, pad_mode: str) -> np.ndarray:
    Minv = np.linalg.inv(M)
    if pad > 0 and pad_mode == "reflect":
        src = np.pad(a, pad, mode="symmetric")
        offset = Minv[:2, 2] + pad
    else:
        src, offset = a, Minv[:2, 2]
    return ndimage.affine_transform(src, Minv[:2, :2], offset=offset, order=order,
                                    mode="constant", cval=0.0, output_shape=a.shape)


def _is_identity(M) -> bool:
    return np.array_equal(M, np.eye(3))


def sample_augmentation(shape, params: AugmentParams, rng: np.random.Generator) -> dict:
    """Draw every random choice up front, in the order the operations are applied."""
    rec: dict = {"applied": bool(rng.random() < params.apply_prob)}
    if not rec["applied"]:
        return rec
    rec["invert"] = bool(rng.random() < params.invert_prob)
    rec["noise_sigma"] = float(rng.uniform(*params.noise_sigma))
    rec["noise_seed"] = int(rng.integers(2**63))
    rec["gamma"] = float(rng.uniform(*params.gamma))
    ang = rng.uniform(0.0, 2.0 * np.pi)
    mag = rng.uniform(*params.translation_px)
    rec["translation"] = [float(mag * np.sin(ang)), float(mag * np.cos(ang))]   # (row, col)
    rec["rotation_deg"] = float(rng.uniform(*params.rotation_deg))
    rec["shear_deg"] = float(rng.uniform(*params.shear_deg))
    rec["scale"] = float(rng.uniform(*params.scale))
    regions = []
    if rng.random() < params.corrupt_prob:
        n = int(rng.integers(params.corrupt_regions[0], params.corrupt_regions[1] + 1))
        d = params.corrupt_dim_frac * shape[1]
        tries = 0
        while len(regions) < n and tries < 10000:
            tries += 1
            h, w = (int(round(x)) for x in rng.normal(d, d, 2))
            r0 = int(rng.integers(0, shape[0]))
            c0 = int(rng.integers(0, shape[1]))
            if h >= 1 and w >= 1 and r0 + h <= shape[0] and c0 + w <= shape[1]:
                regions.append((r0, c0, h, w, int(rng.integers(2**63))))
    rec["corruption"] = regions
    return rec


def apply_augmentation(img: Image2D, ann: AnnotationSet, rec: Mapping,
                       params: AugmentParams = AugmentParams()) -> tuple[Image2D, AnnotationSet]:
    if not rec.get("applied"):
        return img, ann
    x = np.asarray(img.pixels, dtype=float).copy()
    lo, hi = float(x.min()), float(x.max())
    if rec["invert"]:
        x = hi + lo - x
    if rec["noise_sigma"] > 0:
        x = x + np.random.default_rng(rec["noise_seed"]).normal(0.0, rec["noise_sigma"] * (hi - lo), x.shape)
    if rec["gamma"] != 1.0:
        a, b = float(x.min()), float(x.max())
        if b > a:
            x = a + (b - a) * ((x - a) / (b - a)) ** rec["gamma"]
    M = affine_matrix(x.shape, rec["translation"], rec["rotation_deg"], rec["shear_deg"], rec["scale"])
    labels, lms, hms = ann.labels.labels, dict(ann.landmarks), dict(ann.heatmaps)
    if not _is_identity(M):
        pad = int(np.ceil(max(x.shape) * (params.pad_ratio - 1.0) / 2.0))
        x = _warp(x, M, 1, pad, "reflect")
        labels = _warp(labels.astype(float), M, 0, 0, "constant").astype(np.uint8)
        lms, hms = {}, {}
        for name, lm in ann.landmarks.items():
            p = M[:2, :2] @ lm.pixel + M[:2, 2]
            vis = lm.visible and 0.0 <= p[0] <= x.shape[0] - 1 and 0.0 <= p[1] <= x.shape[1] - 1
            lms[name] = LandmarkAnnotation(p, bool(vis))
            hms[name] = _warp(ann.heatmaps[name], M, 1, 0, "constant") if vis else np.zeros(x.shape)
    for r0, c0, h, w, s in rec.get("corruption", []):
        reg = x[r0:r0 + h, c0:c0 + w]
        m = float(reg.max() - reg.min())
        x[r0:r0 + h, c0:c0 + w] = reg + np.random.default_rng(s).normal(0.0, params.corrupt_noise_frac * m, reg.shape)
    prov = dict(ann.provenance)
    prov["augmentation"] = dict(rec)
    return Image2D(x, img.pixel_spacing), AnnotationSet(LabelImage2D(labels, ann.labels.pixel_spacing), lms, hms, prov)


def augment(img: Image2D, ann: AnnotationSet, params: AugmentParams = AugmentParams(),
            seed: int = 0) -> tuple[Image2D, AnnotationSet]:
    """Randomly augment an image and apply the same geometric warp to its annotations."""
    rec = sample_augmentation(img.shape, params, np.random.default_rng(seed))
    return apply_augmentation(img, ann, rec, params)
