"""Procedural pelvis/femur phantom used in place of a segmented CT.

Bones are unions of ellipsoids and capsules in an LPS frame centred on the
volume (x patient left, y posterior, z superior, mm).  Each bone gets a
dense cortical shell, a lighter textured interior and the label classes
of the real segmentation.  Every landmark sits inside its owning bone.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .imaging import (FEMUR_L, FEMUR_R, HEMIPELVIS_L, HEMIPELVIS_R, SACRUM, VERTEBRAE, Volume3D)
from .projector import ObjectModel, Scene

# left-side positions (mm); right side mirrors x
LEFT_LANDMARKS = {
    "FH": (65.0, -5.0, -15.0),
    "ASIS": (100.0, -25.0, 50.0),
    "SPS": (12.0, -40.0, -35.0),
    "IPS": (12.0, -33.0, -55.0),
    "IOF": (41.0, -14.5, -75.0),
    "MOF": (24.0, -30.0, -47.0),
    "GSN": (45.0, 35.0, 25.0),
}
FEMORAL_HEAD_RADIUS = 22.0
KNOB_RADIUS = 7.0


@dataclass
class PhantomSpec:
    seed: int = 0
    n_vox: int = 64
    spacing_mm: float = 4.0
    scale: float = 1.0
    texture: float = 0.3
    cortical: float = 1.0
    cancellous: float = 0.45
    mu_per_mm: float = 0.02
    landmarks: dict = field(default_factory=dict)   # overrides, full names -> xyz mm

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise KeyError(f"unknown phantom key(s): {', '.join(sorted(bad))}")
        return cls(**d)


def phantom_landmarks(spec: PhantomSpec) -> dict[str, np.ndarray]:
    out = {}
    for base, (x, y, z) in LEFT_LANDMARKS.items():
        out[f"{base}_L"] = np.array([x, y, z]) * spec.scale
        out[f"{base}_R"] = np.array([-x, y, z]) * spec.scale
    for k, v in spec.landmarks.items():
        out[k] = np.asarray(v, dtype=float)
    return out


class _Grid:
    def __init__(self, n: int, sp: float):
        self.origin = -(n - 1) * sp / 2.0
        ax = self.origin + sp * np.arange(n)
        self.x, self.y, self.z = np.meshgrid(ax, ax, ax, indexing="ij", sparse=True)
        self.shape = (n, n, n)
        self.sp = sp

    def ellipsoid(self, c, r, rot=None):
        dx, dy, dz = self.x - c[0], self.y - c[1], self.z - c[2]
        if rot is not None:
            dx, dy, dz = (rot[0, 0] * dx + rot[1, 0] * dy + rot[2, 0] * dz,
                          rot[0, 1] * dx + rot[1, 1] * dy + rot[2, 1] * dz,
                          rot[0, 2] * dx + rot[1, 2] * dy + rot[2, 2] * dz)
        return (dx / r[0]) ** 2 + (dy / r[1]) ** 2 + (dz / r[2]) ** 2 <= 1.0

    def sphere(self, c, r):
        return self.ellipsoid(c, (r, r, r))

    def capsule(self, a, b, r):
        a, b = np.asarray(a, float), np.asarray(b, float)
        d = b - a
        t = ((self.x - a[0]) * d[0] + (self.y - a[1]) * d[1] + (self.z - a[2]) * d[2]) / (d @ d)
        t = np.clip(t, 0.0, 1.0)
        px, py, pz = a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]
        return (self.x - px) ** 2 + (self.y - py) ** 2 + (self.z - pz) ** 2 <= r * r


def _rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])


def _hemipelvis(G: _Grid, s: float, k: float, lms) -> np.ndarray:
    m = np.zeros(G.shape, bool)
    # iliac wing: a thin plate from the ASIS back towards the sacroiliac joint
    m |= G.ellipsoid((s * 72 * k, 8 * k, 45 * k), (46 * k, 8 * k, 40 * k), _rot_z(s * 40.0))
    m |= G.ellipsoid((s * 68 * k, 0.0, 0.0), (26 * k, 28 * k, 35 * k))
    m |= G.capsule((s * 70 * k, 10 * k, 30 * k), (s * 45 * k, 38 * k, 20 * k), 12 * k)
    m |= G.capsule((s * 45 * k, 38 * k, 20 * k), (s * 58 * k, 22 * k, -22 * k), 9 * k)
    # pubic rami, symphysis body and ischium around the obturator foramen
    m |= G.capsule((s * 55 * k, -15 * k, -25 * k), (s * 11 * k, -38 * k, -38 * k), 9 * k)
    m |= G.capsule((s * 11 * k, -38 * k, -38 * k), (s * 11 * k, -33 * k, -55 * k), 8 * k)
    m |= G.capsule((s * 11 * k, -33 * k, -55 * k), (s * 45 * k, -12 * k, -78 * k), 8 * k)
    m |= G.capsule((s * 62 * k, 5 * k, -30 * k), (s * 46 * k, -8 * k, -78 * k), 11 * k)
    side = "L" if s > 0 else "R"
    for name, p in lms.items():
        if name.endswith("_" + side) and not name.startswith("FH"):
            m |= G.sphere(p, KNOB_RADIUS * k)
    # acetabular cup
    m &= ~G.sphere(lms["FH_" + side], (FEMORAL_HEAD_RADIUS + 4.0) * k)
    return m


def _femur(G: _Grid, s: float, k: float, fh) -> np.ndarray:
    m = G.sphere(fh, FEMORAL_HEAD_RADIUS * k)
    # neck with ~15 deg anteversion: the head sits anterior (-y) of the neck base
    m |= G.capsule(fh, (s * 88 * k, 8 * k, -48 * k), 13 * k)
    m |= G.ellipsoid((s * 98 * k, 12 * k, -45 * k), (14 * k, 14 * k, 18 * k))
    m |= G.capsule((s * 90 * k, 4 * k, -50 * k), (s * 98 * k, 2 * k, -124 * k), 14 * k)
    # lesser trochanter, posteromedial below the neck
    m |= G.sphere((s * 80 * k, 18 * k, -72 * k), 8 * k)
    return m


def _intensity(mask: np.ndarray, texture: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    inner = ndimage.binary_erosion(mask)
    v = np.where(inner, spec.cancellous, spec.cortical) * mask
    v = v * (1.0 + spec.texture * texture)
    v = ndimage.gaussian_filter(v, 0.6)
    return np.clip(v, 0.0, None) * spec.mu_per_mm


def _crop(name, inten, lab, G: _Grid, lms, margin: int = 2) -> ObjectModel:
    idx = np.argwhere(lab > 0)
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + margin + 1, np.array(G.shape))
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    origin = tuple(G.origin + G.sp * lo)
    sp = (G.sp,) * 3
    return ObjectModel(name, Volume3D(inten[sl].astype(np.float64), sp, origin),
                       Volume3D(lab[sl].astype(np.uint8), sp, origin), lms)


def make_phantom(spec: Optional[PhantomSpec] = None) -> Scene:
    """Deterministic phantom scene (pelvis + both femurs) for ``spec``."""
    spec = spec or PhantomSpec()
    k = spec.scale
    G = _Grid(spec.n_vox, spec.spacing_mm)
    lms = phantom_landmarks(spec)
    rng = np.random.default_rng(spec.seed)
    texture = ndimage.gaussian_filter(rng.standard_normal(G.shape), 1.2)
    texture /= texture.std() + 1e-12

    hl, hr = _hemipelvis(G, 1.0, k, lms), _hemipelvis(G, -1.0, k, lms)
    sacrum = G.ellipsoid((0.0, 40 * k, 25 * k), (38 * k, 16 * k, 40 * k))
    vert = np.zeros(G.shape, bool)
    for z in (80.0, 106.0):
        vert |= G.ellipsoid((0.0, 25 * k, z * k), (24 * k, 18 * k, 11 * k))
    plab = np.zeros(G.shape, np.uint8)
    plab[sacrum] = SACRUM
    plab[vert] = VERTEBRAE
    plab[hr] = HEMIPELVIS_R
    plab[hl] = HEMIPELVIS_L
    pel_lms = {n: p for n, p in lms.items() if not n.startswith("FH")}
    objs = [_crop("pelvis", _intensity(plab > 0, texture, spec), plab, G, pel_lms)]
    for s, name, cls in ((1.0, "femur_L", FEMUR_L), (-1.0, "femur_R", FEMUR_R)):
        fh_name = "FH_" + name[-1]
        m = _femur(G, s, k, lms[fh_name])
        lab = np.where(m, cls, 0).astype(np.uint8)
        objs.append(_crop(name, _intensity(m, texture, spec), lab, G, {fh_name: lms[fh_name]}))
    return Scene(tuple(objs))
