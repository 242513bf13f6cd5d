"""The projection operator: DRRs, projected labels and projected landmarks.

Rays run from the source (world origin) to each detector pixel centre.
Each object is sampled in its own frame: the ray is mapped through the
inverse of the object's pose and clipped to the hull of the voxel centres,
then integrated with the midpoint rule at (at most) ``step_mm`` spacing
using trilinear interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numba
import numpy as np

from .geometry import ProjectionGeometry, RigidPose, project_points
from .imaging import (FEMUR_L, FEMUR_R, HEMIPELVIS_L, HEMIPELVIS_R, SACRUM, VERTEBRAE,
                      Image2D, LabelImage2D, Volume3D)

OBJECT_NAMES = ("pelvis", "femur_L", "femur_R")
LANDMARK_OWNER = {"FH_L": "femur_L", "FH_R": "femur_R"}


def landmark_owner(name: str) -> str:
    return LANDMARK_OWNER.get(name, "pelvis")


@dataclass(frozen=True, eq=False)
class ObjectModel:
    name: str
    intensity_volume: Volume3D
    label_volume: Volume3D
    landmarks3d: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in OBJECT_NAMES:
            raise ValueError(f"unknown object name {self.name!r}")
        iv, lv = self.intensity_volume, self.label_volume
        if iv.dims != lv.dims or iv.spacing != lv.spacing or iv.origin != lv.origin:
            raise ValueError("intensity and label volumes must share one grid")
        if min(iv.dims) < 2:
            raise ValueError("object volumes need at least two voxels per axis")
        object.__setattr__(self, "landmarks3d",
                           {k: np.asarray(v, dtype=float) for k, v in self.landmarks3d.items()})


@dataclass(frozen=True, eq=False)
class MultiBodyPose:
    """World-from-CT poses of the pelvis and both femurs."""

    pelvis: RigidPose = field(default_factory=RigidPose.identity)
    femur_L: RigidPose = field(default_factory=RigidPose.identity)
    femur_R: RigidPose = field(default_factory=RigidPose.identity)

    def of(self, name: str) -> RigidPose:
        return getattr(self, name)

    def with_pose(self, name: str, pose: RigidPose) -> "MultiBodyPose":
        return replace(self, **{name: pose})

    def with_pelvis_rigid(self, pelvis: RigidPose) -> "MultiBodyPose":
        """Move the pelvis and carry both femurs with it (relative poses kept)."""
        delta = pelvis @ self.pelvis.inverse()
        return MultiBodyPose(pelvis, delta @ self.femur_L, delta @ self.femur_R)

    def femur_relative(self, side: str) -> RigidPose:
        return self.pelvis.inverse() @ self.of(f"femur_{side}")

    def to_dict(self) -> dict:
        return {k: self.of(k).matrix().tolist() for k in OBJECT_NAMES}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MultiBodyPose":
        return cls(**{k: RigidPose.from_matrix(d[k]) for k in OBJECT_NAMES if k in d})

    @classmethod
    def rigid(cls, pose: RigidPose) -> "MultiBodyPose":
        return cls(pose, pose, pose)


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, nogil=True)
def _clip_segment(a, b, hi):
    """Parametric interval of ``a + u (b - a)``, u in [0, 1], inside [0, hi]^3."""
    u0, u1 = 0.0, 1.0
    for ax in range(3):
        d = b[ax] - a[ax]
        if abs(d) < 1e-15:
            if a[ax] < 0.0 or a[ax] > hi[ax]:
                return 1.0, 0.0
        else:
            t0 = (0.0 - a[ax]) / d
            t1 = (hi[ax] - a[ax]) / d
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > u0:
                u0 = t0
            if t1 < u1:
                u1 = t1
    return u0, u1


@numba.njit(cache=True, nogil=True, fastmath=True)
def _trilinear(vol, x, y, z):
    nx, ny, nz = vol.shape
    i = int(np.floor(x))
    j = int(np.floor(y))
    k = int(np.floor(z))
    i = min(max(i, 0), nx - 2)
    j = min(max(j, 0), ny - 2)
    k = min(max(k, 0), nz - 2)
    fx, fy, fz = x - i, y - j, z - k
    c00 = vol[i, j, k] * (1 - fx) + vol[i + 1, j, k] * fx
    c10 = vol[i, j + 1, k] * (1 - fx) + vol[i + 1, j + 1, k] * fx
    c01 = vol[i, j, k + 1] * (1 - fx) + vol[i + 1, j, k + 1] * fx
    c11 = vol[i, j + 1, k + 1] * (1 - fx) + vol[i + 1, j + 1, k + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@numba.njit(cache=True, nogil=True, fastmath=True)
def _drr_kernel(vol, origin, inv_sp, rot_inv, t_inv, det, step, out):
    hi = np.empty(3)
    for ax in range(3):
        hi[ax] = vol.shape[ax] - 1.0
    a = np.empty(3)
    b = np.empty(3)
    for ax in range(3):
        a[ax] = (t_inv[ax] - origin[ax]) * inv_sp[ax]
    for p in range(det.shape[0]):
        for ax in range(3):
            q = rot_inv[ax, 0] * det[p, 0] + rot_inv[ax, 1] * det[p, 1] + rot_inv[ax, 2] * det[p, 2] + t_inv[ax]
            b[ax] = (q - origin[ax]) * inv_sp[ax]
        u0, u1 = _clip_segment(a, b, hi)
        if u1 <= u0:
            continue
        length = np.sqrt(det[p, 0] ** 2 + det[p, 1] ** 2 + det[p, 2] ** 2) * (u1 - u0)
        n = max(1, int(np.ceil(length / step - 1e-12)))
        du = (u1 - u0) / n
        acc = 0.0
        for s in range(n):
            u = u0 + (s + 0.5) * du
            acc += _trilinear(vol, a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]),
                              a[2] + u * (b[2] - a[2]))
        out[p] += acc * (length / n)


@numba.njit(cache=True, nogil=True)
def _label_kernel(lab, origin, inv_sp, rot_inv, t_inv, det, step, first_hit):
    """Record, per ray and class, the smallest ray parameter where the
    trilinearly interpolated class indicator exceeds 0.5."""
    nx, ny, nz = lab.shape
    hi = np.empty(3)
    for ax in range(3):
        hi[ax] = lab.shape[ax] - 1.0
    a = np.empty(3)
    b = np.empty(3)
    w = np.zeros(first_hit.shape[1])
    for ax in range(3):
        a[ax] = (t_inv[ax] - origin[ax]) * inv_sp[ax]
    for p in range(det.shape[0]):
        for ax in range(3):
            q = rot_inv[ax, 0] * det[p, 0] + rot_inv[ax, 1] * det[p, 1] + rot_inv[ax, 2] * det[p, 2] + t_inv[ax]
            b[ax] = (q - origin[ax]) * inv_sp[ax]
        u0, u1 = _clip_segment(a, b, hi)
        if u1 <= u0:
            continue
        length = np.sqrt(det[p, 0] ** 2 + det[p, 1] ** 2 + det[p, 2] ** 2) * (u1 - u0)
        n = max(1, int(np.ceil(length / step - 1e-12)))
        du = (u1 - u0) / n
        for s in range(n):
            u = u0 + (s + 0.5) * du
            x = a[0] + u * (b[0] - a[0])
            y = a[1] + u * (b[1] - a[1])
            z = a[2] + u * (b[2] - a[2])
            i = min(max(int(np.floor(x)), 0), nx - 2)
            j = min(max(int(np.floor(y)), 0), ny - 2)
            k = min(max(int(np.floor(z)), 0), nz - 2)
            fx, fy, fz = x - i, y - j, z - k
            w[:] = 0.0
            for di in range(2):
                wx = fx if di else 1.0 - fx
                for dj in range(2):
                    wy = fy if dj else 1.0 - fy
                    for dk in range(2):
                        wz = fz if dk else 1.0 - fz
                        w[lab[i + di, j + dj, k + dk]] += wx * wy * wz
            for c in range(1, w.shape[0]):
                if w[c] > 0.5 and u < first_hit[p, c]:
                    first_hit[p, c] = u


def _object_args(vol: Volume3D, pose: RigidPose):
    inv = pose.inverse()
    return (np.asarray(vol.origin), 1.0 / np.asarray(vol.spacing),
            np.ascontiguousarray(inv.rotation), np.ascontiguousarray(inv.translation))


def _objects(objs) -> list[ObjectModel]:
    return list(objs.values()) if isinstance(objs, Mapping) else list(objs)


_det_cache: dict[ProjectionGeometry, np.ndarray] = {}


def _detector_points(g: ProjectionGeometry) -> np.ndarray:
    pts = _det_cache.get(g)
    if pts is None:
        if len(_det_cache) > 64:
            _det_cache.clear()
        pts = _det_cache[g] = np.ascontiguousarray(g.pixel_grid().reshape(-1, 3))
    return pts


def render_drr(objs: Iterable[ObjectModel] | Mapping[str, ObjectModel], g: ProjectionGeometry,
               pose: MultiBodyPose, step_mm: float = 1.0) -> Image2D:
    """Digitally reconstructed radiograph: summed line integrals of all objects."""
    if step_mm <= 0:
        raise ValueError("step_mm must be positive")
    det = _detector_points(g)
    out = np.zeros(det.shape[0])
    for ob in _objects(objs):
        vol = ob.intensity_volume.voxels
        if not vol.flags.c_contiguous:
            vol = np.ascontiguousarray(vol)
        _drr_kernel(vol, *_object_args(ob.intensity_volume, pose.of(ob.name)), det, float(step_mm), out)
    return Image2D(out.reshape(g.rows, g.cols), g.pixel_spacing)


def project_labels(objs, g: ProjectionGeometry, pose: MultiBodyPose,
                   step_mm: float = 1.0) -> LabelImage2D:
    """Per-pixel anatomy label with femurs > hemipelves > vertebrae > sacrum.

    Ties between the two femurs or the two hemipelves go to the structure
    first met along the ray (closest to the source).
    """
    det = _detector_points(g)
    first = np.full((det.shape[0], 7), np.inf)
    for ob in _objects(objs):
        lab = np.ascontiguousarray(ob.label_volume.voxels.astype(np.uint8, copy=False))
        if not lab.any():
            continue
        _label_kernel(lab, *_object_args(ob.label_volume, pose.of(ob.name)), det, float(step_mm), first)
    hit = np.isfinite(first)
    out = np.zeros(det.shape[0], dtype=np.uint8)
    for near, far, default in ((FEMUR_L, FEMUR_R, None), (HEMIPELVIS_L, HEMIPELVIS_R, None)):
        both = hit[:, near] & hit[:, far]
        sel_near = (hit[:, near] & ~hit[:, far]) | (both & (first[:, near] <= first[:, far]))
        sel_far = (hit[:, far] & ~hit[:, near]) | (both & (first[:, far] < first[:, near]))
        free = out == 0
        out[free & sel_near] = near
        out[free & sel_far] = far
    for cls in (VERTEBRAE, SACRUM):
        out[(out == 0) & hit[:, cls]] = cls
    return LabelImage2D(out.reshape(g.rows, g.cols), g.pixel_spacing)


@dataclass(frozen=True)
class ProjectedLandmark:
    pixel: np.ndarray  # (row, col)
    visible: bool
    depth_ratio: float


def project_landmarks(objs, g: ProjectionGeometry, pose: MultiBodyPose) -> dict[str, ProjectedLandmark]:
    """Project every object's landmarks with that object's pose.

    A landmark is visible iff it lands inside ``[0, rows-1] x [0, cols-1]``
    and lies in front of the source.
    """
    out = {}
    for ob in _objects(objs):
        for name, p in ob.landmarks3d.items():
            pr = project_points(g, pose.of(ob.name), p)
            vis = bool(pr.valid) and bool(g.in_bounds(pr.pixel))
            out[name] = ProjectedLandmark(np.asarray(pr.pixel, dtype=float), vis, float(pr.depth_ratio))
    return out


def all_landmarks(objs) -> dict[str, np.ndarray]:
    """Union of the objects' CT-frame landmarks."""
    lms = {}
    for ob in _objects(objs):
        lms.update(ob.landmarks3d)
    return lms


@dataclass(frozen=True, eq=False)
class Scene:
    """The pelvis and femur objects of one subject, sharing a CT frame."""

    objects: tuple

    def __post_init__(self):
        objs = tuple(_objects(self.objects))
        names = [o.name for o in objs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate object names in scene")
        object.__setattr__(self, "objects", objs)

    def __iter__(self):
        return iter(self.objects)

    def __len__(self):
        return len(self.objects)

    def object(self, name: str) -> ObjectModel:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)

    @property
    def landmarks(self) -> dict[str, np.ndarray]:
        return all_landmarks(self.objects)

    def subset(self, names) -> "Scene":
        return Scene(tuple(o for o in self.objects if o.name in names))

    def fh_midpoint(self) -> np.ndarray:
        lms = self.landmarks
        return 0.5 * (lms["FH_L"] + lms["FH_R"])


def write_scene(directory: str, scene: Scene) -> None:
    """One ``<name>_ct`` / ``<name>_labels`` volume pair per object plus ``landmarks.json``."""
    import json
    import os

    from .imaging import write_volume

    os.makedirs(directory, exist_ok=True)
    lms = {}
    for ob in scene:
        write_volume(os.path.join(directory, f"{ob.name}_ct"), ob.intensity_volume)
        write_volume(os.path.join(directory, f"{ob.name}_labels"), ob.label_volume)
        lms.update({k: {"object": ob.name, "position_mm": np.asarray(v).tolist()}
                    for k, v in ob.landmarks3d.items()})
    with open(os.path.join(directory, "landmarks.json"), "w") as fh:
        json.dump(lms, fh, indent=2)


def read_scene(directory: str) -> Scene:
    import json
    import os

    from .imaging import read_volume

    path = os.path.join(directory, "landmarks.json")
    with open(path) as fh:
        lms = json.load(fh)
    objs = []
    for name in OBJECT_NAMES:
        ct = os.path.join(directory, f"{name}_ct.json")
        if not os.path.exists(ct):
            continue
        own = {k: np.asarray(v["position_mm"], float) for k, v in lms.items() if v.get("object") == name}
        objs.append(ObjectModel(name, read_volume(ct),
                                read_volume(os.path.join(directory, f"{name}_labels.json")), own))
    if not objs:
        raise FileNotFoundError(f"no object volumes in {directory}")
    return Scene(tuple(objs))
