"""Rigid-pose algebra, the pinhole C-arm model and anatomical frames.

Conventions used throughout the package:

* The world frame is the projective frame. The X-ray source sits at the
  origin and the principal axis points along +z toward the detector, which
  lies in the plane ``z = src_to_det``. Detector columns grow with +x and
  rows grow with +y.
* Tangent vectors of se(3) are stored as 6-arrays ``(rot, trans)``: an
  axis-angle rotation in radians followed by the translational part in mm.
* Euler decompositions use the extrinsic XYZ convention,
  ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.
* CT (volume) coordinates follow LPS: +x patient left, +y posterior,
  +z superior. The APP frame has +x toward patient left (right ASIS to left
  ASIS), +y superior and +z anterior.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-8


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain."""


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise DomainError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHO_TOL:
        raise DomainError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise DomainError("rotation determinant is not +1")


@dataclass(frozen=True, eq=False)
class RigidPose:
    """A rigid transform ``x -> rotation @ x + translation`` (translation in mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(R)
        if not np.all(np.isfinite(t)):
            raise DomainError("translation must be finite")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def _trusted(cls, R: np.ndarray, t: np.ndarray) -> "RigidPose":
        # products and inverses of valid poses skip re-validation
        p = object.__new__(cls)
        R = np.array(R, dtype=float)
        t = np.array(t, dtype=float)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(p, "rotation", R)
        object.__setattr__(p, "translation", t)
        return p

    @classmethod
    def from_matrix(cls, T) -> "RigidPose":
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4) or not np.allclose(T[3], [0, 0, 0, 1]):
            raise DomainError("expected a homogeneous 4x4 rigid matrix")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidPose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose._trusted(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        if not isinstance(other, RigidPose):
            return NotImplemented
        return RigidPose._trusted(self.rotation @ other.rotation,
                                  self.rotation @ other.translation + self.translation)

    def apply(self, pts) -> np.ndarray:
        """Transform a point ``(3,)`` or an array of points ``(N, 3)``."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Magnitude of the rotation in radians."""
        return float(np.linalg.norm(so3_log(self.rotation)))

    def __repr__(self):
        return f"RigidPose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


# --------------------------------------------------------------------------
# SO(3) / SE(3) exponential and logarithm


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def _log_rotation(R: np.ndarray) -> np.ndarray:
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta > np.pi - 1e-6:
        raise DomainError(f"rotation angle {theta:.9f} rad is at the pi singularity")
    if theta < _SMALL_ANGLE:
        return w * (1.0 + theta**2 / 6.0)
    if theta < np.pi - 1e-3:
        return w * (theta / s)
    # near pi the antisymmetric part is tiny; recover the axis from R + I
    B = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def _v_matrix(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * K @ K


def _v_inverse(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


def so3_exp(v, ref=None) -> np.ndarray:
    """Return ``ref @ exp([v]x)`` for an axis-angle vector ``v`` (radians)."""
    v = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise DomainError("tangent vector must be finite")
    R = _rodrigues(v)
    return R if ref is None else np.asarray(ref, dtype=float) @ R


def so3_log(R, ref=None) -> np.ndarray:
    """Axis-angle vector of ``ref^T @ R``; raises DomainError near angle pi."""
    R = np.asarray(R, dtype=float)
    if ref is not None:
        R = np.asarray(ref, dtype=float).T @ R
    return _log_rotation(R)


def se3_exp(v, ref: RigidPose | None = None) -> RigidPose:
    """Return ``ref o exp(v)`` for a 6-vector ``v = (rot [rad], trans [mm])``.

    The exponential uses the closed-form Rodrigues rotation together with
    the left Jacobian (``V`` matrix) for the translation.
    """
    v = np.asarray(v, dtype=float).reshape(6)
    if not np.all(np.isfinite(v)):
        raise DomainError("tangent vector must be finite")
    w, u = v[:3], v[3:]
    delta = RigidPose(_rodrigues(w), _v_matrix(w) @ u)
    return delta if ref is None else ref @ delta


def se3_log(p: RigidPose, ref: RigidPose | None = None) -> np.ndarray:
    """Tangent 6-vector of ``ref^-1 o p``; the inverse of :func:`se3_exp`."""
    rel = p if ref is None else ref.inverse() @ p
    w = _log_rotation(rel.rotation)
    return np.concatenate([w, _v_inverse(w) @ rel.translation])


# --------------------------------------------------------------------------
# Euler decomposition (extrinsic XYZ)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_compose(params) -> RigidPose:
    """Inverse of :func:`euler_decompose`: ``(rx, ry, rz) deg, (tx, ty, tz) mm``."""
    rx, ry, rz = np.deg2rad(np.asarray(params[:3], dtype=float))
    return RigidPose(_rz(rz) @ _ry(ry) @ _rx(rx), np.asarray(params[3:], dtype=float))


def euler_decompose(p: RigidPose) -> np.ndarray:
    """Split a pose into extrinsic XYZ angles (degrees) and its translation.

    At gimbal lock (``|ry| = 90 deg``) the convention ``rz = 0`` is applied.
    """
    R = p.rotation
    sy = -R[2, 0]
    if abs(sy) >= 1.0 - 1e-12:
        ry = np.copysign(np.pi / 2, sy)
        rz = 0.0
        # R = Ry(+-90) Rx(rx): R[0,1] = sin(ry) sin(rx), R[1,1] = cos(rx)
        rx = np.arctan2(np.sign(sy) * R[0, 1], R[1, 1])
    else:
        ry = np.arcsin(np.clip(sy, -1.0, 1.0))
        rx = np.arctan2(R[2, 1], R[2, 2])
        rz = np.arctan2(R[1, 0], R[0, 0])
    return np.concatenate([np.rad2deg([rx, ry, rz]), p.translation])


# --------------------------------------------------------------------------
# Projection


@dataclass(frozen=True)
class ProjectionGeometry:
    """Pinhole C-arm: source at the world origin, detector at ``z = src_to_det``."""

    src_to_det: float
    pixel_spacing: tuple[float, float]
    rows: int
    cols: int
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        ps = tuple(float(x) for x in self.pixel_spacing)
        pp = self.principal_point
        if pp is None:
            pp = ((self.rows - 1) / 2.0, (self.cols - 1) / 2.0)
        pp = tuple(float(x) for x in pp)
        object.__setattr__(self, "pixel_spacing", ps)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        if self.src_to_det <= 0 or min(ps) <= 0 or self.rows <= 0 or self.cols <= 0:
            raise ValueError("projection geometry values must be strictly positive")
        if not (0 <= pp[0] <= self.rows - 1 and 0 <= pp[1] <= self.cols - 1):
            raise ValueError("principal point must lie inside the detector")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def downsampled(self, factor: int) -> "ProjectionGeometry":
        """Geometry of a ``factor`` x ``factor`` block-averaged detector."""
        f = int(factor)
        if f < 1:
            raise ValueError("downsampling factor must be >= 1")
        if f == 1:
            return self
        rows, cols = -(-self.rows // f), -(-self.cols // f)
        pp = tuple((c - (f - 1) / 2.0) / f for c in self.principal_point)
        pp = (min(max(pp[0], 0.0), rows - 1), min(max(pp[1], 0.0), cols - 1))
        return ProjectionGeometry(self.src_to_det,
                                  (self.pixel_spacing[0] * f, self.pixel_spacing[1] * f),
                                  rows, cols, pp)

    def pixel_to_detector(self, rows, cols) -> np.ndarray:
        """World coordinates of detector pixel centres (broadcasting)."""
        r = np.asarray(rows, dtype=float)
        c = np.asarray(cols, dtype=float)
        x = (c - self.principal_point[1]) * self.pixel_spacing[1]
        y = (r - self.principal_point[0]) * self.pixel_spacing[0]
        r, x, y = np.broadcast_arrays(r, x, y)
        return np.stack([x, y, np.full(x.shape, float(self.src_to_det))], axis=-1)

    def pixel_grid(self) -> np.ndarray:
        """``(rows, cols, 3)`` world positions of every pixel centre."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return self.pixel_to_detector(r, c)

    def in_bounds(self, pixel) -> np.ndarray:
        p = np.asarray(pixel, dtype=float)
        return ((p[..., 0] >= 0) & (p[..., 0] <= self.rows - 1)
                & (p[..., 1] >= 0) & (p[..., 1] <= self.cols - 1))

    def to_dict(self) -> dict:
        return {
            "src_to_det_mm": self.src_to_det,
            "pixel_spacing_mm": list(self.pixel_spacing),
            "rows": self.rows,
            "cols": self.cols,
            "principal_point_px": list(self.principal_point),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProjectionGeometry":
        missing = [k for k in ("src_to_det_mm", "pixel_spacing_mm", "rows", "cols") if k not in d]
        if missing:
            raise KeyError(f"projection geometry is missing key(s): {', '.join(missing)}")
        return cls(float(d["src_to_det_mm"]), tuple(d["pixel_spacing_mm"]),
                   int(d["rows"]), int(d["cols"]),
                   tuple(d["principal_point_px"]) if d.get("principal_point_px") is not None else None)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProjectionGeometry":
        return cls.from_dict(json.loads(text))


class Projection(NamedTuple):
    pixel: np.ndarray
    depth_ratio: np.ndarray
    valid: np.ndarray  # False where the point is at or behind the source


def project_points(g: ProjectionGeometry, world_from_obj: RigidPose | None, pts) -> Projection:
    """Vectorised pinhole projection of object-frame points.

    Returns ``(row, col)`` pixels (possibly outside the detector) and the depth
    ratio ``z / src_to_det`` (0 at the source, 1 at the detector). Points at
    or behind the source are flagged invalid; their pixels are computed with
    the depth clamped to a tiny positive value so they stay finite.
    """
    pts = np.asarray(pts, dtype=float)
    X = pts if world_from_obj is None else world_from_obj.apply(pts)
    z = X[..., 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1e-9)
    f = g.src_to_det / zs
    col = g.principal_point[1] + X[..., 0] * f / g.pixel_spacing[1]
    row = g.principal_point[0] + X[..., 1] * f / g.pixel_spacing[0]
    return Projection(np.stack([row, col], axis=-1), z / g.src_to_det, valid)


def project_point(g: ProjectionGeometry, world_from_obj: RigidPose | None, p) -> Projection:
    """Project a single point; see :func:`project_points`."""
    pr = project_points(g, world_from_obj, np.asarray(p, dtype=float).reshape(3))
    return Projection(pr.pixel, float(pr.depth_ratio), bool(pr.valid))


def projection_matrix(g: ProjectionGeometry) -> np.ndarray:
    """3x4 intrinsic matrix mapping world homogeneous points to (col, row, 1)."""
    fx = g.src_to_det / g.pixel_spacing[1]
    fy = g.src_to_det / g.pixel_spacing[0]
    return np.array([[fx, 0.0, g.principal_point[1], 0.0],
                     [0.0, fy, g.principal_point[0], 0.0],
                     [0.0, 0.0, 1.0, 0.0]])


# --------------------------------------------------------------------------
# Anatomical frames

LANDMARK_NAMES = (
    "FH_L", "FH_R", "GSN_L", "GSN_R", "IOF_L", "IOF_R", "MOF_L", "MOF_R",
    "SPS_L", "SPS_R", "IPS_L", "IPS_R", "ASIS_L", "ASIS_R",
)


@dataclass(frozen=True)
class AppFrame:
    """Anterior pelvic plane frame; ``pose`` maps APP coordinates to volume coordinates."""

    pose: RigidPose

    @property
    def axes(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def origin(self) -> np.ndarray:
        return self.pose.translation


def compute_app_frame(lms: Mapping[str, np.ndarray]) -> AppFrame:
    """Build the APP frame from the bilateral ASIS and SPS landmarks.

    Origin at the ASIS midpoint, +x from right to left ASIS, +y in the plane
    through both ASIS and the SPS midpoint pointing away from the pubis
    (superior), +z = x cross y (anterior).
    """
    try:
        al, ar = (np.asarray(lms[k], dtype=float) for k in ("ASIS_L", "ASIS_R"))
        sl, sr = (np.asarray(lms[k], dtype=float) for k in ("SPS_L", "SPS_R"))
    except KeyError as exc:
        raise DomainError(f"APP frame needs landmark {exc.args[0]}") from None
    origin = 0.5 * (al + ar)
    x = al - ar
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DomainError("ASIS landmarks coincide")
    x /= nx
    u = 0.5 * (sl + sr) - origin
    y = -(u - (u @ x) * x)
    ny = np.linalg.norm(y)
    if ny < 1e-6 * max(1.0, np.linalg.norm(u)):
        raise DomainError("ASIS and SPS landmarks are collinear")
    y /= ny
    z = np.cross(x, y)
    return AppFrame(RigidPose(np.column_stack([x, y, z]), origin))


# rotation taking APP axes to world axes in a nominal AP view: patient left
# maps to -x (columns grow toward patient right), superior to -y (patient up),
# anterior to +z (source posterior, detector anterior)
WORLD_FROM_APP_AP = np.diag([-1.0, -1.0, 1.0])
