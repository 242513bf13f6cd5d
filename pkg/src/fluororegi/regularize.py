"""Pose regularizers mixed into the registration objective.

All penalties are non-negative; the log-priors have their additive
constants removed so they vanish at their minimum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import ProjectionGeometry, RigidPose, euler_decompose, project_points

EULER_SIGMAS = (10.0, 10.0, 10.0, 20.0, 20.0, 100.0)


@dataclass(frozen=True)
class RegWeights:
    lam: float = 0.9
    sigma_l: float = 19.4
    euler_sigmas: tuple = EULER_SIGMAS
    folded_mu: float = 45.0
    folded_sigma: float = 45.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.sigma_l <= 0 or self.folded_sigma <= 0 or min(self.euler_sigmas) <= 0:
            raise ValueError("sigmas must be positive")
        if len(self.euler_sigmas) != 6:
            raise ValueError("euler_sigmas needs 6 entries")


def _require(lms3d, names):
    missing = [n for n in names if n not in lms3d]
    if missing:
        raise KeyError(f"missing landmarks: {', '.join(missing)}")


def _out_of_bounds_sq(pix, g: ProjectionGeometry) -> float:
    r = max(0.0, -pix[0], pix[0] - (g.rows - 1))
    c = max(0.0, -pix[1], pix[1] - (g.cols - 1))
    return r * r + c * c


def _depth_penalty(d: float) -> float:
    if d >= 1.0:
        return d * d
    if d <= 0.7:
        return 100.0 * (0.7 - d) ** 2
    return 0.0


def _up_penalty(p_row: float, q_row: float) -> float:
    # q is expected below p, i.e. at a larger row
    return (q_row - p_row) ** 2 if q_row < p_row else 0.0


def reg_de(pose_P: RigidPose, lms3d: Mapping[str, np.ndarray], g: ProjectionGeometry) -> float:
    """Plausibility prior for wide pelvis searches.

    Penalizes poses with neither femoral head in view, heads behind the
    detector or too near the source, and ASIS projected below IOF
    (images are assumed patient-up).
    """
    names = ("FH_L", "FH_R", "ASIS_L", "ASIS_R", "IOF_L", "IOF_R")
    _require(lms3d, names)
    pr = project_points(g, pose_P, np.array([lms3d[n] for n in names], dtype=float))
    pix, d = pr.pixel, pr.depth_ratio
    vis = _out_of_bounds_sq(pix[0], g) * _out_of_bounds_sq(pix[1], g)
    depth = _depth_penalty(d[0]) + _depth_penalty(d[1])
    up = _up_penalty(pix[2, 0], pix[4, 0]) + _up_penalty(pix[3, 0], pix[5, 0])
    return float(2.0 * vis + 2.0 * depth + up)


def reg_reprojection(pose_P: RigidPose, lms3d: Mapping[str, np.ndarray],
                     det2d: Mapping[str, Sequence[float]], g: ProjectionGeometry,
                     sigma_l: float = 19.4) -> float:
    """Sum of squared detector-plane reprojection distances (mm) over detected landmarks, / 2 sigma^2."""
    names = sorted(n for n in det2d if n in lms3d)
    if not names:
        raise ValueError("no detected landmarks with a 3D counterpart")
    pr = project_points(g, pose_P, np.array([lms3d[n] for n in names], dtype=float))
    obs = np.array([det2d[n] for n in names], dtype=float)
    diff = (pr.pixel - obs) * np.asarray(g.pixel_spacing)
    return float(np.sum(diff * diff) / (2.0 * sigma_l**2))


def reg_euler_prior(pose: RigidPose, ref: RigidPose | None = None,
                    sigmas: Sequence[float] = EULER_SIGMAS) -> float:
    """Independent-normal prior on the Euler components of ``ref^-1 . pose``."""
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas <= 0):
        raise ValueError("sigmas must be positive")
    delta = pose if ref is None else ref.inverse() @ pose
    x = euler_decompose(delta)
    return float(np.sum(x * x / (2.0 * sigmas * sigmas)))


def _folded_nll(x, mu, sigma):
    a = -0.5 * ((x - mu) / sigma) ** 2
    b = -0.5 * ((x + mu) / sigma) ** 2
    return -np.logaddexp(a, b)


def folded_normal_min(mu: float = 45.0, sigma: float = 45.0) -> float:
    """Argmin over x >= 0 of the folded-normal negative log density."""
    # unimodal with mode at 0 iff mu <= sigma; otherwise solve x = mu tanh(mu x / sigma^2)
    if mu <= sigma:
        return 0.0
    x = float(mu)
    for _ in range(200):
        x_new = mu * np.tanh(mu * x / sigma**2)
        if abs(x_new - x) < 1e-14 * max(1.0, mu):
            break
        x = x_new
    return float(x_new)


def reg_folded_normal_rot(rotation_angle: float, mu: float = 45.0, sigma: float = 45.0) -> float:
    """Folded-normal negative log density of a rotation magnitude (degrees), zero at its minimum."""
    if rotation_angle < 0:
        raise ValueError("rotation angle must be non-negative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x0 = folded_normal_min(mu, sigma)
    return float(_folded_nll(rotation_angle, mu, sigma) - _folded_nll(x0, mu, sigma))
