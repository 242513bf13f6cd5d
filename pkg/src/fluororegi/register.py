"""Multi-stage 2D/3D registration: objective assembly and the pipelines.

Every stage is parameterized about the pose it starts from, so ``x = 0``
is the incoming estimate and boxes are symmetric half-widths.  Rotations
are in degrees and translations in mm.

* pelvis stages: se(3) in projective axes about the current FH midpoint;
  the femurs ride along rigidly.
* femur rotation stages: so(3) in APP axes about the femoral head,
  pelvis held fixed.
* all-bodies stage: se(3) per object in APP axes (pelvis about the FH
  midpoint, femurs about their heads), femurs carried by the pelvis.
"""
from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .annotate import AnnotationSet
from .evaluation import PoseError, femur_pose_error, pelvis_pose_error
from .geometry import (AppFrame, ProjectionGeometry, RigidPose, compute_app_frame, euler_compose,
                       project_points, se3_exp, so3_exp)
from .imaging import (FEMUR_L, FEMUR_R, HEMIPELVIS_L, HEMIPELVIS_R, Image2D, LabelImage2D,
                      downsample, downsample_labels)
from .landmarks import (Detection, detected_pixels, extract_landmarks, init_ap_centroid,
                        init_ap_single_landmark, solve_pnp_detailed)
from .optimize import (BoxConstraints, OptimizerReport, ParallelObjective, minimize_bobyqa,
                       minimize_cmaes, minimize_de, minimize_grid, minimize_pso)
from .projector import MultiBodyPose, Scene, render_drr
from .regularize import (RegWeights, reg_de, reg_euler_prior, reg_folded_normal_rot,
                         reg_reprojection)
from .similarity import PatchGradNCC, PatchParams, patch_weights_from_labels

log = logging.getLogger(__name__)

TARGETS = ("pelvis", "femur_L_rot", "femur_R_rot", "all_bodies")
OPTIMIZERS = ("de", "grid", "pso", "cmaes", "bobyqa")
REGULARIZERS = (None, "de", "euler", "reprojection", "folded_normal")
FACTORS = (32, 8, 4)
HEMIPELVES = (HEMIPELVIS_L, HEMIPELVIS_R)
HEMIPELVES_FEMURS = (HEMIPELVIS_L, HEMIPELVIS_R, FEMUR_L, FEMUR_R)

PELVIS_DE_BOX = (60.0, 40.0, 10.0, 200.0, 200.0, 250.0)
PELVIS_GRID1_BOX = (5.0, 5.0, 1.0, 10.0, 10.0, 50.0)
PELVIS_GRID1_INC = (1.0, 1.0, 1.0, 2.0, 2.0, 10.0)
PELVIS_GRID2_BOX = (60.0, 40.0, 0.0, 200.0, 200.0, 250.0)
PELVIS_GRID2_INC = (7.5, 5.0, 0.0, 20.0, 20.0, 25.0)
PELVIS_PSO_BOX = (7.5, 10.0, 10.0, 20.0, 20.0, 25.0)
PELVIS_BOBYQA_8X_BOX = (5.0, 5.0, 5.0, 10.0, 10.0, 20.0)
PELVIS_BOBYQA_4X_BOX = (2.5, 2.5, 2.5, 5.0, 5.0, 10.0)
ALL_BODIES_BOX = (2.5,) * 6 * 3
PELVIS_CMAES_SIGMA = (15.0, 15.0, 30.0, 50.0, 50.0, 100.0)
FEMUR_CMAES_SIGMA = (30.0, 25.0, 15.0)


@dataclass
class StagePlan:
    name: str
    target: str
    optimizer: str
    factor: int
    box: Optional[tuple] = None           # half-widths
    increments: Optional[tuple] = None    # grid search only
    sigma: Optional[tuple] = None         # CMA-ES initial sigmas
    params: dict = field(default_factory=dict)
    regularizer: Optional[str] = None
    lam: Optional[float] = None           # None: 0.9 with a regularizer, else 1
    weights: Optional[tuple] = None       # label classes for patch weights; None = uniform

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"stage {self.name}: unknown target {self.target!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"stage {self.name}: unknown optimizer {self.optimizer!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"stage {self.name}: unknown regularizer {self.regularizer!r}")
        if int(self.factor) < 1:
            raise ValueError(f"stage {self.name}: factor must be >= 1")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"stage {self.name}: lam must lie in [0, 1]")
        n = self.dim
        for key in ("box", "increments", "sigma"):
            v = getattr(self, key)
            if v is not None:
                v = tuple(float(a) for a in v)
                if len(v) != n:
                    raise ValueError(f"stage {self.name}: {key} needs {n} entries")
                setattr(self, key, v)
        if self.optimizer in ("de", "grid", "pso", "bobyqa") and self.box is None:
            raise ValueError(f"stage {self.name}: {self.optimizer} needs a box")
        if self.optimizer == "grid" and self.increments is None:
            raise ValueError(f"stage {self.name}: grid search needs increments")
        if self.optimizer == "cmaes" and self.sigma is None:
            raise ValueError(f"stage {self.name}: CMA-ES needs sigma")
        if self.weights is not None:
            self.weights = tuple(int(c) for c in self.weights)

    @property
    def dim(self) -> int:
        return {"pelvis": 6, "femur_L_rot": 3, "femur_R_rot": 3, "all_bodies": 18}[self.target]

    @property
    def effective_lam(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return 0.9 if self.regularizer else 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "StagePlan":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise KeyError(f"unknown stage key(s): {', '.join(sorted(bad))}")
        return cls(**d)

    def updated(self, overrides: Mapping) -> "StagePlan":
        d = self.to_dict()
        bad = set(overrides) - set(d)
        if bad:
            raise KeyError(f"stage {self.name}: unknown key(s) {', '.join(sorted(bad))}")
        params = dict(d["params"])
        params.update(overrides.get("params", {}))
        d.update(overrides)
        d["params"] = params
        return StagePlan(**d)


# --------------------------------------------------------------------------
# default stage plans


def offline_attempt1() -> list[StagePlan]:
    return [
        StagePlan("p1_de", "pelvis", "de", 32, box=PELVIS_DE_BOX, regularizer="de",
                  params={"iters": 400, "pop": 1000, "cr": 0.2}),
        StagePlan("p1_grid", "pelvis", "grid", 32, box=PELVIS_GRID1_BOX, increments=PELVIS_GRID1_INC),
        StagePlan("p1_cmaes", "pelvis", "cmaes", 8, sigma=PELVIS_CMAES_SIGMA, regularizer="euler",
                  params={"pop": 100}),
        StagePlan("p1_bobyqa", "pelvis", "bobyqa", 4, box=PELVIS_BOBYQA_4X_BOX),
    ]


def offline_attempt2() -> list[StagePlan]:
    return [
        StagePlan("p2_grid", "pelvis", "grid", 32, box=PELVIS_GRID2_BOX, increments=PELVIS_GRID2_INC),
        StagePlan("p2_pso", "pelvis", "pso", 32, box=PELVIS_PSO_BOX, params={"iters": 50, "particles": 21000}),
        StagePlan("p2_bobyqa1", "pelvis", "bobyqa", 8, box=PELVIS_BOBYQA_8X_BOX),
        StagePlan("p2_bobyqa2", "pelvis", "bobyqa", 4, box=PELVIS_BOBYQA_4X_BOX),
    ]


def femur_stages(weights: Optional[tuple] = None) -> list[StagePlan]:
    return [StagePlan(f"femur_{s}", f"femur_{s}_rot", "cmaes", 8, sigma=FEMUR_CMAES_SIGMA,
                      regularizer="folded_normal", params={"pop": 100}, weights=weights)
            for s in ("L", "R")]


def all_bodies_stage() -> StagePlan:
    return StagePlan("all_bodies", "all_bodies", "bobyqa", 4, box=ALL_BODIES_BOX)


def intraop_pelvis_stages(method: int) -> list[StagePlan]:
    reg, weights = {1: (None, None), 2: ("euler", HEMIPELVES), 3: ("reprojection", HEMIPELVES)}[method]
    return [
        StagePlan("pelvis_cmaes", "pelvis", "cmaes", 8, sigma=PELVIS_CMAES_SIGMA, regularizer=reg,
                  params={"pop": 100}, weights=weights),
        StagePlan("pelvis_bobyqa", "pelvis", "bobyqa", 4, box=PELVIS_BOBYQA_4X_BOX),
    ]


@dataclass
class RegistrationConfig:
    """Pipeline settings shared by all stages.

    ``level_divisor`` rescales the stage factors for images smaller than
    the full-resolution detector (factor ``f`` becomes ``max(1, f // d)``).
    ``stages`` holds per-stage overrides keyed by stage name.
    """
    level_divisor: int = 1
    step_mm: float = 1.0
    patch_radius: int = 5
    patch_stride: int = 1
    threads: int = 1
    success_threshold: float = -0.6
    success_rotation_deg: float = 1.0
    depth_ratio: float = 0.7
    register_femurs: bool = True
    refine_all: bool = True
    reg: RegWeights = field(default_factory=RegWeights)
    stages: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.reg, Mapping):
            self.reg = RegWeights(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.reg.items()})
        if int(self.level_divisor) < 1:
            raise ValueError("level_divisor must be >= 1")
        if self.step_mm <= 0:
            raise ValueError("step_mm must be positive")

    def apply(self, plans: Sequence[StagePlan]) -> list[StagePlan]:
        unknown = set(self.stages) - {p.name for p in plans} - _ALL_STAGE_NAMES
        if unknown:
            raise KeyError(f"unknown stage name(s): {', '.join(sorted(unknown))}")
        return [p.updated(self.stages[p.name]) if p.name in self.stages else p for p in plans]

    def factor(self, plan: StagePlan) -> int:
        return max(1, int(plan.factor) // int(self.level_divisor))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["reg"] = dataclasses.asdict(self.reg)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegistrationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise KeyError(f"unknown config key(s): {', '.join(sorted(bad))}")
        return cls(**d)


_ALL_STAGE_NAMES = ({p.name for p in offline_attempt1() + offline_attempt2() + femur_stages()}
                    | {"all_bodies", "pelvis_cmaes", "pelvis_bobyqa"})


# --------------------------------------------------------------------------
# pose parameterizations


def _delta_about(centre, axes, v6) -> RigidPose:
    """``F exp(v) F^-1`` for the frame F with ``axes`` (columns) at ``centre``; v = (deg, mm)."""
    v = np.asarray(v6, dtype=float)
    ex = se3_exp(np.concatenate([np.deg2rad(v[:3]), v[3:]]))
    F = RigidPose(np.asarray(axes, float), np.asarray(centre, float))
    return F @ ex @ F.inverse()


def pose_from_femur_rotation(rot3, fh_center, app: AppFrame) -> RigidPose:
    """Relative pose rotating about ``fh_center`` by ``rot3`` (degrees, so(3) in APP axes).

    The femoral head centre is a fixed point; there is no relative translation.
    """
    return _delta_about(fh_center, app.axes, np.concatenate([np.asarray(rot3, float), np.zeros(3)]))


def nominal_pose(scene: Scene, g: ProjectionGeometry, offset=None, depth_ratio: float = 0.7) -> MultiBodyPose:
    """AP pose (landmark centroid on the image centre) moved by ``offset``.

    ``offset`` = (rx, ry, rz deg, tx, ty, tz mm): extrinsic XYZ rotation
    about the FH midpoint followed by a world translation.
    """
    lms = scene.landmarks
    ap = init_ap_centroid(lms, g, compute_app_frame(lms), depth_ratio)
    if offset is not None:
        v = np.asarray(offset, dtype=float)
        c = ap.apply(scene.fh_midpoint())
        rot = euler_compose(np.r_[v[:3], 0.0, 0.0, 0.0])
        ap = RigidPose.from_translation(c + v[3:]) @ rot @ RigidPose.from_translation(-c) @ ap
    return MultiBodyPose.rigid(ap)


class PoseParam:
    """Map a stage's parameter vector to a full multi-body pose."""

    def __init__(self, target: str, ref: MultiBodyPose, scene: Scene, app: AppFrame):
        self.target = target
        self.ref = ref
        lms = scene.landmarks
        self.fh = {s: np.asarray(lms[f"FH_{s}"], float) for s in ("L", "R") if f"FH_{s}" in lms}
        self.fh_mid = 0.5 * (self.fh["L"] + self.fh["R"]) if len(self.fh) == 2 else \
            np.mean(list(scene.landmarks.values()), axis=0)
        self.app = app
        if target == "pelvis":
            self.centre = ref.pelvis.apply(self.fh_mid)
        elif target in ("femur_L_rot", "femur_R_rot"):
            s = target[6]
            self.side = s
            # femoral head in pelvis CT coordinates at the incoming relative pose
            self.rel0 = ref.femur_relative(s)
            self.centre = self.rel0.apply(self.fh[s])

    def __call__(self, x) -> MultiBodyPose:
        x = np.asarray(x, dtype=float)
        r = self.ref
        if self.target == "pelvis":
            d = _delta_about(self.centre, np.eye(3), x)
            return MultiBodyPose(d @ r.pelvis, d @ r.femur_L, d @ r.femur_R)
        if self.target in ("femur_L_rot", "femur_R_rot"):
            rel = pose_from_femur_rotation(x, self.centre, self.app) @ self.rel0
            return r.with_pose(f"femur_{self.side}", r.pelvis @ rel)
        # all bodies
        P = r.pelvis @ _delta_about(self.fh_mid, self.app.axes, x[:6])
        out = {"pelvis": P}
        for i, s in enumerate(("L", "R")):
            rel0 = r.femur_relative(s)
            c = rel0.apply(self.fh.get(s, self.fh_mid))
            out[f"femur_{s}"] = P @ _delta_about(c, self.app.axes, x[6 + 6 * i:12 + 6 * i]) @ rel0
        return MultiBodyPose(**out)

    def delta(self, x) -> RigidPose:
        """The rigid change applied to the moving object (for the Euler/rotation priors)."""
        x = np.asarray(x, dtype=float)
        if self.target == "pelvis":
            return se3_exp(np.concatenate([np.deg2rad(x[:3]), x[3:]]))
        return RigidPose(so3_exp(np.deg2rad(x[:3])), np.zeros(3))


# --------------------------------------------------------------------------
# objective


@dataclass
class StageContext:
    """Everything a stage objective needs besides the plan."""
    scene: Scene
    image: Image2D                 # preprocessed, full resolution
    g: ProjectionGeometry          # full resolution
    ref: MultiBodyPose
    config: RegistrationConfig = field(default_factory=RegistrationConfig)
    labels: Optional[LabelImage2D] = None
    detections: Optional[dict] = None      # name -> (row, col), full-resolution pixels


class StageObjective:
    """``lam * S(DRR(pose(x)), I) + (1 - lam) * R(pose(x))`` at the stage resolution."""

    def __init__(self, plan: StagePlan, ctx: StageContext):
        cfg = ctx.config
        self.plan = plan
        self.ctx = ctx
        f = cfg.factor(plan)
        self.factor = f
        fixed = downsample(ctx.image, f)
        self.g = ctx.g.downsampled(f)
        if fixed.shape != self.g.shape:
            raise ValueError(f"image {fixed.shape} does not match geometry {self.g.shape}")
        r = min(cfg.patch_radius, (min(self.g.shape) - 1) // 2)
        if r < 1:
            raise ValueError(f"stage {plan.name}: {self.g.shape} image too small after {f}x downsampling")
        self.patch = PatchParams(r, cfg.patch_stride)
        w = None
        if plan.weights is not None:
            if ctx.labels is None:
                raise ValueError(f"stage {plan.name}: patch weights need a label image")
            lbl = downsample_labels(ctx.labels, f)
            w = patch_weights_from_labels(lbl, plan.weights)
            try:
                PatchGradNCC(fixed, w, self.patch)
            except ValueError:
                log.warning("stage %s: no weighted patches; using uniform weights", plan.name)
                w = None
        self.sim = PatchGradNCC(fixed, w, self.patch)
        self.lam = plan.effective_lam
        self.app = compute_app_frame(ctx.scene.landmarks)
        self.param = PoseParam(plan.target, ctx.ref, ctx.scene, self.app)
        self.lms = ctx.scene.landmarks
        self.step = cfg.step_mm
        # static part of the DRR for single-femur stages
        self.static = None
        self.moving = list(ctx.scene)
        if plan.target in ("femur_L_rot", "femur_R_rot"):
            name = f"femur_{plan.target[6]}"
            others = [o for o in ctx.scene if o.name != name]
            self.moving = [o for o in ctx.scene if o.name == name]
            if others:
                self.static = render_drr(others, self.g, ctx.ref, self.step).pixels
        if plan.regularizer == "reprojection" and not ctx.detections:
            raise ValueError(f"stage {plan.name}: reprojection regularizer needs detections")
        self.nfev = 0

    def render(self, pose: MultiBodyPose) -> np.ndarray:
        img = render_drr(self.moving, self.g, pose, self.step).pixels
        return img if self.static is None else img + self.static

    def similarity(self, x) -> float:
        return self.sim(self.render(self.param(x)))

    def regularizer(self, x) -> float:
        reg = self.plan.regularizer
        if reg is None:
            return 0.0
        rw = self.ctx.config.reg
        pose = self.param(x)
        if reg == "de":
            return reg_de(pose.pelvis, self.lms, self.g)
        if reg == "euler":
            return reg_euler_prior(self.param.delta(x), None, rw.euler_sigmas)
        if reg == "reprojection":
            return reg_reprojection(pose.pelvis, self.lms, self.ctx.detections, self.ctx.g, rw.sigma_l)
        ang = np.rad2deg(self.param.delta(x).rotation_angle())
        return reg_folded_normal_rot(ang, rw.folded_mu, rw.folded_sigma)

    def __call__(self, x) -> float:
        self.nfev += 1
        s = self.similarity(x)
        if self.lam == 1.0:
            return s
        return self.lam * s + (1.0 - self.lam) * self.regularizer(x)


def objective_eval(plan: StagePlan, ctx: StageContext, x) -> float:
    """One evaluation of a stage objective at parameters ``x``."""
    return StageObjective(plan, ctx)(x)


# --------------------------------------------------------------------------
# running stages


@dataclass
class StageResult:
    name: str
    report: OptimizerReport
    pose: MultiBodyPose
    factor: int
    seconds: float

    def to_dict(self) -> dict:
        return {"name": self.name, "factor": self.factor, "seconds": self.seconds,
                "report": self.report.to_dict(), "pose": self.pose.to_dict()}


def run_stage(plan: StagePlan, ctx: StageContext, seed: int = 0) -> StageResult:
    t0 = time.perf_counter()
    objective = StageObjective(plan, ctx)
    n = plan.dim
    box = BoxConstraints.symmetric(plan.box) if plan.box is not None else None
    kw = dict(plan.params)
    with ParallelObjective(objective, ctx.config.threads) as obj:
        if plan.optimizer == "de":
            rep = minimize_de(obj, box, seed=seed, **kw)
        elif plan.optimizer == "pso":
            rep = minimize_pso(obj, box, seed=seed, **kw)
        elif plan.optimizer == "grid":
            rep = minimize_grid(obj, box, plan.increments, **kw)
        elif plan.optimizer == "cmaes":
            rep = minimize_cmaes(obj, np.zeros(n), plan.sigma, seed=seed, box=box, **kw)
        else:
            rep = minimize_bobyqa(obj, np.zeros(n), box, **kw)
    # never accept a stage that made the objective worse than where it started
    f0 = objective(np.zeros(n))
    if not rep.fun <= f0:
        rep = dataclasses.replace(rep, x=np.zeros(n), fun=f0, message=rep.message + "; kept start")
    pose = objective.param(rep.x)
    log.info("stage %s: f=%.5f nfev=%d (%.1fs)", plan.name, rep.fun, rep.nfev, time.perf_counter() - t0)
    return StageResult(plan.name, rep, pose, objective.factor, time.perf_counter() - t0)


@dataclass
class RegistrationReport:
    pose: MultiBodyPose
    stages: list
    success: bool
    wall_time: float = 0.0
    similarity: float = float("nan")
    attempt: int = 1
    pelvis_error: Optional[PoseError] = None
    femur_errors: dict = field(default_factory=dict)
    init_pose: Optional[MultiBodyPose] = None
    detections: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        d = {"success": self.success, "attempt": self.attempt, "similarity": self.similarity,
             "pose": self.pose.to_dict(),
             "init_pose": self.init_pose.to_dict() if self.init_pose else None,
             "stages": [s.to_dict() for s in self.stages],
             "detections": {k: [float(a) for a in v] for k, v in self.detections.items()},
             "warnings": list(self.warnings)}
        if self.pelvis_error is not None:
            d["pelvis_error"] = self.pelvis_error.to_dict()
        if self.femur_errors:
            d["femur_errors"] = {k: v.to_dict() for k, v in self.femur_errors.items()}
        if timing:
            d["wall_time"] = self.wall_time
        else:
            for s in d["stages"]:
                s.pop("seconds")
        return d


def final_similarity(scene: Scene, image: Image2D, g: ProjectionGeometry, pose: MultiBodyPose,
                     config: RegistrationConfig, factor: int = 4) -> float:
    """Unweighted patch gradient NCC of the full render at the given stage factor."""
    plan = StagePlan("check", "pelvis", "bobyqa", factor, box=(0.0,) * 6)
    return StageObjective(plan, StageContext(scene, image, g, pose, config)).similarity(np.zeros(6))


class _Pipeline:
    def __init__(self, scene, image, g, config, seed, gt_pose, labels=None, detections=None):
        self.scene, self.image, self.g = scene, image, g
        self.config = config or RegistrationConfig()
        self.seed = seed
        self.gt = gt_pose
        self.labels = labels
        self.detections = detections
        self.results: list[StageResult] = []

    def run(self, plans, pose: MultiBodyPose) -> MultiBodyPose:
        for plan in self.config.apply(plans):
            ctx = StageContext(self.scene, self.image, self.g, pose, self.config, self.labels, self.detections)
            res = run_stage(plan, ctx, self.seed + len(self.results))
            self.results.append(res)
            pose = res.pose
        return pose

    def pelvis_error(self, pose) -> Optional[PoseError]:
        if self.gt is None:
            return None
        return pelvis_pose_error(pose.pelvis, self.gt.pelvis, self.scene.fh_midpoint())

    def success(self, pose) -> tuple[bool, float]:
        s = final_similarity(self.scene, self.image, self.g, pose, self.config)
        if self.gt is not None:
            return self.pelvis_error(pose).rotation_deg < self.config.success_rotation_deg, s
        return s < self.config.success_threshold, s

    def femurs(self, pose, weights) -> MultiBodyPose:
        names = {o.name for o in self.scene}
        plans = [p for p in femur_stages(weights) if p.name in names and self._fh_visible(pose, p.name[-1])]
        pose = self.run(plans, pose)
        if self.config.refine_all and {"pelvis", "femur_L", "femur_R"} <= names:
            pose = self.run([all_bodies_stage()], pose)
        return pose

    def _fh_visible(self, pose, side) -> bool:
        fh = self.scene.landmarks.get(f"FH_{side}")
        if fh is None:
            return False
        pr = project_points(self.g, pose.of(f"femur_{side}"), fh)
        return bool(pr.valid) and bool(self.g.in_bounds(pr.pixel))

    def report(self, pose, ok, s, t0, **kw) -> RegistrationReport:
        rep = RegistrationReport(pose, self.results, ok, time.perf_counter() - t0, s, **kw)
        if self.gt is not None:
            rep.pelvis_error = self.pelvis_error(pose)
            app = compute_app_frame(self.scene.landmarks)
            for s_ in ("L", "R"):
                fh = self.scene.landmarks.get(f"FH_{s_}")
                if fh is not None:
                    rep.femur_errors[f"femur_{s_}"] = femur_pose_error(
                        pose.femur_relative(s_), self.gt.femur_relative(s_), app, fh)
        return rep


def run_offline_gt_pipeline(scene: Scene, image: Image2D, g: ProjectionGeometry,
                            config: Optional[RegistrationConfig] = None, seed: int = 0,
                            gt_pose: Optional[MultiBodyPose] = None,
                            init_pose: Optional[MultiBodyPose] = None) -> RegistrationReport:
    """Expensive two-attempt pelvis registration followed by femur and joint refinement.

    Attempt 1 is DE (with the plausibility prior), grid search, CMA-ES with
    the Euler prior and BOBYQA.  If the success check fails, attempt 2
    (wide grid, PSO, two BOBYQA runs, no regularization) restarts from the
    initial pose.  ``gt_pose`` switches the check to the rotation error.
    """
    t0 = time.perf_counter()
    p = _Pipeline(scene, image, g, config, seed, gt_pose)
    app = compute_app_frame(scene.landmarks)
    init = init_pose or MultiBodyPose.rigid(init_ap_centroid(scene.landmarks, g, app, p.config.depth_ratio))
    pose = p.run(offline_attempt1(), init)
    ok, s = p.success(pose)
    attempt = 1
    if not ok:
        attempt = 2
        pose = p.run(offline_attempt2(), init)
        ok, s = p.success(pose)
    if ok and p.config.register_femurs:
        pose = p.femurs(pose, None)
        s = final_similarity(scene, image, g, pose, p.config)
    return p.report(pose, ok, s, t0, attempt=attempt, init_pose=init)


def run_intraop(method: int, scene: Scene, image: Image2D, g: ProjectionGeometry,
                annotations: Optional[AnnotationSet] = None,
                config: Optional[RegistrationConfig] = None, seed: int = 0,
                gt_pose: Optional[MultiBodyPose] = None,
                detections: Optional[Sequence[Detection]] = None) -> RegistrationReport:
    """Intraoperative registration with method 1 (intensity only), 2 (PnP init) or 3 (combined).

    ``annotations`` supplies the segmentation (patch weights) and the
    landmark heatmaps; detections are extracted from the heatmaps unless
    given explicitly.
    """
    if method not in (1, 2, 3):
        raise ValueError("method must be 1, 2 or 3")
    if method > 1 and annotations is None:
        raise ValueError(f"method {method} needs annotations")
    t0 = time.perf_counter()
    cfg = config or RegistrationConfig()
    lms = scene.landmarks
    app = compute_app_frame(lms)
    notes = []
    det2d: dict = {}
    labels = None
    if annotations is not None:
        labels = annotations.labels
        if detections is None:
            detections = extract_landmarks(annotations.heatmaps, annotations.labels)
        det2d = {k: v for k, v in detected_pixels(detections).items() if k in lms}

    if method == 1:
        init = init_ap_centroid(lms, g, app, cfg.depth_ratio)
    elif method == 2 and len(det2d) >= 4:
        names = sorted(det2d)
        start = init_ap_centroid(lms, g, app, cfg.depth_ratio)
        res = solve_pnp_detailed([lms[n] for n in names], [det2d[n] for n in names], g, start)
        init = res.pose
        if res.diverged:
            notes.append("PnP diverged")
    else:
        if method == 2:
            msg = f"only {len(det2d)} landmarks detected; using single-landmark initialization"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
        init = init_ap_single_landmark(lms, det2d or None, g, app, cfg.depth_ratio)

    p = _Pipeline(scene, image, g, cfg, seed, gt_pose, labels, det2d)
    plans = intraop_pelvis_stages(method)
    if method == 3 and not det2d:
        notes.append("no landmarks detected; reprojection regularizer disabled")
        plans[0] = dataclasses.replace(plans[0], regularizer=None)
    init_pose = MultiBodyPose.rigid(init)
    pose = p.run(plans, init_pose)
    if cfg.register_femurs:
        pose = p.femurs(pose, None if method == 1 else HEMIPELVES_FEMURS)
    ok, s = p.success(pose)
    return p.report(pose, ok, s, t0, init_pose=init_pose, detections=det2d, warnings=notes)
