import warnings

import numpy as np
import pytest

from fluororegi.annotate import generate_annotations
from fluororegi.evaluation import pelvis_pose_error
from fluororegi.geometry import RigidPose, so3_exp
from fluororegi.imaging import FEMUR_L, FEMUR_R, HEMIPELVIS_L, HEMIPELVIS_R
from fluororegi.projector import MultiBodyPose, render_drr
from fluororegi.register import (
    HEMIPELVES, RegistrationConfig, StageContext, StageObjective, StagePlan, nominal_pose, objective_eval,
    pose_from_femur_rotation, run_intraop, run_offline_gt_pipeline, run_stage,
)
from fluororegi.regularize import reg_reprojection
from oracles import reprojection_naive

FAST = {"pelvis_cmaes": {"params": {"maxfevals": 1200}}}


def _cfg(**kw):
    d = dict(level_divisor=8, step_mm=2.0, register_femurs=False, stages=FAST)
    d.update(kw)
    return RegistrationConfig(**d)


@pytest.fixture(scope="module")
def case(phantom, geom):
    gt = nominal_pose(phantom, geom, (4.0, -6.0, 3.0, 10.0, -8.0, 20.0))
    img = render_drr(phantom, geom, gt, 2.0)
    ann = generate_annotations(phantom, geom, gt)
    return gt, img, ann


def test_stage_plan_validation():
    with pytest.raises(ValueError):
        StagePlan("x", "hips", "cmaes", 8, sigma=(1,) * 6)
    with pytest.raises(ValueError):
        StagePlan("x", "pelvis", "bobyqa", 4, box=(1, 1, 1))
    with pytest.raises(ValueError):
        StagePlan("x", "pelvis", "cmaes", 8, sigma=(1,) * 6, lam=1.5)
    with pytest.raises(ValueError):
        StagePlan("x", "pelvis", "grid", 8, box=(1,) * 6)
    p = StagePlan("x", "pelvis", "cmaes", 8, sigma=(1,) * 6, regularizer="euler", params={"pop": 10})
    assert p.effective_lam == 0.9 and StagePlan.from_dict(p.to_dict()).to_dict() == p.to_dict()
    q = p.updated({"params": {"maxfevals": 5}, "factor": 4})
    assert q.params == {"pop": 10, "maxfevals": 5} and q.factor == 4
    with pytest.raises(KeyError):
        p.updated({"bogus": 1})


def test_config_roundtrip_and_errors():
    c = RegistrationConfig(level_divisor=4, stages={"p1_de": {"params": {"pop": 20}}})
    assert RegistrationConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()
    assert c.factor(StagePlan("x", "pelvis", "bobyqa", 32, box=(1,) * 6)) == 8
    with pytest.raises(KeyError, match="bogus"):
        RegistrationConfig.from_dict({"bogus": 1})
    with pytest.raises(KeyError, match="nope"):
        RegistrationConfig(stages={"nope": {}}).apply([])


def test_femur_rotation_pose(phantom, app):
    fh = phantom.landmarks["FH_L"]
    assert np.allclose(pose_from_femur_rotation(np.zeros(3), fh, app).matrix(), np.eye(4))
    p = pose_from_femur_rotation([10.0, 0, 0], fh, app)
    assert np.linalg.norm(p.apply(fh) - fh) < 1e-9
    assert np.rad2deg(p.rotation_angle()) == pytest.approx(10.0)
    # matrix oracle: T(fh) A R A^T T(-fh)
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = rng.normal(scale=20, size=3)
        T = np.eye(4); T[:3, 3] = fh
        A = np.eye(4); A[:3, :3] = app.axes
        R = np.eye(4); R[:3, :3] = so3_exp(np.deg2rad(r))
        oracle = T @ A @ R @ A.T @ np.linalg.inv(T)
        assert np.allclose(pose_from_femur_rotation(r, fh, app).matrix(), oracle, atol=1e-12)


def test_objective_at_truth(phantom, geom, case):
    gt, img, ann = case
    cfg = _cfg(level_divisor=4)
    plan = StagePlan("t", "pelvis", "bobyqa", 4, box=(1,) * 6, weights=HEMIPELVES)
    ctx = StageContext(phantom, img, geom, gt, cfg, ann.labels)
    assert objective_eval(plan, ctx, np.zeros(6)) == pytest.approx(-1.0, abs=1e-12)
    # lam = 1: the objective is the similarity itself
    ob = StageObjective(plan, ctx)
    x = np.array([0.5, -0.3, 0.2, 1.0, 2.0, -3.0])
    assert ob(x) == ob.similarity(x)


def test_objective_combines_reprojection(phantom, geom, case):
    gt, img, ann = case
    det = {k: v.pixel + 0.7 for k, v in ann.landmarks.items() if v.visible}
    plan = StagePlan("t", "pelvis", "cmaes", 8, sigma=(1,) * 6, regularizer="reprojection")
    ob = StageObjective(plan, StageContext(phantom, img, geom, gt, _cfg(), ann.labels, det))
    lms = phantom.landmarks
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(size=6)
        pose = ob.param(x).pelvis
        names = sorted(det)
        reg = reprojection_naive(geom.src_to_det, geom.pixel_spacing, geom.principal_point, pose.matrix(),
                                 [lms[n] for n in names], [det[n] for n in names], 19.4)
        hand = 0.9 * ob.similarity(x) + 0.1 * reg
        assert abs(ob(x) - hand) < 1e-12
        assert reg == pytest.approx(reg_reprojection(pose, lms, det, geom), rel=1e-12)


def test_truth_is_local_minimum(phantom, geom, case):
    gt, img, ann = case
    plan = StagePlan("t", "pelvis", "bobyqa", 4, box=(1,) * 6)
    ob = StageObjective(plan, StageContext(phantom, img, geom, gt, _cfg(level_divisor=4)))
    f0 = ob(np.zeros(6))
    rng = np.random.default_rng(2)
    for _ in range(500):
        d = rng.normal(size=6)
        d[:3] *= 2.0 / np.linalg.norm(d[:3])
        d[3:] *= 2.0 / np.linalg.norm(d[3:])
        assert ob(d) >= f0


def test_stage_never_worsens(phantom, geom, case):
    gt, img, ann = case
    plan = StagePlan("t", "pelvis", "cmaes", 4, sigma=(5,) * 6, params={"pop": 6, "maxfevals": 13})
    res = run_stage(plan, StageContext(phantom, img, geom, gt, _cfg(level_divisor=4)), seed=0)
    assert np.allclose(res.pose.pelvis.matrix(), gt.pelvis.matrix())


def test_method3_self_render(phantom, geom, case):
    gt, img, ann = case
    rep = run_intraop(3, phantom, img, geom, ann, _cfg(), seed=0, gt_pose=gt)
    assert rep.success and rep.pelvis_error.rotation_deg < 1.0
    assert [s.name for s in rep.stages] == ["pelvis_cmaes", "pelvis_bobyqa"]
    assert len(rep.detections) >= 4


def test_method3_with_two_landmarks(phantom, geom, case):
    gt, img, ann = case
    from fluororegi.annotate import AnnotationSet
    keep = ("FH_L", "IOF_R")
    hms = {k: (v if k in keep else np.zeros_like(v)) for k, v in ann.heatmaps.items()}
    two = AnnotationSet(ann.labels, ann.landmarks, hms)
    rep = run_intraop(3, phantom, img, geom, two, _cfg(), seed=0, gt_pose=gt)
    assert sorted(rep.detections) == sorted(keep)
    assert len(rep.stages) == 2 and np.isfinite(rep.similarity)
    assert not rep.warnings


def test_method2_falls_back_with_few_detections(phantom, geom, case):
    gt, img, ann = case
    from fluororegi.annotate import AnnotationSet
    hms = {k: (v if k in ("FH_L", "FH_R") else np.zeros_like(v)) for k, v in ann.heatmaps.items()}
    few = AnnotationSet(ann.labels, ann.landmarks, hms)
    cfg = _cfg(stages={"pelvis_cmaes": {"params": {"maxfevals": 300}}})
    with pytest.warns(RuntimeWarning, match="single-landmark"):
        rep = run_intraop(2, phantom, img, geom, few, cfg, seed=0)
    assert rep.warnings


def test_method2_pnp_init(phantom, geom, case):
    gt, img, ann = case
    cfg = _cfg(stages={"pelvis_cmaes": {"params": {"maxfevals": 300}}})
    rep = run_intraop(2, phantom, img, geom, ann, cfg, seed=0, gt_pose=gt)
    # exact-pixel detections: the PnP start is already within a degree or two
    e0 = pelvis_pose_error(rep.init_pose.pelvis, gt.pelvis, phantom.fh_midpoint())
    assert e0.rotation_deg < 3.0
    assert rep.pelvis_error.rotation_deg < 1.0


def test_method1_fails_far_from_ap(phantom, geom):
    gt = nominal_pose(phantom, geom, (10.0, 30.0, 5.0, 60.0, -40.0, 60.0))
    img = render_drr(phantom, geom, gt, 2.0)
    rep = run_intraop(1, phantom, img, geom, None, _cfg(), seed=0, gt_pose=gt)
    assert not rep.success and rep.pelvis_error.rotation_deg > 1.0


def test_determinism(phantom, geom, case):
    gt, img, ann = case
    cfg = _cfg(stages={"pelvis_cmaes": {"params": {"maxfevals": 300}}})
    a = run_intraop(3, phantom, img, geom, ann, cfg, seed=5).to_dict(timing=False)
    b = run_intraop(3, phantom, img, geom, ann, cfg, seed=5).to_dict(timing=False)
    assert a == b


def test_femur_stages_keep_pelvis(phantom, geom, app):
    base = nominal_pose(phantom, geom, (0, 5, 0, 0, 0, 0))
    fh = phantom.landmarks["FH_L"]
    rel = pose_from_femur_rotation([8.0, -5.0, 4.0], fh, app)
    gt = base.with_pose("femur_L", base.pelvis @ rel)
    img = render_drr(phantom, geom, gt, 2.0)
    ann = generate_annotations(phantom, geom, gt)
    cfg = _cfg(register_femurs=True, refine_all=True,
               stages={"pelvis_cmaes": {"params": {"maxfevals": 300}},
                       "femur_L": {"params": {"maxfevals": 800}}, "femur_R": {"params": {"maxfevals": 300}},
                       "all_bodies": {"params": {"maxfun": 150}}})
    rep = run_intraop(3, phantom, img, geom, ann, cfg, seed=0, gt_pose=gt)
    names = [s.name for s in rep.stages]
    assert names == ["pelvis_cmaes", "pelvis_bobyqa", "femur_L", "femur_R", "all_bodies"]
    pel = rep.stages[1].pose.pelvis.matrix()
    for s in rep.stages[2:4]:
        assert np.array_equal(s.pose.pelvis.matrix(), pel)
    # a budget-limited run: the femur stage removes most of the 10 deg offset
    start = np.linalg.norm([8.0, -5.0, 4.0])
    assert rep.femur_errors["femur_L"].rotation_deg < 0.3 * start


def test_offline_pipeline_succeeds_inside_box(phantom, geom):
    gt = nominal_pose(phantom, geom, (3.0, -4.0, 2.0, 15.0, -10.0, 30.0))
    img = render_drr(phantom, geom, gt, 2.0)
    cfg = _cfg(stages={
        "p1_de": {"params": {"iters": 60, "pop": 100}},
        "p1_grid": {"box": (1, 1, 0, 2, 2, 10), "increments": (1, 1, 0, 2, 2, 10)},
        "p1_cmaes": {"params": {"maxfevals": 3000}},
        "p2_grid": {"box": (7.5, 5, 0, 0, 0, 0)},
        "p2_pso": {"params": {"iters": 5, "particles": 20}},
    })
    rep = run_offline_gt_pipeline(phantom, img, geom, cfg, seed=0, gt_pose=gt)
    assert rep.attempt == 1 and rep.success
    assert rep.pelvis_error.rotation_deg < 1.0
    assert [s.name for s in rep.stages] == ["p1_de", "p1_grid", "p1_cmaes", "p1_bobyqa"]


def test_offline_pipeline_fails_outside_regions(phantom, geom):
    # a lateral view is far outside every search box
    gt = nominal_pose(phantom, geom, (0.0, 90.0, 0.0, 0.0, 0.0, 0.0))
    img = render_drr(phantom, geom, gt, 2.0)
    cfg = _cfg(stages={
        "p1_de": {"params": {"iters": 5, "pop": 20}},
        "p1_grid": {"box": (1, 1, 0, 0, 0, 0), "increments": (1, 1, 0, 0, 0, 0)},
        "p1_cmaes": {"params": {"maxfevals": 200}},
        "p2_grid": {"box": (7.5, 5, 0, 0, 0, 0)},
        "p2_pso": {"params": {"iters": 5, "particles": 20}},
    })
    rep = run_offline_gt_pipeline(phantom, img, geom, cfg, seed=0, gt_pose=gt)
    assert rep.attempt == 2 and not rep.success
    assert [s.name for s in rep.stages][-4:] == ["p2_grid", "p2_pso", "p2_bobyqa1", "p2_bobyqa2"]
