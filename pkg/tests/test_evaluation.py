import numpy as np
import pytest

from fluororegi.geometry import RigidPose, compute_app_frame, so3_exp
from fluororegi.landmarks import Detection, make_heatmap
from fluororegi.evaluation import (
    combined_loss, dice_score, femur_pose_error, heatmap_loss, landmark_stats,
    pelvis_pose_error, summarize, write_csv, write_summary,
)
from oracles import dice_naive, ncc_naive, pose_error_oracle


def test_dice_examples():
    a = np.zeros((4, 4), np.uint8)
    assert dice_score(a, a).mean == 1.0
    e = np.zeros((4, 4), np.uint8)
    g = np.zeros((4, 4), np.uint8)
    e[0, :4] = 1
    g[0, 2:] = 1
    g[1, :2] = 1
    assert dice_score(e, g).per_class[1] == pytest.approx(0.5)
    e2 = np.zeros((4, 4), np.uint8)
    e2[3, :] = 2
    r = dice_score(e2, g, classes=[1, 2])
    assert np.all(r.per_class == 0.0)
    r = dice_score(a, a)
    assert r.vacuous[3] and not r.vacuous[0]


def test_dice_matches_oracle_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(0)
    perm = np.array([0, 3, 1, 2, 6, 5, 4], np.uint8)
    for _ in range(100):
        e = rng.integers(0, 7, (12, 9)).astype(np.uint8)
        g = rng.integers(0, 7, (12, 9)).astype(np.uint8)
        d = dice_score(e, g)
        assert np.max(np.abs(d.per_class - dice_naive(e, g, 7))) < 1e-12
        assert np.array_equal(d.per_class, dice_score(g, e).per_class)
        assert dice_score(perm[e], perm[g]).mean == pytest.approx(d.mean, abs=1e-15)


def test_heatmap_loss_and_combined():
    rng = np.random.default_rng(1)
    h = [rng.random((8, 8)) for _ in range(3)]
    assert heatmap_loss(h, h) == pytest.approx(1.0)
    assert heatmap_loss([-x for x in h], h) == pytest.approx(-1.0)
    for _ in range(100):
        a = [rng.random((6, 7)) for _ in range(4)]
        b = [rng.random((6, 7)) for _ in range(4)]
        oracle = np.mean([ncc_naive(x, y) for x, y in zip(a, b)])
        assert abs(heatmap_loss(a, b) - oracle) < 1e-12
        la, lb = rng.integers(0, 7, (6, 7)), rng.integers(0, 7, (6, 7))
        hand = -(np.mean(dice_naive(la, lb, 7)) + 0.5 * (oracle + 1))
        v = combined_loss(la, a, lb, b)
        assert abs(v - hand) < 1e-12 and -2 <= v <= 0
    lab = rng.integers(0, 7, (6, 7))
    assert combined_loss(lab, h, lab, h) == pytest.approx(-2.0)
    lab2 = (lab + 1) % 7
    assert combined_loss(lab2, [-x for x in h], lab, h) == pytest.approx(0.0, abs=1e-12)
    v, flags = heatmap_loss([np.zeros((3, 3))], [np.ones((3, 3))], with_flags=True)
    assert v == 0.0 and flags == [True]


def test_landmark_stats():
    gt = {"A": (np.array([5.0, 5.0]), True), "B": (np.array([10.0, 10.0]), True), "C": (np.array([0.0, 0.0]), False)}
    exact = [Detection("A", np.array([5.0, 5.0]), 1.0, True), Detection("B", np.array([10.0, 10.0]), 1.0, True),
             Detection("C", np.array([1.0, 1.0]), 0.1, False)]
    s = landmark_stats(exact, gt, 2.0)
    assert s.fnr == 0 and s.fpr == 0 and s.mean_error_px == 0
    s = landmark_stats([Detection("A", np.array([8.0, 5.0]), 0.95, True)], gt, (2.0, 2.0))
    assert s.errors_px["A"] == 3.0 and s.errors_mm["A"] == 6.0 and s.fnr == 0.5
    s = landmark_stats([], gt, 1.0)
    assert s.fnr == 1.0
    s = landmark_stats([Detection("C", np.array([0.0, 0.0]), 0.99, True)], gt, 1.0)
    assert s.fpr == 1.0


def test_pelvis_pose_error():
    gt = RigidPose(so3_exp([0.1, -0.2, 0.3]), [10, -5, 700])
    fh = np.array([0.0, -5.0, -15.0])
    e = pelvis_pose_error(gt, gt, fh)
    assert e.rotation_deg < 1e-9 and e.translation_mm < 1e-9
    # 1 degree about the world z axis through the true FH midpoint
    m = gt.apply(fh)
    T = RigidPose.from_translation(m)
    rot = RigidPose(so3_exp([0, 0, np.deg2rad(1.0)]), np.zeros(3))
    est = T @ rot @ T.inverse() @ gt
    e = pelvis_pose_error(est, gt, fh)
    assert e.rotation_xyz_deg[2] == pytest.approx(1.0) and e.rotation_deg == pytest.approx(1.0)
    assert e.translation_mm == pytest.approx(0.0, abs=1e-9)
    rng = np.random.default_rng(2)
    for _ in range(100):
        est = RigidPose(so3_exp(rng.normal(scale=0.1, size=3)), rng.normal(scale=10, size=3)) @ gt
        e = pelvis_pose_error(est, gt, fh)
        ang, rxyz, shift = pose_error_oracle(est.matrix(), gt.matrix(), fh)
        assert abs(e.rotation_deg - ang) < 1e-7
        assert np.allclose(e.rotation_xyz_deg, rxyz, atol=1e-9)
        assert np.allclose(e.translation_xyz_mm, shift, atol=1e-9)
        # rotation error does not depend on the centre
        assert pelvis_pose_error(est, gt, fh + 50).rotation_deg == pytest.approx(e.rotation_deg, abs=1e-12)


def test_femur_pose_error(phantom):
    lms = phantom.landmarks
    app = compute_app_frame(lms)
    fh = lms["FH_L"]
    gt_rel = RigidPose.identity()
    assert femur_pose_error(gt_rel, gt_rel, app, fh).rotation_deg < 1e-9
    # 1 degree about APP x through the femoral head
    ax = app.axes[:, 0]
    T = RigidPose.from_translation(fh)
    est = T @ RigidPose(so3_exp(np.deg2rad(1.0) * ax), np.zeros(3)) @ T.inverse()
    e = femur_pose_error(est, gt_rel, app, fh)
    assert e.rotation_xyz_deg[0] == pytest.approx(1.0) and e.translation_mm < 1e-9
    # matrix oracle in APP coordinates
    rng = np.random.default_rng(3)
    A = np.eye(4)
    A[:3, :3] = app.axes
    for _ in range(50):
        est = RigidPose(so3_exp(rng.normal(scale=0.2, size=3)), rng.normal(scale=5, size=3))
        gtr = RigidPose(so3_exp(rng.normal(scale=0.2, size=3)), rng.normal(scale=5, size=3))
        e = femur_pose_error(est, gtr, app, fh)
        Ai = np.linalg.inv(A)
        ang, rxyz, shift = pose_error_oracle(Ai @ est.matrix() @ A, Ai @ gtr.matrix() @ A,
                                             Ai[:3, :3] @ gtr.inverse().apply(fh))
        assert abs(e.rotation_deg - ang) < 1e-7 and np.allclose(e.rotation_xyz_deg, rxyz, atol=1e-9)
        assert np.allclose(e.translation_xyz_mm, shift, atol=1e-9)


def test_reporting(tmp_path):
    rows = [{"image": "a", "rot_deg": 1.0, "success": True}, {"image": "b", "rot_deg": 3.0, "success": False}]
    write_csv(rows, str(tmp_path / "r.csv"))
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "image,rot_deg,success"
    s = write_summary(rows, str(tmp_path / "s.json"))
    assert s["rot_deg"]["mean"] == 2.0 and s["rot_deg"]["text"] == "2.00 ± 1.41"
    assert s["success"]["count"] == 1
