"""Command-line entry point: ``fluororegi <command> ...``.

Exit codes: 0 success, 1 usage or input error, 2 registration failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import annotate as ann_mod
from .evaluation import combined_loss, dice_score, heatmap_loss, landmark_stats, summarize, write_csv
from .geometry import ProjectionGeometry
from .imaging import Image2D, read_image, write_image
from .landmarks import detections_to_json, extract_landmarks
from .phantom import PhantomSpec, make_phantom
from .projector import MultiBodyPose, read_scene, render_drr, write_scene
from .register import RegistrationConfig, nominal_pose, run_intraop, run_offline_gt_pipeline

log = logging.getLogger("fluororegi")


class UsageError(Exception):
    pass


def _load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from None


def _dump(obj, path: str) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=ann_mod._json_default)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FLUOROREGI_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FLUOROREGI_THREADS must be an integer, got {env!r}") from None
    return 1


def _geometry(path: str) -> ProjectionGeometry:
    try:
        return ProjectionGeometry.from_dict(_load_json(path))
    except KeyError as e:
        raise UsageError(f"{path}: missing geometry key {e}") from None


def _pose(path: str) -> MultiBodyPose:
    d = _load_json(path)
    try:
        return MultiBodyPose.from_dict(d.get("pose", d))
    except Exception as e:   # malformed matrices
        raise UsageError(f"{path}: invalid pose ({e})") from None


def _scene(path: str):
    try:
        return read_scene(path)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


def _image(path: str) -> Image2D:
    if not path.endswith(".json"):
        path = path + ".json"
    if not os.path.exists(path):
        raise UsageError(f"file not found: {path}")
    img = read_image(path)
    if not isinstance(img, Image2D):
        raise UsageError(f"{path} is a label image, expected intensities")
    return img


def _reg_config(args) -> RegistrationConfig:
    d = _load_json(args.config) if args.config else {}
    for key in ("level_divisor", "step_mm"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    d["threads"] = _threads(args)
    if getattr(args, "no_femurs", False):
        d["register_femurs"] = False
    try:
        return RegistrationConfig.from_dict(d)
    except (KeyError, TypeError) as e:
        raise UsageError(f"config: {e}") from None


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    d = _load_json(args.config) if args.config else {}
    d.setdefault("seed", args.seed)
    for key in ("n_vox", "spacing_mm", "scale"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    try:
        spec = PhantomSpec.from_dict(d)
    except (KeyError, TypeError) as e:
        raise UsageError(f"phantom config: {e}") from None
    scene = make_phantom(spec)
    write_scene(args.out, scene)
    _dump(spec.to_dict(), os.path.join(args.out, "phantom.json"))
    log.info("phantom written to %s", args.out)
    return 0


def _render_pose(args, scene, g) -> MultiBodyPose:
    if args.pose:
        return _pose(args.pose)
    return nominal_pose(scene, g, args.offset)


def cmd_render(args) -> int:
    scene = _scene(args.scene)
    g = _geometry(args.geometry)
    pose = _render_pose(args, scene, g)
    img = render_drr(scene, g, pose, args.step_mm)
    if args.noise > 0:
        rng = np.random.default_rng(args.seed)
        img = Image2D(img.pixels + rng.normal(0.0, args.noise * img.pixels.max(), img.shape), img.pixel_spacing)
    write_image(args.out, img)
    _dump({"pose": pose.to_dict()}, args.out + "_pose.json")
    return 0


def cmd_annotate(args) -> int:
    scene = _scene(args.scene)
    g = _geometry(args.geometry)
    pose = _render_pose(args, scene, g)
    ann = ann_mod.generate_annotations(scene, g, pose, sigma_px=args.sigma_px, step_mm=args.step_mm)
    ann.provenance["seed"] = args.seed
    img = render_drr(scene, g, pose, args.step_mm) if args.with_image else None
    ann_mod.write_annotated(args.out, img, ann)
    return 0


def cmd_augment(args) -> int:
    img, ann = ann_mod.read_annotated(args.data)
    if img is None:
        raise UsageError(f"{args.data} has no image to augment")
    d = _load_json(args.config) if args.config else {}
    try:
        params = ann_mod.AugmentParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except TypeError as e:
        raise UsageError(f"augment config: {e}") from None
    img2, ann2 = ann_mod.augment(img, ann, params, args.seed)
    ann2.provenance["seed"] = args.seed
    ann_mod.write_annotated(args.out, img2, ann2)
    return 0


def _finish_registration(report, args) -> int:
    out = report.to_dict()
    _dump(out, args.out)
    print(json.dumps({"success": report.success, "similarity": report.similarity,
                      **({"pelvis_rot_deg": report.pelvis_error.rotation_deg} if report.pelvis_error else {})}))
    return 0 if report.success else 2


def cmd_register(args) -> int:
    scene = _scene(args.scene)
    g = _geometry(args.geometry)
    img = _image(args.image)
    cfg = _reg_config(args)
    ann = None
    if args.annotations:
        if not os.path.isdir(args.annotations):
            raise UsageError(f"annotation directory not found: {args.annotations}")
        _, ann = ann_mod.read_annotated(args.annotations)
    if args.method > 1 and ann is None:
        raise UsageError(f"method {args.method} needs --annotations")
    gt = _pose(args.gt_pose) if args.gt_pose else None
    report = run_intraop(args.method, scene, img, g, ann, cfg, args.seed, gt)
    return _finish_registration(report, args)


def cmd_gt_pipeline(args) -> int:
    scene = _scene(args.scene)
    g = _geometry(args.geometry)
    img = _image(args.image)
    cfg = _reg_config(args)
    gt = _pose(args.gt_pose) if args.gt_pose else None
    report = run_offline_gt_pipeline(scene, img, g, cfg, args.seed, gt)
    return _finish_registration(report, args)


def _sample_dirs(path: str) -> list[str]:
    if os.path.exists(os.path.join(path, "labels.json")):
        return [path]
    subs = sorted(d for d in glob.glob(os.path.join(path, "*")) if os.path.exists(os.path.join(d, "labels.json")))
    if not subs:
        raise UsageError(f"no annotated samples in {path}")
    return subs


def cmd_eval(args) -> int:
    rows = []
    os.makedirs(args.out, exist_ok=True)
    if args.pred:
        if not args.truth:
            raise UsageError("--pred needs --truth")
        preds, truths = _sample_dirs(args.pred), _sample_dirs(args.truth)
        if len(preds) != len(truths):
            raise UsageError("prediction and truth sample counts differ")
        for p, t in zip(preds, truths):
            _, pa = ann_mod.read_annotated(p)
            _, ta = ann_mod.read_annotated(t)
            names = [n for n in ta.heatmaps if n in pa.heatmaps]
            d = dice_score(pa.labels, ta.labels)
            h = heatmap_loss([pa.heatmaps[n] for n in names], [ta.heatmaps[n] for n in names])
            dets = extract_landmarks({n: pa.heatmaps[n] for n in names}, pa.labels)
            st = landmark_stats(dets, ta.truth(), ta.labels.pixel_spacing)
            row = {"sample": os.path.basename(os.path.normpath(p)), "dice_mean": d.mean,
                   **{f"dice_{k}": float(v) for k, v in enumerate(d.per_class)},
                   "heatmap_ncc": h,
                   "combined_loss": combined_loss(pa.labels, [pa.heatmaps[n] for n in names],
                                                  ta.labels, [ta.heatmaps[n] for n in names]),
                   "landmark_err_mm": st.mean_error_mm, "fnr": st.fnr, "fpr": st.fpr}
            rows.append(row)
            if args.detections:
                with open(os.path.join(args.out, row["sample"] + "_detections.json"), "w") as fh:
                    fh.write(detections_to_json(dets))
    for path in args.reports or []:
        rep = _load_json(path)
        row = {"report": os.path.basename(path), "success": bool(rep.get("success"))}
        for key in ("pelvis_error",):
            if key in rep:
                row.update({f"pelvis_{k}": v for k, v in rep[key].items()})
        for side, err in rep.get("femur_errors", {}).items():
            row.update({f"{side}_{k}": v for k, v in err.items()})
        rows.append(row)
    if not rows:
        raise UsageError("nothing to evaluate: give --pred/--truth and/or --reports")
    write_csv(rows, os.path.join(args.out, "rows.csv"))
    summary = summarize(rows)
    _dump(summary, os.path.join(args.out, "summary.json"))
    for k, v in summary.items():
        print(f"{k}: {v['text']}")
    return 0


# --------------------------------------------------------------------------
# parser


def _floats(n: int):
    def parse(s: str):
        try:
            v = [float(a) for a in s.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers") from None
        if len(v) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fluororegi", description="2D/3D pelvis and femur registration toolkit")
    ap.add_argument("--threads", type=int, default=None, help="objective evaluation threads (env FLUOROREGI_THREADS)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a procedural pelvis/femur phantom")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="phantom JSON (PhantomSpec fields)")
    p.add_argument("--n-vox", dest="n_vox", type=int)
    p.add_argument("--spacing-mm", dest="spacing_mm", type=float)
    p.add_argument("--scale", type=float)
    p.set_defaults(func=cmd_phantom)

    def pose_args(p):
        p.add_argument("--scene", required=True)
        p.add_argument("--geometry", required=True)
        p.add_argument("--pose", help="pose JSON; default is the nominal AP pose")
        p.add_argument("--offset", type=_floats(6), help="rx,ry,rz,tx,ty,tz offset from the AP pose (deg, mm)")
        p.add_argument("--step-mm", dest="step_mm", type=float, default=1.0)

    p = sub.add_parser("render", help="render a DRR")
    pose_args(p)
    p.add_argument("--out", required=True, help="output path prefix (writes .raw/.json)")
    p.add_argument("--noise", type=float, default=0.0, help="additive noise sigma as a fraction of the peak")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("annotate", help="write a ground-truth annotated sample")
    pose_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma-px", dest="sigma_px", type=float, default=2.5)
    p.add_argument("--with-image", action="store_true")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("augment", help="augment an annotated sample")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="AugmentParams JSON")
    p.set_defaults(func=cmd_augment)

    def reg_args(p):
        p.add_argument("--scene", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--geometry", required=True)
        p.add_argument("--config", help="RegistrationConfig JSON")
        p.add_argument("--gt-pose", dest="gt_pose", help="ground-truth pose JSON for the success check")
        p.add_argument("--level-divisor", dest="level_divisor", type=int)
        p.add_argument("--step-mm", dest="step_mm", type=float)
        p.add_argument("--no-femurs", dest="no_femurs", action="store_true")
        p.add_argument("--out", required=True, help="report JSON")

    p = sub.add_parser("register", help="intraoperative registration (methods 1-3)")
    reg_args(p)
    p.add_argument("--method", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--annotations", help="annotated sample directory (segmentation and heatmaps)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("gt-pipeline", help="offline two-attempt ground-truth registration")
    reg_args(p)
    p.set_defaults(func=cmd_gt_pipeline)

    p = sub.add_parser("eval", help="score predictions and registration reports")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--reports", nargs="*")
    p.add_argument("--detections", action="store_true", help="also write extracted detections")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as e:
        print(f"fluororegi: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"fluororegi: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
