"""Command-line entry point: synth, refine, eval, gradcheck, ablate.

Exit codes: 0 success, 1 structural or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import io
from .pipeline import NMS_SCOPES, TensorQuery, UnknownView, run_pipeline
from .robust import BarronParams
from .solver import SCORE_MODES, RefineConfig

log = logging.getLogger("mvrefine")


class DataError(RuntimeError):
    pass


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _iou(s: str) -> float:
    v = float(s)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvrefine", description="Multi-view feature-metric pose refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a seeded oracle scene as files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=_positive_int, default=4)
    s.add_argument("--objects", type=_positive_int, default=2)
    s.add_argument("--rot-deg", type=_nonneg_float, default=10.0)
    s.add_argument("--trans-frac", type=_nonneg_float, default=0.05)
    s.add_argument("--decoy-rate", type=_nonneg_float, default=0.0)
    s.add_argument("--feature-dim", type=_positive_int, default=32)
    s.add_argument("--out", required=True)

    r = sub.add_parser("refine", help="aggregate, suppress, refine and score candidates")
    r.add_argument("--scene", required=True)
    r.add_argument("--candidates", required=True)
    r.add_argument("--features", required=True, help="directory with one <view_id>.fmap per camera")
    r.add_argument("--out", required=True)
    r.add_argument("--barron-alpha", type=float, default=-5.0)
    r.add_argument("--barron-c", type=float, default=0.5)
    r.add_argument("--max-iters", type=_positive_int, default=30)
    r.add_argument("--nms-iou", type=_iou, default=None)
    r.add_argument("--nms-scope", choices=NMS_SCOPES, default=None)
    r.add_argument("--oob-policy", choices=("drop", "clamp"), default="drop")
    r.add_argument("--score-mode", choices=SCORE_MODES, default="average")

    e = sub.add_parser("eval", help="AR/AP of results against ground truth")
    e.add_argument("--results", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--mspd-r", type=float, default=None, help="MSPD pixel scale (default width/640)")

    g = sub.add_parser("gradcheck", help="analytic gradient vs central differences")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--configs", type=_positive_int, default=50)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--break-jacobian", action="store_true", help="corrupt the rotation lever (negative control)")

    a = sub.add_parser("ablate", help="sweep pipeline settings on oracle scenes")
    a.add_argument("kind", choices=("nms", "cost", "scoring", "stages"))
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--scenes", type=_positive_int, default=4)
    a.add_argument("--alphas", type=_floats, default=None)
    a.add_argument("--scales", type=_floats, default=None)
    a.add_argument("--thresholds", type=_floats, default=None)
    a.add_argument("--corrupt-fraction", type=_nonneg_float, default=0.2)
    a.add_argument("--max-iters", type=_positive_int, default=30)
    a.add_argument("--out", default=None, help="write machine-readable rows as JSON")
    return p


def cmd_synth(args) -> int:
    from .synth import SynthSpec, generate

    spec = SynthSpec(seed=args.seed, n_views=args.views, n_objects=args.objects, perturb_rot_deg=args.rot_deg,
                     perturb_trans_frac=args.trans_frac, decoy_rate=args.decoy_rate, feature_dim=args.feature_dim)
    paths = io.write_synth_scene(generate(spec), args.out)
    print(f"wrote scene {paths['scene']}")
    return 0


def cmd_refine(args) -> int:
    from dataclasses import replace

    try:
        barron = BarronParams(args.barron_alpha, args.barron_c)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    scene = io.load_scene(args.scene)
    if args.nms_iou is not None or args.nms_scope is not None:
        scene = replace(scene, nms_iou=args.nms_iou or scene.nms_iou, nms_scope=args.nms_scope or scene.nms_scope)
    for o in scene.objects:
        if o.source is None:
            raise DataError(f"object {o.object_id!r} has no feature_field")
    cands = io.candidates_from_dict(io.read_json(args.candidates))
    for c in cands:
        scene.camera(c.view_id)
        scene.object(c.object_id)
    maps = io.load_feature_dir(scene, args.features)
    cfg = RefineConfig(max_iters=args.max_iters, oob_policy=args.oob_policy, barron=barron)
    out = run_pipeline(scene, cands, TensorQuery(maps, scene), cfg, score_mode=args.score_mode)
    meta = {"barron_alpha": barron.alpha, "barron_c": barron.c, "max_iters": cfg.max_iters,
            "nms_iou": scene.nms_iou, "nms_scope": scene.nms_scope, "oob_policy": cfg.oob_policy,
            "score_mode": args.score_mode}
    io.write_json(args.out, io.results_to_dict(out, meta))
    for r in out.results:
        print(f"{r.object_id} score={r.score:.6f} converged={r.converged} iterations={r.iterations}")
    for f in out.failures:
        print(f"failed {f['object_id']} from {f['source_view']}: {f['error']}: {f['message']}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import SymmetrySet, evaluate

    scene = io.load_scene(args.scene)
    results = io.results_from_dict(io.read_json(args.results))
    gt = io.gt_from_dict(io.read_json(args.gt))
    known = {o.object_id for o in scene.objects}
    bad = sorted({oid for oid, _ in gt} - known) + sorted({r.object_id for r in results} - known)
    if bad:
        raise DataError(f"object ids not in scene: {', '.join(sorted(set(bad)))}")
    meshes = {o.object_id: o.mesh for o in scene.objects}
    syms = {o.object_id: SymmetrySet(o.symmetries) for o in scene.objects}
    cams = [(c.camera, c.T_CW) for c in scene.cameras]
    rep = evaluate(results, gt, meshes, syms, cams, args.mspd_r)
    print(f"AR {rep.ar:.4f} (mssd {rep.ar_mssd:.4f}, mspd {rep.ar_mspd:.4f})")
    print(f"AP {rep.ap:.4f} (mssd {rep.ap_mssd:.4f}, mspd {rep.ap_mspd:.4f})")
    print("mssd_frac  recall  ap")
    for t, rc, ap in zip(rep.mssd_thresholds, rep.recall_mssd, rep.ap_by_threshold_mssd):
        print(f"{t:9.2f}  {rc:6.4f}  {ap:6.4f}")
    print("mspd_px    recall  ap")
    for t, rc, ap in zip(rep.mspd_thresholds, rep.recall_mspd, rep.ap_by_threshold_mspd):
        print(f"{t:9.2f}  {rc:6.4f}  {ap:6.4f}")
    if args.out:
        io.write_json(args.out, rep.to_dict())
    return 0


def cmd_gradcheck(args) -> int:
    from .diagnostics import gradcheck_suite

    checks = gradcheck_suite(args.configs, args.seed, args.break_jacobian)
    coord = np.zeros(6)
    for i, c in enumerate(checks):
        den = max(np.linalg.norm(c.numeric), 1e-300)
        coord = np.maximum(coord, np.abs(c.analytic - c.numeric) / den)
        print(f"config {args.seed + i:4d}  rel_error {c.rel_error:.3e}  unmasked {c.rel_error_unmasked:.3e}  "
              f"kink_features {c.n_masked}/{c.n_features}")
    worst = max(c.rel_error for c in checks)
    names = ("v_x", "v_y", "v_z", "w_x", "w_y", "w_z")
    print("per-coordinate max error (unmasked, relative to |fd|): "
          + "  ".join(f"{n}={e:.3e}" for n, e in zip(names, coord)))
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} max rel_error {worst:.3e} over {len(checks)} configs (tol {args.tol:g})")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    from . import ablation

    seeds = range(args.seed, args.seed + args.scenes)
    cfg = RefineConfig(max_iters=args.max_iters)
    if args.kind == "cost":
        scenes = ablation.cost_scenes(seeds)
        rows = ablation.ablate_cost(scenes, tuple(args.alphas or ablation.COST_ALPHAS),
                                    tuple(args.scales or ablation.COST_SCALES), args.corrupt_fraction, cfg)
    elif args.kind == "nms":
        scenes = ablation.make_scenes(seeds)
        rows = ablation.ablate_nms(scenes, tuple(args.thresholds or ablation.NMS_THRESHOLDS), cfg=cfg)
    elif args.kind == "scoring":
        rows = ablation.ablate_scoring(ablation.make_scenes(seeds), cfg=cfg)
    else:
        rows = ablation.ablate_stages(ablation.make_scenes(seeds), cfg)
    print(ablation.format_table(rows))
    if args.out:
        io.write_json(args.out, {"kind": args.kind, "rows": [r.to_dict() for r in rows]})
    return 0


COMMANDS = {"synth": cmd_synth, "refine": cmd_refine, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, io.SchemaError, UnknownView, KeyError, FileNotFoundError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
