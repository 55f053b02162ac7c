"""JSON scene, candidate, ground-truth and result files.

Transforms are 12 row-major numbers ``(R|t)``. Rotations off by more than
1e-6 from orthonormal are projected back with a warning; beyond 1e-3 the
file is rejected. Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import json
import math
import warnings
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .features import FeatureMap, SyntheticFeatureField, save_feature_tensor
from .geometry import PinholeCamera, RigidTransform
from .mesh import load_obj, save_obj
from .pipeline import CameraSpec, ObjectSpec, PipelineOutput, PoseCandidate, PoseResult, SceneConfig

ORTHO_WARN = 1e-6
ORTHO_REJECT = 1e-3


class SchemaError(ValueError):
    pass


class OrthonormalityWarning(UserWarning):
    pass


def _keys(d: Any, where: str, required: tuple[str, ...], optional: tuple[str, ...] = ()) -> Mapping:
    if not isinstance(d, Mapping):
        raise SchemaError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(required) - set(optional))
    if unknown:
        raise SchemaError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise SchemaError(f"{where}: missing key(s) {', '.join(missing)}")
    return d


def _number(x: Any, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise SchemaError(f"{where}: expected a finite number, got {x!r}")
    return float(x)


def _list(x: Any, where: str) -> list:
    if not isinstance(x, list):
        raise SchemaError(f"{where}: expected a list")
    return x


def parse_transform(values: Any, where: str = "transform") -> RigidTransform:
    vals = _list(values, where)
    if len(vals) != 12:
        raise SchemaError(f"{where}: expected 12 numbers, got {len(vals)}")
    T = RigidTransform.from_rows12([_number(v, where) for v in vals])
    err = T.orthonormality_error()
    if err > ORTHO_REJECT:
        raise SchemaError(f"{where}: rotation is not orthonormal (error {err:.3g})")
    if err > ORTHO_WARN:
        warnings.warn(f"{where}: re-orthonormalizing rotation (error {err:.3g})", OrthonormalityWarning, stacklevel=2)
        U, _, Vt = np.linalg.svd(T.rotation)
        R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
        T = RigidTransform(R, T.translation)
    return T


def _score(x: Any, where: str) -> float:
    s = _number(x, where)
    if not 0.0 <= s <= 1.0:
        raise SchemaError(f"{where}: score {s} outside [0, 1]")
    return s


def read_json(path) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


# -- scene -----------------------------------------------------------------

def camera_to_dict(c: CameraSpec) -> dict:
    cam = c.camera
    return {"view_id": c.view_id, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "T_CW": c.T_CW.to_rows12()}


def scene_to_dict(scene: SceneConfig, fields: Mapping[str, str] | None = None) -> dict:
    objs = []
    for o in scene.objects:
        d: dict = {"object_id": o.object_id, "mesh_path": o.mesh_path, "diameter": o.diameter}
        if o.symmetries:
            d["symmetries"] = [s.to_rows12() for s in o.symmetries]
        if fields and o.object_id in fields:
            d["feature_field"] = fields[o.object_id]
        objs.append(d)
    return {
        "cameras": [camera_to_dict(c) for c in scene.cameras],
        "objects": objs,
        "config": {"nms_iou": scene.nms_iou, "nms_scope": scene.nms_scope,
                   "crop_size": scene.crop_size, "cell_size": scene.cell_size},
    }


def _int(x: Any, where: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise SchemaError(f"{where}: expected an integer, got {x!r}")
    return x


def scene_from_dict(doc: Any, base_dir=".") -> SceneConfig:
    """Build a scene; mesh and feature-field paths resolve against ``base_dir``."""
    base = Path(base_dir)
    _keys(doc, "scene", ("cameras", "objects"), ("config",))
    cams = []
    for i, c in enumerate(_list(doc["cameras"], "scene.cameras")):
        w = f"scene.cameras[{i}]"
        _keys(c, w, ("view_id", "fx", "fy", "cx", "cy", "width", "height", "T_CW"))
        try:
            cam = PinholeCamera(*(_number(c[k], f"{w}.{k}") for k in ("fx", "fy", "cx", "cy")),
                                _int(c["width"], f"{w}.width"), _int(c["height"], f"{w}.height"))
        except SchemaError:
            raise
        except ValueError as exc:
            raise SchemaError(f"{w}: {exc}") from exc
        cams.append(CameraSpec(str(c["view_id"]), cam, parse_transform(c["T_CW"], f"{w}.T_CW")))
    if len({c.view_id for c in cams}) != len(cams):
        raise SchemaError("scene.cameras: duplicate view_id")
    objs = []
    for i, o in enumerate(_list(doc["objects"], "scene.objects")):
        w = f"scene.objects[{i}]"
        _keys(o, w, ("object_id", "mesh_path"), ("diameter", "symmetries", "feature_field"))
        oid = str(o["object_id"])
        mesh = load_obj(base / o["mesh_path"], oid)
        if "diameter" in o:
            d = _number(o["diameter"], f"{w}.diameter")
            if abs(d - mesh.diameter) > 1e-6 * max(1.0, d):
                warnings.warn(f"{w}: declared diameter {d} differs from mesh diameter {mesh.diameter}", stacklevel=2)
        syms = tuple(parse_transform(s, f"{w}.symmetries[{k}]")
                     for k, s in enumerate(_list(o.get("symmetries", []), f"{w}.symmetries")))
        source = None
        if "feature_field" in o:
            source = SyntheticFeatureField.from_dict(read_json(base / o["feature_field"]))
        objs.append(ObjectSpec(oid, mesh, source, syms, str(o["mesh_path"])))
    if len({o.object_id for o in objs}) != len(objs):
        raise SchemaError("scene.objects: duplicate object_id")
    cfg = _keys(doc.get("config", {}), "scene.config", (), ("nms_iou", "nms_scope", "crop_size", "cell_size"))
    kw: dict = {}
    if "nms_iou" in cfg:
        kw["nms_iou"] = _number(cfg["nms_iou"], "scene.config.nms_iou")
    if "nms_scope" in cfg:
        kw["nms_scope"] = str(cfg["nms_scope"])
    for k in ("crop_size", "cell_size"):
        if k in cfg:
            kw[k] = _int(cfg[k], f"scene.config.{k}")
    try:
        return SceneConfig(tuple(cams), tuple(objs), **kw)
    except ValueError as exc:
        raise SchemaError(f"scene: {exc}") from exc


def load_scene(path) -> SceneConfig:
    return scene_from_dict(read_json(path), Path(path).parent)


# -- candidates, ground truth, results ----------------------------------------

def candidates_to_dict(cands: list[PoseCandidate]) -> dict:
    return {"candidates": [{"object_id": c.object_id, "view_id": c.view_id, "transform": c.T_CO.to_rows12(),
                            "score": c.score} for c in cands]}


def candidates_from_dict(doc: Any) -> list[PoseCandidate]:
    _keys(doc, "candidates", ("candidates",))
    out = []
    for i, c in enumerate(_list(doc["candidates"], "candidates")):
        w = f"candidates[{i}]"
        _keys(c, w, ("object_id", "view_id", "transform", "score"))
        out.append(PoseCandidate(str(c["object_id"]), str(c["view_id"]), parse_transform(c["transform"], w),
                                 _score(c["score"], f"{w}.score")))
    return out


def gt_to_dict(poses: list[tuple[str, RigidTransform]]) -> dict:
    return {"poses": [{"object_id": oid, "transform": T.to_rows12()} for oid, T in poses]}


def gt_from_dict(doc: Any) -> list[tuple[str, RigidTransform]]:
    _keys(doc, "ground_truth", ("poses",))
    out = []
    for i, p in enumerate(_list(doc["poses"], "ground_truth.poses")):
        w = f"ground_truth.poses[{i}]"
        _keys(p, w, ("object_id", "transform"))
        out.append((str(p["object_id"]), parse_transform(p["transform"], w)))
    return out


def results_to_dict(out: PipelineOutput, config: Mapping | None = None) -> dict:
    rows = [{"object_id": r.object_id, "transform": r.pose.to_rows12(), "score": r.score,
             "source_view": r.source_view, "converged": bool(r.converged), "iterations": int(r.iterations),
             "per_view_loss": {k: float(v) for k, v in sorted(r.per_view_loss.items())}} for r in out.results]
    doc = {"config": dict(config or {}), "results": rows, "failures": list(out.failures)}
    results_from_dict(json.loads(dumps(doc)))  # self-consistency check on write
    return doc


def results_from_dict(doc: Any) -> list[PoseResult]:
    _keys(doc, "results", ("results",), ("config", "failures"))
    out = []
    for i, r in enumerate(_list(doc["results"], "results.results")):
        w = f"results[{i}]"
        _keys(r, w, ("object_id", "transform", "score"),
              ("source_view", "converged", "iterations", "per_view_loss"))
        pvl = r.get("per_view_loss", {})
        if not isinstance(pvl, Mapping):
            raise SchemaError(f"{w}.per_view_loss: expected an object")
        out.append(PoseResult(
            str(r["object_id"]), parse_transform(r["transform"], w), _score(r["score"], f"{w}.score"),
            str(r.get("source_view", "")), bool(r.get("converged", False)), int(r.get("iterations", 0)),
            {str(k): _number(v, f"{w}.per_view_loss") for k, v in pvl.items()},
        ))
    for i, f in enumerate(_list(doc.get("failures", []), "results.failures")):
        _keys(f, f"failures[{i}]", ("object_id", "source_view", "error", "message"))
    return out


# -- synthetic scene tree -------------------------------------------------------

def write_synth_scene(sc, out_dir) -> dict[str, Path]:
    """Write a generated scene as files; returns the written paths by role."""
    out = Path(out_dir)
    for sub in ("meshes", "fields", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    fields = {}
    for o in sc.scene.objects:
        save_obj(o.mesh, out / o.mesh_path)
        rel = f"fields/{o.object_id}.json"
        write_json(out / rel, sc.fields[o.object_id].to_dict())
        fields[o.object_id] = rel
    for view_id, fmap in sc.query_maps.items():
        save_feature_tensor(fmap, out / "features" / f"{view_id}.fmap")
    paths = {"scene": out / "scene.json", "candidates": out / "candidates.json", "gt": out / "gt.json",
             "features": out / "features"}
    write_json(paths["scene"], scene_to_dict(sc.scene, fields))
    write_json(paths["candidates"], candidates_to_dict(sc.candidates))
    write_json(paths["gt"], gt_to_dict(sc.ground_truth()))
    return paths


def load_feature_dir(scene: SceneConfig, features_dir) -> dict[str, FeatureMap]:
    """One ``<view_id>.fmap`` per scene camera; a missing file names its view."""
    from .features import load_feature_tensor

    maps = {}
    for c in scene.cameras:
        p = Path(features_dir) / f"{c.view_id}.fmap"
        if not p.is_file():
            raise FileNotFoundError(f"missing feature tensor for view {c.view_id!r}: {p}")
        maps[c.view_id] = load_feature_tensor(p)
    dims = {m.dim for m in maps.values()}
    if len(dims) > 1:
        raise SchemaError(f"feature tensors disagree on descriptor dimension: {sorted(dims)}")
    return maps
