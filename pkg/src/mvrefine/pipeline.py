"""Candidate aggregation, 3D NMS and the refine-and-score pipeline."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .features import (
    FeatureMap,
    NoVisibleSurface,
    PcaBasis,
    SceneObject,
    build_query_feature_map,
    build_registered_features,
    normalize_descriptors,
)
from .geometry import (
    DegenerateBox,
    PinholeCamera,
    RigidTransform,
    compose,
    inverse,
    make_crop_camera,
    project_points,
)
from .mesh import Aabb3, TriangleMesh, aabb_world
from .robust import BarronParams
from .solver import SCORE_MODES, RefineConfig, ViewContext, lm_refine, per_view_loss, score_pose

log = logging.getLogger(__name__)

NMS_SCOPES = ("inter_class", "intra_class")


class UnknownView(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class PoseCandidate:
    object_id: str
    view_id: str
    T_CO: RigidTransform
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"candidate score {self.score} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class WorldCandidate:
    object_id: str
    T_WO: RigidTransform
    score: float
    source_view: str
    aabb: Aabb3

    def sort_key(self):
        return (-self.score, self.object_id, self.source_view, tuple(self.T_WO.to_rows12()))


@dataclass(frozen=True, eq=False)
class CameraSpec:
    view_id: str
    camera: PinholeCamera
    T_CW: RigidTransform


@dataclass(frozen=True, eq=False)
class ObjectSpec:
    object_id: str
    mesh: TriangleMesh
    source: Callable[[np.ndarray], np.ndarray] | None = None
    symmetries: tuple[RigidTransform, ...] = ()
    mesh_path: str = ""
    pca: PcaBasis | None = None

    @property
    def diameter(self) -> float:
        return self.mesh.diameter


@dataclass(frozen=True, eq=False)
class SceneConfig:
    cameras: tuple[CameraSpec, ...]
    objects: tuple[ObjectSpec, ...]
    nms_iou: float = 0.4
    nms_scope: str = "inter_class"
    crop_size: int = 420
    cell_size: int = 14

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("scene needs at least one camera")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie in (0, 1)")
        if self.nms_scope not in NMS_SCOPES:
            raise ValueError(f"unknown nms_scope {self.nms_scope!r}")
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "objects", tuple(self.objects))

    def camera(self, view_id: str) -> CameraSpec:
        for c in self.cameras:
            if c.view_id == view_id:
                return c
        raise UnknownView(view_id)

    def object(self, object_id: str) -> ObjectSpec:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(f"unknown object {object_id!r}")


def to_world(c: PoseCandidate, T_CW: RigidTransform, mesh: TriangleMesh) -> WorldCandidate:
    T_WO = compose(inverse(T_CW), c.T_CO)
    return WorldCandidate(c.object_id, T_WO, c.score, c.view_id, aabb_world(mesh, T_WO))


def iou3d(a: Aabb3, b: Aabb3) -> float:
    overlap = np.clip(np.minimum(a.max, b.max) - np.maximum(a.min, b.min), 0.0, None)
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 1.0 if np.array_equal(a.min, b.min) and np.array_equal(a.max, b.max) else 0.0
    return inter / union


def nms3d(candidates: list[WorldCandidate], iou_thr: float = 0.4, scope: str = "inter_class") -> list[WorldCandidate]:
    """Greedy score-ordered suppression on world-axis-aligned boxes."""
    if scope not in NMS_SCOPES:
        raise ValueError(f"unknown nms scope {scope!r}")
    kept: list[WorldCandidate] = []
    for c in sorted(candidates, key=WorldCandidate.sort_key):
        if any(
            (scope == "inter_class" or k.object_id == c.object_id) and iou3d(k.aabb, c.aabb) > iou_thr
            for k in kept
        ):
            continue
        kept.append(c)
    return kept


class QueryProvider(Protocol):
    def crop_query(self, view_id: str, crop_cam: PinholeCamera, T_CpW: RigidTransform, cell_size: int) -> FeatureMap: ...


class TensorQuery:
    """Crop queries resampled from precomputed full-image feature tensors.

    The crop camera only rotates about the optical centre, so each crop patch
    centre maps to an original pixel through a ray rotation; the full map is
    sampled bilinearly there. Patches that fall outside the image are zero.
    """

    def __init__(self, maps: dict[str, FeatureMap], scene: SceneConfig):
        self.maps = maps
        self.scene = scene

    def crop_query(self, view_id, crop_cam, T_CpW, cell_size):
        if view_id not in self.maps:
            raise UnknownView(f"no feature tensor for view {view_id!r}")
        full = self.maps[view_id]
        spec = self.scene.camera(view_id)
        R_CpC = T_CpW.rotation @ spec.T_CW.rotation.T
        ny, nx = crop_cam.height // cell_size, crop_cam.width // cell_size
        jj, ii = np.meshgrid(np.arange(nx), np.arange(ny))
        uv = np.stack([(jj + 0.5) * cell_size, (ii + 0.5) * cell_size], axis=-1).reshape(-1, 2)
        rays = crop_cam.unproject(uv, np.ones(len(uv))) @ R_CpC
        front = rays[:, 2] > 0
        px = np.full((len(uv), 2), -1.0)
        px[front] = project_points(spec.camera, rays[front])
        ok = front & full.in_bounds(px)
        data = np.zeros((len(uv), full.dim))
        data[ok] = full.sample(px[ok])
        return FeatureMap(data.reshape(ny, nx, full.dim), cell_size)


class OracleQuery:
    """Crop queries rendered directly from ground truth.

    ``corrupt_fraction`` replaces that share of cells, either with random
    unit vectors (``corrupt_mode="noise"``) or with copies of other
    on-object cells (``"decoy"``), which look like valid object features.
    ``corrupt_views`` replaces every cell of the listed views with noise.
    """

    def __init__(self, objects: list[SceneObject], scene: SceneConfig, background_mode: str = "zeros",
                 seed: int = 0, corrupt_fraction: float = 0.0, corrupt_views: tuple[str, ...] = (),
                 corrupt_mode: str = "noise"):
        if corrupt_mode not in ("noise", "decoy"):
            raise ValueError(f"unknown corrupt_mode {corrupt_mode!r}")
        self.corrupt_mode = corrupt_mode
        self.objects = objects
        self.scene = scene
        self.background_mode = background_mode
        self.seed = seed
        self.corrupt_fraction = corrupt_fraction
        self.corrupt_views = tuple(corrupt_views)

    def _rng(self, view_id: str, salt: str, crop_cam: PinholeCamera) -> np.random.Generator:
        key = f"{view_id}|{salt}|{crop_cam.fx!r}|{crop_cam.cx!r}".encode()
        return np.random.default_rng([self.seed, zlib.crc32(key)])

    def crop_query(self, view_id, crop_cam, T_CpW, cell_size):
        bg_seed = int(self._rng(view_id, "bg", crop_cam).integers(2**31))
        fmap = build_query_feature_map(self.objects, crop_cam, T_CpW, cell_size, self.background_mode, bg_seed)
        data = np.array(fmap.data)
        if view_id in self.corrupt_views:
            rng = self._rng(view_id, "view", crop_cam)
            data = normalize_descriptors(rng.normal(size=data.shape))
        elif self.corrupt_fraction > 0:
            rng = self._rng(view_id, "cells", crop_cam)
            hit = rng.random(data.shape[:2]) < self.corrupt_fraction
            n_hit = int(hit.sum())
            fg = data[np.linalg.norm(data, axis=2) > 0]
            if self.corrupt_mode == "decoy" and len(fg):
                data[hit] = fg[rng.integers(len(fg), size=n_hit)]
            else:
                data[hit] = normalize_descriptors(rng.normal(size=(n_hit, data.shape[2])))
        return FeatureMap(data, cell_size)


@dataclass
class PoseResult:
    object_id: str
    pose: RigidTransform
    score: float
    source_view: str = ""
    converged: bool = False
    iterations: int = 0
    per_view_loss: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class PipelineOutput:
    results: list[PoseResult]
    failures: list[dict]
    stage1: list[WorldCandidate] = field(default_factory=list)


def _vertex_bbox(mesh: TriangleMesh, T_CO: RigidTransform, cam: PinholeCamera):
    Xc = T_CO.apply(mesh.vertices)
    if np.any(Xc[:, 2] <= 1e-9):
        return None
    uv = project_points(cam, Xc)
    return (*uv.min(axis=0), *uv.max(axis=0))


def _box_in_image(box, cam: PinholeCamera) -> bool:
    u0, v0, u1, v1 = box
    return u1 > 0 and v1 > 0 and u0 < cam.width and v0 < cam.height


def select_views(scene: SceneConfig, aabb: Aabb3) -> list[CameraSpec]:
    """Cameras in which the projected world box overlaps the image."""
    out = []
    for spec in scene.cameras:
        Xc = spec.T_CW.apply(aabb.corners())
        if np.any(Xc[:, 2] <= 1e-9):
            continue
        uv = project_points(spec.camera, Xc)
        if _box_in_image((*uv.min(axis=0), *uv.max(axis=0)), spec.camera):
            out.append(spec)
    return out


def build_views(scene: SceneConfig, obj: ObjectSpec, T_WO: RigidTransform, queries: QueryProvider,
                cameras: list[CameraSpec] | None = None) -> list[ViewContext]:
    """Crop, render and lift registered features for one coarse pose."""
    if obj.source is None:
        raise ValueError(f"object {obj.object_id!r} has no descriptor source")
    views = []
    cams = cameras if cameras is not None else select_views(scene, aabb_world(obj.mesh, T_WO))
    for spec in cams:
        box = _vertex_bbox(obj.mesh, compose(spec.T_CW, T_WO), spec.camera)
        if box is None or not _box_in_image(box, spec.camera):
            continue
        try:
            crop, T_CpW = make_crop_camera(spec.camera, spec.T_CW, box, scene.crop_size)
            reg = build_registered_features(obj.mesh, compose(T_CpW, T_WO), crop, obj.source,
                                            scene.cell_size, obj.pca, spec.view_id)
        except (DegenerateBox, NoVisibleSurface) as exc:
            log.debug("skipping view %s: %s", spec.view_id, exc)
            continue
        query = queries.crop_query(spec.view_id, crop, T_CpW, scene.cell_size)
        if obj.pca is not None:
            H, W, D = query.data.shape
            query = FeatureMap(obj.pca.apply(query.data.reshape(-1, D)).reshape(H, W, obj.pca.k), query.cell_size)
        views.append(ViewContext(spec.view_id, crop, T_CpW, query, reg))
    return views


def aggregate(scene: SceneConfig, candidates: list[PoseCandidate]) -> list[WorldCandidate]:
    out = []
    for c in candidates:
        spec = scene.camera(c.view_id)
        out.append(to_world(c, spec.T_CW, scene.object(c.object_id).mesh))
    return out


def run_pipeline(
    scene: SceneConfig,
    candidates: list[PoseCandidate],
    queries: QueryProvider,
    cfg: RefineConfig | None = None,
    score_mode: str = "average",
    score_barron: BarronParams | None = None,
    stages: str = "full",
) -> PipelineOutput:
    """Aggregate, suppress, refine and score pose candidates.

    ``stages`` stops early for ablations: ``"aggregate"`` returns every world
    candidate with its single-view score, ``"nms"`` the stage-1 survivors.
    Per-candidate failures are collected, never raised.
    """
    cfg = cfg or RefineConfig()
    if score_mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {score_mode!r}")
    if score_barron is None:
        score_barron = cfg.barron if cfg.barron.alpha < 0 else BarronParams()
    for c in candidates:
        scene.camera(c.view_id)
    world = aggregate(scene, candidates)
    if stages == "aggregate":
        ordered = sorted(world, key=WorldCandidate.sort_key)
        return PipelineOutput([PoseResult(w.object_id, w.T_WO, w.score, w.source_view) for w in ordered], [], ordered)
    survivors = nms3d(world, scene.nms_iou, scene.nms_scope)
    if stages == "nms":
        return PipelineOutput([PoseResult(w.object_id, w.T_WO, w.score, w.source_view) for w in survivors], [], survivors)
    if stages != "full":
        raise ValueError(f"unknown stages {stages!r}")

    refined: list[tuple[WorldCandidate, PoseResult]] = []
    failures: list[dict] = []
    for wc in survivors:
        t0 = time.perf_counter()
        obj = scene.object(wc.object_id)
        try:
            views = build_views(scene, obj, wc.T_WO, queries)
            if not views:
                raise NoVisibleSurface("candidate is not visible in any view")
            res = lm_refine(views, wc.T_WO, cfg)
            score = score_pose(views, res.pose, score_mode, score_barron, cfg)
        except Exception as exc:  # one bad candidate must not abort the batch
            failures.append({
                "object_id": wc.object_id,
                "source_view": wc.source_view,
                "error": type(exc).__name__,
                "message": str(exc),
            })
            continue
        per_view = {v.view_id: per_view_loss(v, res.pose, cfg, barron=score_barron).mean_normalized_loss
                    for v in views}
        pr = PoseResult(wc.object_id, res.pose, score, wc.source_view, res.converged, res.iterations,
                        per_view, time.perf_counter() - t0)
        refined.append((WorldCandidate(wc.object_id, res.pose, score, wc.source_view,
                                       aabb_world(obj.mesh, res.pose)), pr))

    by_id = {id(w): pr for w, pr in refined}
    final = nms3d([w for w, _ in refined], scene.nms_iou, scene.nms_scope)
    return PipelineOutput([by_id[id(w)] for w in final], failures, survivors)
