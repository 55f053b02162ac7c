"""Symmetry-aware pose errors and AR/AP summaries.

Correctness at a threshold uses a strict ``error < threshold``. Detections
are matched in descending score order; each takes the unmatched ground-truth
instance of the same object with the smallest error, provided that error
passes the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import MIN_DEPTH, PinholeCamera, RigidTransform, compose, project_points
from .mesh import TriangleMesh

MSSD_FRACTIONS = tuple(k / 20 for k in range(1, 11))  # 5% .. 50% of the diameter
MSPD_PIXELS = tuple(float(k) for k in range(5, 55, 5))  # times r


@dataclass(frozen=True)
class SymmetrySet:
    transforms: tuple[RigidTransform, ...] = ()

    def __post_init__(self):
        ts = tuple(self.transforms)
        if not any(np.allclose(t.matrix(), np.eye(4), atol=1e-12) for t in ts):
            ts = (RigidTransform.identity(),) + ts
        object.__setattr__(self, "transforms", ts)

    def __iter__(self):
        return iter(self.transforms)

    def __len__(self):
        return len(self.transforms)


@dataclass(frozen=True)
class PoseError:
    mssd: float
    mspd: float


@dataclass(frozen=True)
class Detection:
    object_id: str
    pose: RigidTransform
    score: float = 1.0


@dataclass
class EvalReport:
    ar_mssd: float
    ar_mspd: float
    ar: float
    ap_mssd: float
    ap_mspd: float
    ap: float
    mssd_thresholds: list[float] = field(default_factory=list)
    mspd_thresholds: list[float] = field(default_factory=list)
    recall_mssd: list[float] = field(default_factory=list)
    recall_mspd: list[float] = field(default_factory=list)
    ap_by_threshold_mssd: list[float] = field(default_factory=list)
    ap_by_threshold_mspd: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _syms(sym: SymmetrySet | None) -> SymmetrySet:
    return sym if sym is not None else SymmetrySet()


def mssd(T_est: RigidTransform, T_gt: RigidTransform, mesh: TriangleMesh, sym: SymmetrySet | None = None) -> float:
    V = mesh.vertices
    a = T_est.apply(V)
    return float(min(np.linalg.norm(a - compose(T_gt, S).apply(V), axis=1).max() for S in _syms(sym)))


def _projections(cam: PinholeCamera, T_CO: RigidTransform, V: np.ndarray) -> np.ndarray | None:
    Xc = T_CO.apply(V)
    if np.any(Xc[:, 2] <= MIN_DEPTH):
        return None
    return project_points(cam, Xc)


def mspd(T_est: RigidTransform, T_gt: RigidTransform, mesh: TriangleMesh, sym: SymmetrySet | None,
         cam: PinholeCamera, T_CW: RigidTransform) -> float:
    """Max projected vertex distance in pixels; ``inf`` if a vertex is behind the camera."""
    V = mesh.vertices
    a = _projections(cam, compose(T_CW, T_est), V)
    if a is None:
        return float("inf")
    best = float("inf")
    for S in _syms(sym):
        b = _projections(cam, compose(T_CW, compose(T_gt, S)), V)
        if b is not None:
            best = min(best, float(np.linalg.norm(a - b, axis=1).max()))
    return best


def mspd_views(T_est, T_gt, mesh, sym, cameras: Sequence[tuple[PinholeCamera, RigidTransform]]) -> float:
    """Worst-view MSPD over ``(camera, T_CW)`` pairs."""
    if not cameras:
        raise ValueError("mspd_views needs at least one camera")
    return max(mspd(T_est, T_gt, mesh, sym, cam, T_CW) for cam, T_CW in cameras)


def _error_table(results, ground_truth, meshes, syms, cameras):
    E1 = np.full((len(results), len(ground_truth)), np.inf)
    E2 = np.full_like(E1, np.inf)
    for i, r in enumerate(results):
        for j, (oid, T_gt) in enumerate(ground_truth):
            if r.object_id != oid:
                continue
            s = syms.get(oid) if syms else None
            E1[i, j] = mssd(r.pose, T_gt, meshes[oid], s)
            E2[i, j] = mspd_views(r.pose, T_gt, meshes[oid], s, cameras)
    return E1, E2


def _match(order: np.ndarray, err: np.ndarray, thr: np.ndarray) -> np.ndarray:
    """Per detection (in ``order``), True if it matched some ground truth under ``thr``."""
    n_gt = err.shape[1]
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for k, i in enumerate(order):
        e = np.where(taken | ~(err[i] < thr), np.inf, err[i])
        if n_gt and np.isfinite(e.min()):
            taken[int(np.argmin(e))] = True
            tp[k] = True
    return tp


def _ap(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _thresholds(ground_truth, meshes, r):
    t1 = np.array([[f * meshes[oid].diameter for oid, _ in ground_truth] for f in MSSD_FRACTIONS]).reshape(
        len(MSSD_FRACTIONS), len(ground_truth))
    t2 = np.array([p * r for p in MSPD_PIXELS])
    return t1, t2


def evaluate(results: Iterable, ground_truth: Sequence[tuple[str, RigidTransform]],
             meshes: dict[str, TriangleMesh], syms: dict[str, SymmetrySet] | None,
             cameras: Sequence[tuple[PinholeCamera, RigidTransform]], r: float | None = None) -> EvalReport:
    """AR and AP over the MSSD and MSPD threshold grids.

    ``results`` are objects with ``object_id``, ``pose`` and ``score``.
    ``r`` defaults to the first camera's width over 640.
    """
    results = list(results)
    if r is None:
        r = cameras[0][0].width / 640.0
    n_gt = len(ground_truth)
    order = np.array(sorted(range(len(results)), key=lambda i: -results[i].score), dtype=np.int64)
    E1, E2 = _error_table(results, ground_truth, meshes, syms, cameras)
    t1, t2 = _thresholds(ground_truth, meshes, r)
    rec1, rec2, ap1, ap2 = [], [], [], []
    for thr in t1:
        tp = _match(order, E1, thr)
        rec1.append(float(tp.sum() / n_gt) if n_gt else 0.0)
        ap1.append(_ap(tp, n_gt))
    for thr in t2:
        tp = _match(order, E2, np.full(n_gt, thr))
        rec2.append(float(tp.sum() / n_gt) if n_gt else 0.0)
        ap2.append(_ap(tp, n_gt))
    ar1, ar2 = float(np.mean(rec1)), float(np.mean(rec2))
    apm1, apm2 = float(np.mean(ap1)), float(np.mean(ap2))
    return EvalReport(
        ar1, ar2, 0.5 * (ar1 + ar2), apm1, apm2, 0.5 * (apm1 + apm2),
        [float(f) for f in MSSD_FRACTIONS], [float(x) for x in t2], rec1, rec2, ap1, ap2,
    )


def average_recall(results, ground_truth, meshes, syms, cameras, r=None) -> tuple[float, float, float]:
    rep = evaluate(results, ground_truth, meshes, syms, cameras, r)
    return rep.ar_mssd, rep.ar_mspd, rep.ar


def average_precision(results, ground_truth, meshes, syms, cameras, r=None) -> tuple[float, float, float]:
    rep = evaluate(results, ground_truth, meshes, syms, cameras, r)
    return rep.ap_mssd, rep.ap_mspd, rep.ap
