"""Finite-difference checks of the analytic objective gradient.

The objective is piecewise smooth: bilinear interpolation has kinks on cell
boundaries and features switch on or off at the crop border. A central
difference straddling such a kink is not a derivative of anything, so the
masked comparison drops, per twist coordinate, every feature whose cell or
inlier status differs across ``{-h, 0, +h}``. Dropped features are removed
from both the numeric and the analytic side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, compose, exp_se3
from .solver import RefineConfig, ViewContext, feature_costs, feature_gradients


@dataclass(frozen=True)
class GradCheck:
    analytic: np.ndarray  # (6,) full gradient
    numeric: np.ndarray  # (6,) central differences of the full objective
    rel_error: float  # over features smooth within +-h
    rel_error_unmasked: float
    n_features: int
    n_masked: int  # feature-coordinate pairs dropped

    def passed(self, tol: float = 1e-4) -> bool:
        return self.rel_error < tol


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    den = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else float(np.linalg.norm(a))


def gradient_check(views: list[ViewContext], T_WO: RigidTransform, cfg: RefineConfig | None = None,
                   h: float = 1e-5, break_jacobian: bool = False) -> GradCheck:
    cfg = cfg or RefineConfig()
    grads = [feature_gradients(v, T_WO, cfg, break_jacobian) for v in views]
    base = [feature_costs(v, T_WO, cfg) for v in views]
    analytic = sum(g.sum(axis=0) for g in grads)
    numeric = np.zeros(6)
    a_masked = np.zeros(6)
    n_masked_fd = np.zeros(6)
    n_masked = 0
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        plus = [feature_costs(v, compose(exp_se3(d), T_WO), cfg) for v in views]
        minus = [feature_costs(v, compose(exp_se3(-d), T_WO), cfg) for v in views]
        for g, (_, c0), (cp, cellp), (cm, cellm) in zip(grads, base, plus, minus):
            numeric[k] += (cp.sum() - cm.sum()) / (2 * h)
            smooth = np.all(cellp == c0, axis=1) & np.all(cellm == c0, axis=1)
            n_masked += int((~smooth).sum())
            n_masked_fd[k] += float((cp[smooth] - cm[smooth]).sum() / (2 * h))
            a_masked[k] += float(g[smooth, k].sum())
    n = sum(len(v.registered) for v in views)
    return GradCheck(analytic, numeric, _rel(a_masked, n_masked_fd), _rel(analytic, numeric), n, n_masked)


def gradcheck_suite(n_configs: int = 50, seed: int = 0, break_jacobian: bool = False,
                    h: float = 1e-5) -> list[GradCheck]:
    """Gradient checks on seeded scenes, one object per scene.

    Registered features come from an 8 deg / 5% coarse pose; the gradient is
    checked at a different 3 deg / 2% pose, so residuals are nonzero.
    """
    from .pipeline import build_views
    from .synth import SynthSpec, generate, perturb_pose

    out = []
    for s in range(seed, seed + n_configs):
        sc = generate(SynthSpec(seed=s))
        obj = sc.scene.objects[0]
        T_gt = sc.gt_poses[obj.object_id]
        d = obj.diameter
        coarse = perturb_pose(T_gt, 8.0, 0.05 * d, s + 7, center=T_gt.translation)
        views = build_views(sc.scene, obj, coarse, sc.oracle())
        T = perturb_pose(T_gt, 3.0, 0.02 * d, s + 99, center=T_gt.translation)
        out.append(gradient_check(views, T, h=h, break_jacobian=break_jacobian))
    return out
