"""Multi-view feature-metric loss, its Jacobian, and Levenberg-Marquardt.

The pose update is a world-frame twist applied on the left,
``T_WO <- exp(delta) T_WO``, shared by all views. Registered features stay
fixed for the whole solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, RegisteredFeatureSet
from .geometry import MIN_DEPTH, PinholeCamera, RigidTransform, compose, exp_se3, project_jacobians, project_points
from .robust import BarronParams, rho, rho_weight

log = logging.getLogger(__name__)

SCORE_MODES = ("average", "min", "max")


class SingularNormalEquations(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class ViewContext:
    view_id: str
    crop_cam: PinholeCamera
    T_CpW: RigidTransform
    query: FeatureMap
    registered: RegisteredFeatureSet

    def __post_init__(self):
        if len(self.registered) and self.query.dim != self.registered.dim:
            raise ValueError(
                f"view {self.view_id}: query dim {self.query.dim} != registered dim {self.registered.dim}"
            )


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 30
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    step_tol: float = 1e-6
    loss_tol: float = 1e-8
    oob_policy: str = "drop"
    barron: BarronParams = field(default_factory=BarronParams)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lambda_init > 0:
            raise ValueError("lambda_init must be positive")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")
        if self.oob_policy not in ("drop", "clamp"):
            raise ValueError(f"unknown oob_policy {self.oob_policy!r}")


@dataclass(frozen=True)
class ViewLoss:
    sum_loss: float
    mean_normalized_loss: float
    n_inliers: int
    n_total: int
    normalized: bool = True


@dataclass
class RefineResult:
    pose: RigidTransform
    converged: bool
    iterations: int
    loss_trace: list[float]
    per_view_loss: dict[str, float]
    status: str = "ok"


@dataclass
class _Terms:
    inlier: np.ndarray  # (N,) bool over all registered features
    residual: np.ndarray  # (n_in, D)
    norm: np.ndarray  # (n_in,)
    cost: np.ndarray  # (n_in,)
    cells: np.ndarray  # (N, 2) bilinear base cell per feature, -1 when excluded
    jacobian: np.ndarray | None = None  # (n_in, D, 6)


def _terms(view: ViewContext, T_WO: RigidTransform, cfg: RefineConfig, jacobian: bool = False,
           break_jacobian: bool = False) -> _Terms:
    reg = view.registered
    Xw = T_WO.apply(reg.points)
    Xc = view.T_CpW.apply(Xw)
    front = Xc[:, 2] > MIN_DEPTH
    uv = np.full((len(Xc), 2), -1.0)
    uv[front] = project_points(view.crop_cam, Xc[front])
    q = view.query
    frozen = np.zeros((len(Xc), 2), dtype=bool)
    if cfg.oob_policy == "drop":
        inlier = front & q.in_bounds(uv)
    else:
        inlier = front
        hi = np.array([q.width * q.cell_size, q.height * q.cell_size]) * (1 - 1e-12)
        clipped = np.clip(uv, 0.0, hi)
        frozen = clipped != uv
        uv = clipped
    idx = np.nonzero(inlier)[0]
    uv_in = uv[idx]
    r = reg.descriptors[idx] - q.sample(uv_in)
    n = np.linalg.norm(r, axis=1)
    cells = np.full((len(Xc), 2), -1, dtype=np.int64)
    (j0, _, _), (i0, _, _) = q._lattice(uv_in)
    cells[idx, 0] = i0
    cells[idx, 1] = j0
    out = _Terms(inlier, r, n, rho(n, cfg.barron), cells)
    if jacobian:
        G = q.gradient(uv_in)  # (n, D, 2)
        G = np.where(frozen[idx][:, None, :], 0.0, G)
        A = project_jacobians(view.crop_cam, Xc[idx]) @ view.T_CpW.rotation  # (n, 2, 3)
        lever = Xw[idx][:, None, :]
        if break_jacobian:
            lever = -lever
        B = np.concatenate([A, np.cross(lever, A)], axis=2)  # (n, 2, 6) in (v, omega) order
        out.jacobian = -np.einsum("nda,nak->ndk", G, B)
    return out


def per_view_loss(view: ViewContext, T_WO: RigidTransform, cfg: RefineConfig | None = None,
                  barron: BarronParams | None = None) -> ViewLoss:
    """Feature-metric loss of one view at world pose ``T_WO``.

    Features that land behind the camera, or outside the crop under the
    ``drop`` policy, are excluded from the sum but count at the loss
    saturation value in the normalised mean, so an invisible object scores 0.
    """
    cfg = cfg or RefineConfig()
    p = barron or cfg.barron
    t = _terms(view, T_WO, cfg if barron is None else _with_barron(cfg, p))
    n_total = len(view.registered)
    n_in = int(t.inlier.sum())
    total = float(t.cost.sum())
    sup = p.saturation
    if not np.isfinite(sup):
        mean = total / n_total if n_total else 0.0
        return ViewLoss(total, mean, n_in, n_total, normalized=False)
    if n_total == 0:
        return ViewLoss(0.0, 1.0, 0, 0)
    mean = (total + (n_total - n_in) * sup) / n_total / sup
    return ViewLoss(total, float(min(max(mean, 0.0), 1.0)), n_in, n_total)


def _with_barron(cfg: RefineConfig, p: BarronParams) -> RefineConfig:
    from dataclasses import replace

    return replace(cfg, barron=p)


def _weighted(t: _Terms, cfg: RefineConfig) -> tuple[np.ndarray, np.ndarray]:
    sw = np.sqrt(rho_weight(t.norm, cfg.barron))
    r = (sw[:, None] * t.residual).reshape(-1)
    J = (sw[:, None, None] * t.jacobian).reshape(-1, 6)
    return r, J


def residuals_and_jacobian(view: ViewContext, T_WO: RigidTransform, cfg: RefineConfig | None = None,
                           break_jacobian: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """IRLS-weighted residual ``(n*D,)`` and Jacobian ``(n*D, 6)`` stacks.

    ``J.T @ r`` is the gradient of the robust objective w.r.t. a left world
    twist in ``(v, omega)`` order.
    """
    cfg = cfg or RefineConfig()
    return _weighted(_terms(view, T_WO, cfg, jacobian=True, break_jacobian=break_jacobian), cfg)


def objective(views: list[ViewContext], T_WO: RigidTransform, cfg: RefineConfig | None = None) -> float:
    cfg = cfg or RefineConfig()
    return float(sum(per_view_loss(v, T_WO, cfg).sum_loss for v in views))


def normal_equations(views: list[ViewContext], T_WO: RigidTransform, cfg: RefineConfig,
                     break_jacobian: bool = False) -> tuple[np.ndarray, np.ndarray, float]:
    """``(H, g, E)`` summed over views in list order."""
    H = np.zeros((6, 6))
    g = np.zeros(6)
    E = 0.0
    for view in views:
        t = _terms(view, T_WO, cfg, jacobian=True, break_jacobian=break_jacobian)
        r, J = _weighted(t, cfg)
        H += J.T @ J
        g += J.T @ r
        E += float(t.cost.sum())
    return H, g, E


def feature_gradients(view: ViewContext, T_WO: RigidTransform, cfg: RefineConfig | None = None,
                      break_jacobian: bool = False) -> np.ndarray:
    """Per-feature objective gradient ``w_i J_i^T r_i``, zero rows for excluded features."""
    cfg = cfg or RefineConfig()
    t = _terms(view, T_WO, cfg, jacobian=True, break_jacobian=break_jacobian)
    out = np.zeros((len(t.inlier), 6))
    out[t.inlier] = np.einsum("ndk,nd,n->nk", t.jacobian, t.residual, rho_weight(t.norm, cfg.barron))
    return out


def feature_costs(view: ViewContext, T_WO: RigidTransform, cfg: RefineConfig | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature robust cost (0 when excluded) and bilinear base cell (-1 when excluded)."""
    cfg = cfg or RefineConfig()
    t = _terms(view, T_WO, cfg)
    cost = np.zeros(len(t.inlier))
    cost[t.inlier] = t.cost
    return cost, t.cells


def lm_refine(views: list[ViewContext], T_init: RigidTransform, cfg: RefineConfig | None = None) -> RefineResult:
    if not views:
        raise ValueError("lm_refine needs at least one view")
    cfg = cfg or RefineConfig()
    T = T_init
    H, g, E = normal_equations(views, T, cfg)
    trace = [E]
    lam = cfg.lambda_init
    converged = False
    status = "max_iters"
    it = 0
    while it < cfg.max_iters:
        it += 1
        A = H + lam * np.diag(np.diag(H))
        try:
            if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e14:
                raise SingularNormalEquations("damped normal equations are singular")
            delta = np.linalg.solve(A, -g)
        except np.linalg.LinAlgError as exc:
            log.debug("LM stopped at iteration %d: %s", it, exc)
            status = "singular"
            break
        if np.linalg.norm(delta) < cfg.step_tol:
            converged = True
            status = "step_tol"
            break
        T_new = compose(exp_se3(delta), T)
        E_new = objective(views, T_new, cfg)
        if E_new < E:
            rel = (E - E_new) / max(E, 1e-300)
            T, E = T_new, E_new
            trace.append(E)
            lam *= cfg.lambda_down
            if rel < cfg.loss_tol:
                converged = True
                status = "loss_tol"
                break
            H, g, _ = normal_equations(views, T, cfg)
        else:
            lam *= cfg.lambda_up
    per_view = {v.view_id: per_view_loss(v, T, cfg).mean_normalized_loss for v in views}
    return RefineResult(T, converged, it, trace, per_view, status)


def score_pose(views: list[ViewContext], T: RigidTransform, mode: str = "average",
               barron: BarronParams | None = None, cfg: RefineConfig | None = None) -> float:
    """Confidence in ``[0, 1]`` from normalised per-view losses.

    ``average`` uses the mean over views, ``min`` the worst view and ``max``
    the best view.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    cfg = cfg or RefineConfig()
    p = barron or cfg.barron
    if not p.alpha < 0:
        raise ValueError("scoring needs a saturating loss (alpha < 0)")
    if not views:
        return 0.0
    losses = np.array([per_view_loss(v, T, cfg, barron=p).mean_normalized_loss for v in views])
    if mode == "average":
        s = 1.0 - losses.mean()
    elif mode == "min":
        s = 1.0 - losses.max()
    else:
        s = 1.0 - losses.min()
    return float(min(max(s, 0.0), 1.0))
