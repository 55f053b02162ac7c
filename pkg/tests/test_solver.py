import numpy as np
import pytest

from mvrefine.diagnostics import gradient_check
from mvrefine.features import FeatureMap
from mvrefine.geometry import RigidTransform, compose, exp_se3, project_points
from mvrefine.pipeline import build_views
from mvrefine.robust import BarronParams
from mvrefine.solver import (
    RefineConfig,
    ViewContext,
    lm_refine,
    normal_equations,
    objective,
    per_view_loss,
    residuals_and_jacobian,
    score_pose,
)
from mvrefine.synth import perturb_pose, pose_errors


def setup(sc, k=0, rot=8.0, frac=0.05, seed=1):
    obj = sc.scene.objects[k]
    T_gt = sc.gt_poses[obj.object_id]
    coarse = perturb_pose(T_gt, rot, frac * obj.diameter, seed, center=T_gt.translation)
    return obj, T_gt, build_views(sc.scene, obj, coarse, sc.oracle())


@pytest.fixture(scope="module")
def gt_views(scene0):
    obj = scene0.scene.objects[0]
    T = scene0.gt_poses[obj.object_id]
    return T, build_views(scene0.scene, obj, T, scene0.oracle())


@pytest.fixture(scope="module")
def coarse_views(scene0):
    return setup(scene0)


def test_closure_at_ground_truth(gt_views):
    T, views = gt_views
    assert len(views) == 4
    for v in views:
        loss = per_view_loss(v, T)
        assert loss.mean_normalized_loss < 1e-6
        assert loss.n_inliers == loss.n_total
    _, g, _ = normal_equations(views, T, RefineConfig())
    assert np.linalg.norm(g) < 1e-6


def test_translated_pose_has_higher_loss(gt_views, scene0):
    T, views = gt_views
    d = scene0.scene.objects[0].diameter
    moved = compose(RigidTransform(np.eye(3), [0.5 * d, 0, 0]), T)
    for v in views:
        assert per_view_loss(v, moved).sum_loss > per_view_loss(v, T).sum_loss


def test_object_out_of_crop(gt_views):
    T, views = gt_views
    far = compose(RigidTransform(np.eye(3), [5000.0, 0, 0]), T)
    loss = per_view_loss(views[0], far)
    assert loss.n_inliers == 0 and loss.mean_normalized_loss == 1.0 and loss.sum_loss == 0.0
    assert score_pose(views, far) == 0.0
    res = lm_refine(views, far)
    assert res.status == "singular" and not res.converged
    assert res.pose is far


@pytest.mark.parametrize("policy", ["drop", "clamp"])
def test_gradient_matches_finite_differences(coarse_views, policy):
    obj, T_gt, views = coarse_views
    T = perturb_pose(T_gt, 3.0, 0.02 * obj.diameter, 5, center=T_gt.translation)
    chk = gradient_check(views, T, RefineConfig(oob_policy=policy))
    assert chk.rel_error < 1e-4
    assert np.linalg.norm(chk.analytic) > 1.0


def test_broken_jacobian_fails_check(coarse_views):
    obj, T_gt, views = coarse_views
    T = perturb_pose(T_gt, 3.0, 0.02 * obj.diameter, 5, center=T_gt.translation)
    assert gradient_check(views, T, break_jacobian=True).rel_error > 1e-2


def test_quadratic_weights_are_constant(coarse_views):
    _, T_gt, views = coarse_views
    v = views[0]
    c = 0.7
    r, J = residuals_and_jacobian(v, T_gt, RefineConfig(barron=BarronParams(2.0, c)))
    uv = project_points(v.crop_cam, compose(v.T_CpW, T_gt).apply(v.registered.points))
    keep = v.query.in_bounds(uv)
    raw = v.registered.descriptors[keep] - v.query.sample(uv[keep])
    assert np.allclose(r, raw.reshape(-1) / c, atol=1e-15)


def test_objective_identity(coarse_views):
    _, T_gt, views = coarse_views
    cfg = RefineConfig()
    _, _, E = normal_equations(views, T_gt, cfg)
    assert E == pytest.approx(sum(per_view_loss(v, T_gt, cfg).sum_loss for v in views), abs=1e-9)
    assert objective(views, T_gt, cfg) == pytest.approx(E, abs=1e-9)


def test_refine_from_ground_truth_stays_put(gt_views):
    T, views = gt_views
    res = lm_refine(views, T)
    assert res.converged and res.iterations <= 2
    assert np.allclose(res.pose.matrix(), T.matrix(), atol=1e-8)


def test_refine_converges_and_accepted_losses_decrease(coarse_views):
    obj, T_gt, views = coarse_views
    T0 = perturb_pose(T_gt, 10.0, 0.05 * obj.diameter, 9, center=T_gt.translation)
    res = lm_refine(views, T0)
    rot, trans = pose_errors(res.pose, T_gt)
    assert rot < 0.5 and trans < 1e-3 * obj.diameter
    assert np.all(np.diff(res.loss_trace) < 0)
    assert res.iterations <= 30


def test_view_permutation_invariance(coarse_views):
    obj, T_gt, views = coarse_views
    T0 = perturb_pose(T_gt, 6.0, 0.03 * obj.diameter, 4, center=T_gt.translation)
    a = lm_refine(views, T0)
    b = lm_refine(views[::-1], T0)
    assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-9)
    assert score_pose(views, a.pose) == pytest.approx(score_pose(views[::-1], b.pose), abs=1e-12)


def reference_lm(view, T, cfg):
    """Plain single-view LM written from the algorithm description."""
    r, J = residuals_and_jacobian(view, T, cfg)
    E = per_view_loss(view, T, cfg).sum_loss
    lam, it = cfg.lambda_init, 0
    while it < cfg.max_iters:
        it += 1
        H = J.T @ J
        g = J.T @ r
        delta = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
        if np.linalg.norm(delta) < cfg.step_tol:
            break
        T_new = compose(exp_se3(delta), T)
        E_new = per_view_loss(view, T_new, cfg).sum_loss
        if E_new < E:
            rel = (E - E_new) / E
            T, E = T_new, E_new
            lam *= cfg.lambda_down
            if rel < cfg.loss_tol:
                break
            r, J = residuals_and_jacobian(view, T, cfg)
        else:
            lam *= cfg.lambda_up
    return T, it


def test_single_view_matches_reference_bitwise(coarse_views):
    obj, T_gt, views = coarse_views
    T0 = perturb_pose(T_gt, 5.0, 0.03 * obj.diameter, 2, center=T_gt.translation)
    cfg = RefineConfig()
    T_ref, it = reference_lm(views[1], T0, cfg)
    res = lm_refine([views[1]], T0, cfg)
    assert res.iterations == it
    assert res.pose.matrix().tobytes() == T_ref.matrix().tobytes()


def test_score_properties(gt_views, coarse_views):
    T, views = gt_views
    for mode in ("average", "min", "max"):
        assert score_pose(views, T, mode) > 1 - 1e-6
    obj, T_gt, cviews = coarse_views
    T1 = perturb_pose(T_gt, 5.0, 0.05 * obj.diameter, 3, center=T_gt.translation)
    s = {m: score_pose(cviews, T1, m) for m in ("average", "min", "max")}
    assert 0 <= s["min"] <= s["average"] <= s["max"] <= 1
    with pytest.raises(ValueError):
        score_pose(cviews, T1, barron=BarronParams(2.0, 0.5))
    with pytest.raises(ValueError):
        score_pose(cviews, T1, mode="median")


def test_view_context_dim_check(coarse_views):
    v = coarse_views[2][0]
    with pytest.raises(ValueError):
        ViewContext("x", v.crop_cam, v.T_CpW, FeatureMap(np.zeros((3, 3, 5))), v.registered)


@pytest.mark.parametrize("kw", [dict(max_iters=0), dict(lambda_init=0.0), dict(lambda_up=1.0),
                                dict(lambda_down=1.0), dict(oob_policy="wrap")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RefineConfig(**kw)


def test_refine_needs_views():
    with pytest.raises(ValueError):
        lm_refine([], RigidTransform.identity())
