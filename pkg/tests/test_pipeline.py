import numpy as np
import pytest

from conftest import box, nms_reference, random_candidates, unit_cube
from mvrefine.geometry import RigidTransform, compose
from mvrefine.mesh import aabb_world
from mvrefine.pipeline import (
    ObjectSpec,
    PoseCandidate,
    SceneConfig,
    TensorQuery,
    UnknownView,
    WorldCandidate,
    iou3d,
    nms3d,
    run_pipeline,
    select_views,
    to_world,
)
from mvrefine.solver import score_pose
from mvrefine.synth import pose_errors, random_rotation


def test_to_world():
    rng = np.random.default_rng(0)
    T_CO = RigidTransform(random_rotation(rng), rng.normal(size=3))
    c = PoseCandidate("a", "v", T_CO, 0.7)
    w = to_world(c, RigidTransform.identity(), unit_cube())
    assert np.array_equal(w.T_WO.matrix(), T_CO.matrix()) and w.score == 0.7
    T_CW = RigidTransform(random_rotation(rng), rng.normal(size=3))
    w = to_world(c, T_CW, unit_cube())
    assert np.allclose(compose(T_CW, w.T_WO).matrix(), T_CO.matrix(), atol=1e-12)
    assert np.allclose(w.T_WO.matrix(), np.linalg.inv(T_CW.matrix()) @ T_CO.matrix(), atol=1e-12)


def test_candidate_score_range():
    with pytest.raises(ValueError):
        PoseCandidate("a", "v", RigidTransform.identity(), 1.5)


def test_iou_examples():
    a = box([0, 0, 0], [1, 1, 1])
    assert iou3d(a, a) == 1.0
    assert iou3d(a, box([0.5, 0, 0], [1.5, 1, 1])) == pytest.approx(1 / 3)
    assert iou3d(a, box([2, 2, 2], [3, 3, 3])) == 0.0
    assert iou3d(a, box([1, 0, 0], [2, 1, 1])) == 0.0


def test_iou_against_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = box(*np.sort(rng.uniform(0, 2, (2, 3)), axis=0))
        b = box(*np.sort(rng.uniform(0, 2, (2, 3)), axis=0))
        lo, hi = np.minimum(a.min, b.min), np.maximum(a.max, b.max)
        P = rng.uniform(lo, hi, (200000, 3))
        ina = np.all((P >= a.min) & (P <= a.max), axis=1)
        inb = np.all((P >= b.min) & (P <= b.max), axis=1)
        mc = (ina & inb).sum() / max((ina | inb).sum(), 1)
        assert abs(iou3d(a, b) - mc) < 0.01


def wc(oid, lo, hi, score, view="v0"):
    return WorldCandidate(oid, RigidTransform(np.eye(3), np.asarray(lo, float)), score, view, box(lo, hi))


def test_nms_keeps_best_duplicate():
    a = wc("o", [0, 0, 0], [1, 1, 1], 0.9)
    b = wc("o", [0, 0, 0], [1, 1, 1], 0.8)
    assert nms3d([b, a]) == [a]


@pytest.mark.parametrize("thr", [0.2, 0.4, 0.6, 0.8])
def test_nms_disjoint_boxes_all_kept(thr):
    cands = [wc("o", [3 * i, 0, 0], [3 * i + 1, 1, 1], 0.5) for i in range(5)]
    assert len(nms3d(cands, thr)) == 5


def test_nms_scope():
    a = wc("a", [0, 0, 0], [1, 1, 1], 0.9)
    b = wc("b", [0, 0, 0], [1, 1, 1], 0.8)
    assert nms3d([a, b], 0.4, "inter_class") == [a]
    assert nms3d([a, b], 0.4, "intra_class") == [a, b]
    with pytest.raises(ValueError):
        nms3d([a, b], 0.4, "global")


@pytest.mark.parametrize("thr", [0.2, 0.4, 0.6, 0.8])
@pytest.mark.parametrize("scope", ["inter_class", "intra_class"])
def test_nms_matches_reference(thr, scope):
    rng = np.random.default_rng(int(thr * 10))
    cands = random_candidates(rng, 120)
    assert nms3d(cands, thr, scope) == nms_reference(cands, thr, scope)


def test_nms_invariants():
    rng = np.random.default_rng(2)
    cands = random_candidates(rng, 150)
    kept = nms3d(cands, 0.4)
    assert set(map(id, kept)) <= set(map(id, cands))
    kept_ids = set(map(id, kept))
    for c in cands:
        if id(c) in kept_ids:
            continue
        assert any(iou3d(k.aabb, c.aabb) > 0.4 and k.sort_key() < c.sort_key() for k in kept)
    perm = [cands[i] for i in rng.permutation(len(cands))]
    assert nms3d(perm, 0.4) == kept
    assert nms3d(kept, 0.4) == kept


def test_scene_config_validation(scene0):
    cams = scene0.scene.cameras
    with pytest.raises(ValueError):
        SceneConfig((), ())
    with pytest.raises(ValueError):
        SceneConfig(cams, (), nms_iou=1.0)
    with pytest.raises(ValueError):
        SceneConfig(cams, (), nms_scope="x")
    with pytest.raises(UnknownView):
        scene0.scene.camera("nope")


def test_select_views_sees_every_camera(scene0):
    obj = scene0.scene.objects[0]
    box_ = aabb_world(obj.mesh, scene0.gt_poses[obj.object_id])
    assert len(select_views(scene0.scene, box_)) == 4
    far = aabb_world(obj.mesh, RigidTransform(np.eye(3), [0, 0, 1e5]))
    assert select_views(scene0.scene, far) == []


def test_end_to_end_single_object(scene_one_object):
    sc = scene_one_object
    out = run_pipeline(sc.scene, sc.candidates, sc.oracle())
    assert len(out.results) == 1 and not out.failures
    r = out.results[0]
    rot, _ = pose_errors(r.pose, sc.gt_poses[r.object_id])
    assert rot < 0.5 and r.score > 0.9
    assert len(out.results) <= len(out.stage1)


def test_two_objects_keep_ids(scene0):
    out = run_pipeline(scene0.scene, scene0.candidates, scene0.oracle())
    assert sorted(r.object_id for r in out.results) == ["obj00", "obj01"]
    for r in out.results:
        rot, trans = pose_errors(r.pose, scene0.gt_poses[r.object_id])
        assert rot < 0.5


def test_empty_candidates(scene0):
    out = run_pipeline(scene0.scene, [], scene0.oracle())
    assert out.results == [] and out.failures == []


def test_unknown_view_rejected(scene0):
    bad = PoseCandidate("obj00", "view9", RigidTransform.identity(), 0.5)
    with pytest.raises(UnknownView):
        run_pipeline(scene0.scene, [bad], scene0.oracle())


def test_candidate_order_invariance(scene0):
    a = run_pipeline(scene0.scene, scene0.candidates, scene0.oracle())
    b = run_pipeline(scene0.scene, scene0.candidates[::-1], scene0.oracle())
    assert [(r.object_id, r.pose.matrix().tobytes(), r.score) for r in a.results] == \
        [(r.object_id, r.pose.matrix().tobytes(), r.score) for r in b.results]


def test_failures_are_recorded_not_raised(scene0):
    objs = tuple(ObjectSpec(o.object_id, o.mesh, None if o.object_id == "obj00" else o.source)
                 for o in scene0.scene.objects)
    scene = SceneConfig(scene0.scene.cameras, objs)
    out = run_pipeline(scene, scene0.candidates, scene0.oracle())
    assert [f["object_id"] for f in out.failures] == ["obj00"]
    assert [r.object_id for r in out.results] == ["obj01"]


def test_invisible_candidate_fails_softly(scene0):
    c = PoseCandidate("obj00", "view0", RigidTransform(np.eye(3), [0, 0, -500.0]), 0.9)
    out = run_pipeline(scene0.scene, [c], scene0.oracle())
    assert out.results == [] and out.failures[0]["error"] == "NoVisibleSurface"


def test_stage_outputs(scene0):
    agg = run_pipeline(scene0.scene, scene0.candidates, scene0.oracle(), stages="aggregate")
    nms = run_pipeline(scene0.scene, scene0.candidates, scene0.oracle(), stages="nms")
    assert len(agg.results) == len(scene0.candidates)
    assert len(nms.results) == 2
    with pytest.raises(ValueError):
        run_pipeline(scene0.scene, scene0.candidates, scene0.oracle(), stages="bogus")


def test_tensor_query_close_to_oracle(scene0):
    from mvrefine.pipeline import build_views

    obj = scene0.scene.objects[1]
    T = scene0.gt_poses[obj.object_id]
    views = build_views(scene0.scene, obj, T, TensorQuery(scene0.query_maps, scene0.scene))
    assert len(views) == 4
    assert score_pose(views, T) > 0.9
    with pytest.raises(UnknownView):
        TensorQuery({}, scene0.scene).crop_query("view0", views[0].crop_cam, views[0].T_CpW, 14)
