import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import box_mesh, brute_mspd, brute_mssd, unit_cube
from mvrefine.evaluation import (
    MSPD_PIXELS,
    MSSD_FRACTIONS,
    Detection,
    SymmetrySet,
    average_precision,
    average_recall,
    evaluate,
    mspd,
    mspd_views,
    mssd,
)
from mvrefine.geometry import PinholeCamera, RigidTransform, Twist, compose, exp_se3
from mvrefine.synth import random_rotation

CAM = PinholeCamera(600.0, 600.0, 320.0, 240.0, 640, 480)
I = RigidTransform.identity()


def rz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


def test_mssd_identity_and_translation():
    m = unit_cube(10.0)
    T = RigidTransform(np.eye(3), [0, 0, 100])
    assert mssd(T, T, m) == 0.0
    Tt = RigidTransform(np.eye(3), [3, 4, 100])
    assert mssd(Tt, T, m) == pytest.approx(5.0)


def test_mspd_lateral_shift_first_order():
    d = 1.0
    m = unit_cube(1.0)
    z = 1000.0
    T = RigidTransform(np.eye(3), [0, 0, z])
    Tt = RigidTransform(np.eye(3), [d, 0, z])
    assert mspd(Tt, T, m, None, CAM, I) == pytest.approx(CAM.fx * d / z, rel=0.01)


def test_mspd_behind_camera_is_inf():
    m = unit_cube(1.0)
    assert mspd(RigidTransform(np.eye(3), [0, 0, -5]), RigidTransform(np.eye(3), [0, 0, 50]), m, None, CAM, I) == math.inf


def test_symmetric_box_half_turn():
    m = box_mesh((40.0, 20.0, 10.0))
    T = RigidTransform(random_rotation(np.random.default_rng(0)), [0, 0, 300])
    flipped = compose(T, RigidTransform(rz(180), np.zeros(3)))
    sym = SymmetrySet((RigidTransform(rz(180), np.zeros(3)),))
    assert mssd(flipped, T, m, sym) == pytest.approx(0.0, abs=1e-9)
    assert mssd(flipped, T, m) > 40.0
    assert mspd(flipped, T, m, sym, CAM, I) == pytest.approx(0.0, abs=1e-6)
    assert len(sym) == 2 and len(SymmetrySet()) == 1


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = box_mesh(tuple(rng.uniform(5, 40, 3)))
    T_gt = RigidTransform(random_rotation(rng), rng.uniform(-20, 20, 3) + [0, 0, 400])
    T_est = RigidTransform(random_rotation(rng) if seed % 2 else T_gt.rotation, T_gt.translation + rng.normal(0, 5, 3))
    syms = SymmetrySet((RigidTransform(rz(180), np.zeros(3)),)) if seed % 3 == 0 else SymmetrySet()
    # small camera tilt keeps the object in front
    tilt = exp_se3(Twist(rng.normal(0, 0.05, 3), np.zeros(3)))
    assert mssd(T_est, T_gt, m, syms) == pytest.approx(brute_mssd(T_est, T_gt, m.vertices, syms), rel=1e-12)
    ref = brute_mspd(T_est, T_gt, m.vertices, syms, CAM, tilt)
    assert mspd(T_est, T_gt, m, syms, CAM, tilt) == pytest.approx(ref, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_extra_symmetries_never_increase_error(seed):
    rng = np.random.default_rng(seed)
    m = box_mesh((30.0, 20.0, 10.0))
    T_gt = RigidTransform(random_rotation(rng), [0, 0, 400])
    T_est = RigidTransform(random_rotation(rng), rng.normal(0, 5, 3) + [0, 0, 400])
    small = SymmetrySet()
    big = SymmetrySet((RigidTransform(random_rotation(rng), np.zeros(3)), RigidTransform(rz(180), np.zeros(3))))
    assert mssd(T_est, T_gt, m, big) <= mssd(T_est, T_gt, m, small)
    assert mspd(T_est, T_gt, m, big, CAM, I) <= mspd(T_est, T_gt, m, small, CAM, I)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_mssd_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    m = unit_cube(20.0)
    T_gt = RigidTransform(random_rotation(rng), rng.normal(size=3))
    T_est = RigidTransform(random_rotation(rng), rng.normal(size=3))
    G = RigidTransform(random_rotation(rng), rng.normal(0, 100, 3))
    assert mssd(compose(G, T_est), compose(G, T_gt), m) == pytest.approx(mssd(T_est, T_gt, m), rel=1e-9)


def test_mspd_views_takes_worst():
    m = unit_cube(10.0)
    T = RigidTransform(np.eye(3), [0, 0, 500])
    Tx = RigidTransform(np.eye(3), [2, 0, 500])
    near = RigidTransform(np.eye(3), [0, 0, 250])  # half the depth, twice the pixels
    per = [mspd(Tx, T, m, None, CAM, c) for c in (I, near)]
    assert mspd_views(Tx, T, m, None, [(CAM, I), (CAM, near)]) == max(per)
    with pytest.raises(ValueError):
        mspd_views(Tx, T, m, None, [])


# -- AR / AP -----------------------------------------------------------------

MESH = unit_cube(100.0, "a")
MESHES = {"a": MESH}
GT_T = RigidTransform(np.eye(3), [0, 0, 2000])
CAMS = [(CAM, I)]


def shifted(dx):
    return RigidTransform(np.eye(3), GT_T.translation + [dx, 0, 0])


def test_threshold_grids():
    assert MSSD_FRACTIONS[0] == 0.05 and MSSD_FRACTIONS[-1] == 0.5 and len(MSSD_FRACTIONS) == 10
    assert MSPD_PIXELS == tuple(float(5 * k) for k in range(1, 11))


def test_ar_worked_example():
    d = MESH.diameter
    # 0.275 d clears the fractions 0.30 .. 0.50, half of the ten
    r = [Detection("a", shifted(0.275 * d))]
    ar_mssd, _, _ = average_recall(r, [("a", GT_T)], MESHES, None, CAMS)
    assert ar_mssd == pytest.approx(0.5)
    # a lateral shift moves the nearest vertices most: 27.5 px clears 30 .. 50 px
    zmin = GT_T.apply(MESH.vertices)[:, 2].min()
    dx = 27.5 * zmin / CAM.fx
    _, ar_mspd, _ = average_recall([Detection("a", shifted(dx))], [("a", GT_T)], MESHES, None, CAMS)
    assert ar_mspd == pytest.approx(0.5)


def test_strict_threshold_boundary():
    d = MESH.diameter
    rep = evaluate([Detection("a", shifted(0.25 * d))], [("a", GT_T)], MESHES, None, CAMS)
    # exactly at 0.25 d fails the 0.25 threshold
    assert rep.recall_mssd[4] == 0.0 and rep.recall_mssd[5] == 1.0


def test_ap_duplicate_after_correct_is_harmless():
    good = Detection("a", GT_T, 0.9)
    dup = Detection("a", shifted(300.0), 0.5)
    ap = average_precision([good, dup], [("a", GT_T)], MESHES, None, CAMS)
    assert ap[2] == pytest.approx(1.0)


def test_ap_wrong_first_halves_precision():
    good = Detection("a", GT_T, 0.5)
    bad = Detection("a", shifted(300.0), 0.9)
    ap = average_precision([good, bad], [("a", GT_T)], MESHES, None, CAMS)
    assert ap[2] == pytest.approx(0.5)


def test_one_gt_matched_once():
    a = Detection("a", GT_T, 0.9)
    b = Detection("a", GT_T, 0.8)
    rep = evaluate([a, b], [("a", GT_T)], MESHES, None, CAMS)
    assert rep.ar == 1.0 and rep.ap == 1.0


def test_wrong_object_never_matches():
    meshes = {"a": MESH, "b": unit_cube(100.0, "b")}
    rep = evaluate([Detection("b", GT_T)], [("a", GT_T)], meshes, None, CAMS)
    assert rep.ar == 0.0 and rep.ap == 0.0


def test_empty_results():
    rep = evaluate([], [("a", GT_T)], MESHES, None, CAMS)
    assert rep.ar == 0.0 and rep.ap == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 150), st.floats(0.01, 1.0)), min_size=1, max_size=8),
       st.sampled_from(["square", "log", "affine"]))
def test_ap_invariant_to_monotone_score_rescaling(dets, how):
    f = {"square": lambda s: s * s, "log": lambda s: math.log(s) + 10, "affine": lambda s: 0.3 * s + 0.1}[how]
    gts = [("a", GT_T), ("a", shifted(400.0))]
    a = [Detection("a", shifted(dx), s) for dx, s in dets]
    b = [Detection("a", shifted(dx), f(s)) for dx, s in dets]
    ra = evaluate(a, gts, MESHES, None, CAMS)
    rb = evaluate(b, gts, MESHES, None, CAMS)
    assert ra.ap == rb.ap and ra.ar == rb.ar


def test_report_serializes():
    rep = evaluate([Detection("a", GT_T)], [("a", GT_T)], MESHES, None, CAMS)
    d = rep.to_dict()
    assert d["ar"] == 1.0 and len(d["recall_mspd"]) == 10
