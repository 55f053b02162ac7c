import math

import numpy as np
import pytest

from mvrefine.geometry import PinholeCamera, RigidTransform
from mvrefine.mesh import Aabb3, TriangleMesh, aabb_world
from mvrefine.pipeline import WorldCandidate
from mvrefine.synth import SynthSpec, generate, random_rotation

CUBE_V = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
CUBE_F = np.array([
    [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
    [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
    [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
])


def unit_cube(scale=1.0, object_id="cube") -> TriangleMesh:
    return TriangleMesh(CUBE_V * scale, CUBE_F.copy(), object_id)


def box_mesh(extents, object_id="box") -> TriangleMesh:
    return TriangleMesh(CUBE_V * np.asarray(extents, float), CUBE_F.copy(), object_id)


def ray_cast_depth(tris_cam: np.ndarray, cam: PinholeCamera, uv: np.ndarray) -> np.ndarray:
    """Camera-frame z of the nearest hit along each pixel ray (Moller-Trumbore), 0 on miss."""
    out = np.zeros(len(uv))
    for n, (u, v) in enumerate(uv):
        d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
        best = np.inf
        for a, b, c in tris_cam:
            e1, e2 = b - a, c - a
            p = np.cross(d, e2)
            det = e1 @ p
            if abs(det) < 1e-14:
                continue
            s = -a
            bu = (s @ p) / det
            q = np.cross(s, e1)
            bv = (d @ q) / det
            t = (e2 @ q) / det
            if bu >= 0 and bv >= 0 and bu + bv <= 1 and t > 0:
                best = min(best, t)
        out[n] = best if np.isfinite(best) else 0.0
    return out


@pytest.fixture
def cube():
    return unit_cube()


@pytest.fixture(scope="session")
def scene0():
    return generate(SynthSpec(seed=0))


@pytest.fixture(scope="session")
def scene_one_object():
    return generate(SynthSpec(seed=3, n_objects=1))


# -- reference oracles shared by unit and acceptance tests ------------------------

def box(lo, hi):
    return Aabb3(np.asarray(lo, float), np.asarray(hi, float))


def iou_reference(a, b):
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    inter = np.prod(np.clip(hi - lo, 0, None))
    return inter / (np.prod(a.max - a.min) + np.prod(b.max - b.min) - inter)


def nms_reference(cands, thr, scope):
    """O(n^2) suppression over a precomputed IoU matrix."""
    n = len(cands)
    keys = [c.sort_key() for c in cands]
    order = sorted(range(n), key=lambda i: keys[i])
    M = np.array([[iou_reference(a.aabb, b.aabb) for b in cands] for a in cands])
    alive = np.ones(n, bool)
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        for j in order[pos + 1:]:
            same = cands[i].object_id == cands[j].object_id
            if M[i, j] > thr and (scope == "inter_class" or same):
                alive[j] = False
    return [cands[i] for i in order if alive[i]]


def random_candidates(rng, n, n_objects=3, spread=60.0):
    meshes = {f"o{k}": unit_cube(rng.uniform(20, 60), f"o{k}") for k in range(n_objects)}
    out = []
    for i in range(n):
        oid = f"o{rng.integers(n_objects)}"
        T = RigidTransform(random_rotation(rng), rng.uniform(-spread, spread, 3))
        score = round(float(rng.uniform(0, 1)), 1)  # coarse scores force ties
        out.append(WorldCandidate(oid, T, score, f"v{rng.integers(4)}", aabb_world(meshes[oid], T)))
    return out


def brute_mssd(T_est, T_gt, V, syms):
    best = math.inf
    for S in syms:
        G = T_gt.matrix() @ S.matrix()
        worst = 0.0
        for v in V:
            a = T_est.matrix() @ np.append(v, 1.0)
            b = G @ np.append(v, 1.0)
            worst = max(worst, math.dist(a[:3], b[:3]))
        best = min(best, worst)
    return best


def brute_mspd(T_est, T_gt, V, syms, cam, T_CW):
    def px(M, v):
        x, y, z = (T_CW.matrix() @ M @ np.append(v, 1.0))[:3]
        return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy

    best = math.inf
    for S in syms:
        G = T_gt.matrix() @ S.matrix()
        best = min(best, max(math.dist(px(T_est.matrix(), v), px(G, v)) for v in V))
    return best


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report(name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
