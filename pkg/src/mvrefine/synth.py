"""Seeded multi-view scenes with known ground truth.

Objects are random convex polyhedra carrying smooth synthetic descriptor
fields, so every stage of the pipeline can be checked against an exact
answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .features import FeatureMap, SceneObject, SyntheticFeatureField, build_query_feature_map, look_at
from .geometry import PinholeCamera, RigidTransform, Twist, compose, exp_se3, project_points, rotation_angle
from .mesh import TriangleMesh, aabb_world
from .pipeline import CameraSpec, ObjectSpec, OracleQuery, PoseCandidate, SceneConfig


class PlacementFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_views: int = 4
    n_objects: int = 2
    camera_ring_radius: float = 700.0
    perturb_rot_deg: float = 10.0
    perturb_trans_frac: float = 0.05
    decoy_rate: float = 0.0
    feature_dim: int = 32
    object_diameter: float = 100.0
    elevation_deg: float = 35.0
    image_size: tuple[int, int] = (640, 480)
    focal: float = 600.0
    query_cell: int = 2
    wavelength_frac: tuple[float, float] = (0.25, 0.6)
    placement_spread: float = 1.2
    background_mode: str = "zeros"
    allow_occlusion: bool = False  # default keeps silhouettes apart in every view

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if min(self.perturb_rot_deg, self.perturb_trans_frac, self.decoy_rate) < 0:
            raise ValueError("noise magnitudes must be non-negative")


@dataclass
class SynthScene:
    spec: SynthSpec
    scene: SceneConfig
    gt_poses: dict[str, RigidTransform]
    fields: dict[str, SyntheticFeatureField]
    query_maps: dict[str, FeatureMap]
    candidates: list[PoseCandidate]
    is_decoy: list[bool] = field(default_factory=list)

    def scene_objects(self) -> list[SceneObject]:
        return [SceneObject(o.mesh, self.gt_poses[o.object_id], self.fields[o.object_id]) for o in self.scene.objects]

    def oracle(self, **kwargs) -> OracleQuery:
        kwargs.setdefault("background_mode", self.spec.background_mode)
        kwargs.setdefault("seed", self.spec.seed)
        return OracleQuery(self.scene_objects(), self.scene, **kwargs)

    def ground_truth(self) -> list[tuple[str, RigidTransform]]:
        return [(o.object_id, self.gt_poses[o.object_id]) for o in self.scene.objects]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_pose(T: RigidTransform, rot_deg: float, trans: float, seed, center=None) -> RigidTransform:
    """Left-multiply ``T`` by a random motion of fixed magnitudes.

    The motion rotates by exactly ``rot_deg`` about a uniform axis and
    translates by exactly ``trans`` along a uniform direction. With ``center``
    the rotation pivots about that point instead of the frame origin.
    """
    if rot_deg < 0 or trans < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    omega = unit_vector(rng) * np.radians(rot_deg)
    shift = unit_vector(rng) * trans
    R = exp_se3(Twist(omega, np.zeros(3))).rotation
    delta = RigidTransform(R, shift)
    if center is not None:
        c = np.asarray(center, dtype=float)
        delta = compose(RigidTransform(np.eye(3), c), compose(delta, RigidTransform(np.eye(3), -c)))
    return compose(delta, T)


def _kabsch(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Rotation best mapping centred ``P`` onto centred ``Q``."""
    U, _, Vt = np.linalg.svd(P.T @ Q)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def symmetry_error(vertices: np.ndarray, n_starts: int = 24, iters: int = 15) -> float:
    """Smallest max-vertex alignment error over non-identity vertex permutations.

    Candidate self-alignments start from the three principal-axis half-turns
    and from ``n_starts`` rotations spread over SO(3); each is refined by
    assignment-based ICP about the centroid.
    """
    P = np.asarray(vertices, dtype=float)
    P = P - P.mean(axis=0)
    _, evecs = np.linalg.eigh(P.T @ P)
    starts = [evecs @ np.diag(d) @ evecs.T for d in ([1, -1, -1], [-1, 1, -1], [-1, -1, 1])]
    starts += list(Rotation.from_rotvec(
        np.array([[np.cos(a) * np.sin(b), np.sin(a) * np.sin(b), np.cos(b)] for a, b in
                  zip(np.linspace(0, 2 * np.pi, n_starts, endpoint=False), np.arccos(np.linspace(0.95, -0.95, n_starts)))])
        * np.linspace(0.5, np.pi - 0.01, n_starts)[:, None]).as_matrix())
    identity = np.arange(len(P))
    best = np.inf
    for R in starts:
        perm = identity
        for _ in range(iters):
            Q = P @ R.T
            cost = np.linalg.norm(Q[:, None, :] - P[None, :, :], axis=-1)
            _, perm_new = linear_sum_assignment(cost)
            R = _kabsch(P, P[perm_new])
            if np.array_equal(perm_new, perm):
                break
            perm = perm_new
        if np.array_equal(perm, identity):
            continue
        err = float(np.linalg.norm(P @ R.T - P[perm], axis=1).max())
        best = min(best, err)
    return best


def random_convex_mesh(rng: np.random.Generator, object_id: str, diameter: float = 100.0,
                       min_asymmetry: float = 0.05) -> TriangleMesh:
    """Convex hull of 12-24 anisotropically scaled sphere samples."""
    for _ in range(100):
        n = int(rng.integers(12, 25))
        pts = rng.normal(size=(n, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= rng.uniform(0.6, 1.0, size=3)
        hull = ConvexHull(pts)
        used = np.unique(hull.simplices)
        remap = -np.ones(n, dtype=np.int64)
        remap[used] = np.arange(len(used))
        V = pts[used]
        V = V - V.mean(axis=0)
        V *= diameter / np.linalg.norm(V[:, None] - V[None], axis=-1).max()
        mesh = TriangleMesh(V, remap[hull.simplices], object_id)
        if len(V) >= 4 and symmetry_error(V) > min_asymmetry * diameter:
            return mesh
    raise PlacementFailure("could not draw an asymmetric polyhedron")


def _ring_cameras(spec: SynthSpec, rng: np.random.Generator) -> list[CameraSpec]:
    w, h = spec.image_size
    cam = PinholeCamera(spec.focal, spec.focal, w / 2.0, h / 2.0, w, h)
    el = np.radians(spec.elevation_deg)
    out = []
    for k in range(spec.n_views):
        az = 2 * np.pi * k / spec.n_views + np.radians(rng.uniform(-10.0, 10.0))
        eye = spec.camera_ring_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        out.append(CameraSpec(f"view{k}", cam, look_at(eye, np.zeros(3))))
    return out


def _fully_visible(mesh: TriangleMesh, T_WO: RigidTransform, cameras: list[CameraSpec]) -> bool:
    for c in cameras:
        Xc = compose(c.T_CW, T_WO).apply(mesh.vertices)
        if np.any(Xc[:, 2] <= 0):
            return False
        uv = project_points(c.camera, Xc)
        if uv.min() < 0 or np.any(uv.max(axis=0) >= (c.camera.width, c.camera.height)):
            return False
    return True


def _silhouette(mesh: TriangleMesh, T_WO: RigidTransform, c: CameraSpec) -> np.ndarray:
    uv = project_points(c.camera, compose(c.T_CW, T_WO).apply(mesh.vertices))
    return uv[ConvexHull(uv).vertices]


def _polygons_disjoint(P: np.ndarray, Q: np.ndarray, margin: float) -> bool:
    """Separating-axis test for convex polygons, with a pixel margin."""
    for poly in (P, Q):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        a, b = P @ normals.T, Q @ normals.T
        if np.any((a.max(axis=0) + margin < b.min(axis=0)) | (b.max(axis=0) + margin < a.min(axis=0))):
            return True
    return False


def _occludes(mesh, T_WO, placed, cameras, margin: float) -> bool:
    """True if the silhouette touches an already placed object's in any view."""
    for c in cameras:
        S = _silhouette(mesh, T_WO, c)
        if any(not _polygons_disjoint(S, _silhouette(m, T, c), margin) for m, T in placed):
            return True
    return False


def _boxes_overlap(a, b) -> bool:
    return bool(np.all(np.minimum(a.max, b.max) > np.maximum(a.min, b.min)))


def generate(spec: SynthSpec) -> SynthScene:
    rng = np.random.default_rng(spec.seed)
    cameras = _ring_cameras(spec, rng)
    d = spec.object_diameter
    objects, fields = [], {}
    for k in range(spec.n_objects):
        oid = f"obj{k:02d}"
        mesh = random_convex_mesh(rng, oid, d)
        lo, hi = spec.wavelength_frac
        fields[oid] = SyntheticFeatureField.random(oid, int(rng.integers(2**31)), spec.feature_dim, 64, (lo * d, hi * d))
        objects.append(ObjectSpec(oid, mesh, fields[oid], mesh_path=f"meshes/{oid}.obj"))
    scene = SceneConfig(tuple(cameras), tuple(objects))

    gt: dict[str, RigidTransform] = {}
    boxes, placed = [], []
    spread = spec.placement_spread * d * (1.0 if spec.n_objects > 1 else 0.0)
    for obj in objects:
        for _ in range(1000):
            t = np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.2, 0.2) * d])
            T = RigidTransform(random_rotation(rng), t)
            box = aabb_world(obj.mesh, T)
            if any(_boxes_overlap(box, b) for b in boxes) or not _fully_visible(obj.mesh, T, cameras):
                continue
            if not spec.allow_occlusion and _occludes(obj.mesh, T, placed, cameras, spec.query_cell):
                continue
            gt[obj.object_id] = T
            boxes.append(box)
            placed.append((obj.mesh, T))
            break
        else:
            raise PlacementFailure(f"could not place {obj.object_id} after 1000 attempts")

    scene_objs = [SceneObject(o.mesh, gt[o.object_id], fields[o.object_id]) for o in objects]
    w, h = spec.image_size
    query_maps = {}
    for c in cameras:
        cam = c.camera
        query_maps[c.view_id] = build_query_feature_map(
            scene_objs, cam, c.T_CW, spec.query_cell, spec.background_mode, seed=spec.seed)

    candidates, decoy = [], []
    for obj in objects:
        T = gt[obj.object_id]
        for c in cameras:
            rot = rng.uniform(0.0, spec.perturb_rot_deg)
            trans = rng.uniform(0.0, spec.perturb_trans_frac * d)
            Tp = perturb_pose(T, rot, trans, int(rng.integers(2**31)), center=T.translation)
            parts = []
            if spec.perturb_rot_deg > 0:
                parts.append(rot / spec.perturb_rot_deg)
            if spec.perturb_trans_frac > 0:
                parts.append(trans / (spec.perturb_trans_frac * d))
            score = 1.0 - (float(np.mean(parts)) if parts else 0.0)
            candidates.append(PoseCandidate(obj.object_id, c.view_id, compose(c.T_CW, Tp), score))
            decoy.append(False)
    n_decoys = int(round(spec.decoy_rate * len(candidates)))
    region = spec.placement_spread * d + 0.5 * d
    for _ in range(n_decoys):
        obj = objects[int(rng.integers(len(objects)))]
        c = cameras[int(rng.integers(len(cameras)))]
        t = np.array([rng.uniform(-region, region), rng.uniform(-region, region), rng.uniform(-0.2, 0.2) * d])
        T = RigidTransform(random_rotation(rng), t)
        candidates.append(PoseCandidate(obj.object_id, c.view_id, compose(c.T_CW, T), float(rng.uniform(0.0, 0.3))))
        decoy.append(True)
    return SynthScene(spec, scene, gt, fields, query_maps, candidates, decoy)


def pose_errors(T_est: RigidTransform, T_gt: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in length units)."""
    ang = float(np.degrees(rotation_angle(T_est.rotation.T @ T_gt.rotation)))
    return ang, float(np.linalg.norm(T_est.translation - T_gt.translation))
