"""Triangle meshes, OBJ I/O, z-buffer depth rasterisation and world boxes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PinholeCamera, RigidTransform

NEAR_CLIP = 1e-6


class ParseError(ValueError):
    pass


class EmptyMesh(ValueError):
    pass


class FullyBehindCamera(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    object_id: str = ""

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float).reshape(-1, 3)
        F = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(F) == 0:
            raise EmptyMesh("mesh has no faces")
        if F.min() < 0 or F.max() >= len(V):
            raise ValueError("triangle index out of range")
        V.setflags(write=False)
        F.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)

    @property
    def diameter(self) -> float:
        return mesh_diameter(self)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Camera-frame z per pixel; 0 marks background."""

    depth: np.ndarray

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True, eq=False)
class Aabb3:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.array(self.min, dtype=float).reshape(3)
        hi = np.array(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("aabb min exceeds max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.max - self.min))

    def corners(self) -> np.ndarray:
        idx = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        return np.where(idx == 0, self.min, self.max)


def load_obj(path, object_id: str | None = None) -> TriangleMesh:
    """Read the ``v``/``f`` subset of a Wavefront OBJ file.

    Polygons are fanned from their first vertex. ``f`` tokens may carry
    ``/texcoord/normal`` suffixes, which are ignored; negative indices are not
    supported.
    """
    path = Path(path)
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    pending: list[tuple[int, list[int]]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                try:
                    vertices.append([float(p) for p in parts[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex") from exc
                if len(vertices[-1]) != 3:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif parts[0] == "f":
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad face index") from exc
                if len(idx) < 3:
                    raise ParseError(f"{path}:{lineno}: face needs at least 3 vertices")
                pending.append((lineno, idx))
    for lineno, idx in pending:
        for i in idx:
            if i < 1 or i > len(vertices):
                raise ParseError(f"{path}:{lineno}: vertex index {i} out of range 1..{len(vertices)}")
        zero = [i - 1 for i in idx]
        for k in range(1, len(zero) - 1):
            faces.append((zero[0], zero[k], zero[k + 1]))
    if not faces:
        raise EmptyMesh(f"{path}: no faces")
    return TriangleMesh(np.array(vertices), np.array(faces), object_id if object_id is not None else path.stem)


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"# {mesh.object_id}"]
    lines += ["v " + " ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += ["f " + " ".join(str(int(i) + 1) for i in f) for f in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def mesh_diameter(mesh) -> float:
    V = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=float)
    best = 0.0
    # row blocks keep memory bounded for large meshes
    for s in range(0, len(V), 512):
        d = np.linalg.norm(V[s:s + 512, None, :] - V[None, :, :], axis=-1)
        best = max(best, float(d.max()))
    return best


def aabb_world(mesh: TriangleMesh, T_WO: RigidTransform) -> Aabb3:
    P = T_WO.apply(mesh.vertices)
    return Aabb3(P.min(axis=0), P.max(axis=0))


def _clip_near(tri: np.ndarray) -> list[np.ndarray]:
    """Clip one camera-frame triangle against ``z = NEAR_CLIP``."""
    inside = tri[:, 2] >= NEAR_CLIP
    if inside.all():
        return [tri]
    if not inside.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ia, ib = inside[i], inside[(i + 1) % 3]
        if ia:
            poly.append(a)
        if ia != ib:
            s = (NEAR_CLIP - a[2]) / (b[2] - a[2])
            p = a + s * (b - a)
            p[2] = NEAR_CLIP
            poly.append(p)
    return [np.array([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def camera_triangles(mesh: TriangleMesh, T_CO: RigidTransform) -> np.ndarray:
    """Mesh triangles in the camera frame, near-clipped, as ``(T, 3, 3)``."""
    Vc = T_CO.apply(mesh.vertices)
    if not np.any(Vc[:, 2] > 0):
        raise FullyBehindCamera(f"mesh {mesh.object_id!r} is entirely behind the camera")
    tris = Vc[mesh.triangles]
    front = tris[:, :, 2] >= NEAR_CLIP
    ok = front.all(axis=1)
    out = [tris[ok]]
    for k in np.nonzero(front.any(axis=1) & ~ok)[0]:
        out.extend(t[None] for t in _clip_near(tris[k]))
    return np.concatenate(out, axis=0)


def rasterize_grid(
    tris: np.ndarray,
    cam: PinholeCamera,
    nx: int,
    ny: int,
    step: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer camera-frame triangles at samples ``((j+0.5)*step, (i+0.5)*step)``.

    Returns ``(depth, triangle_index)``; background has depth 0 and index -1.
    With ``step=1`` the samples are the pixel centres.
    """
    zbuf = np.full((ny, nx), np.inf)
    tid = np.full((ny, nx), -1, dtype=np.int64)
    if len(tris) == 0:
        return np.zeros((ny, nx)), tid
    z = tris[:, :, 2]
    u = cam.fx * tris[:, :, 0] / z + cam.cx
    v = cam.fy * tris[:, :, 1] / z + cam.cy
    for k in range(len(tris)):
        uk, vk, zk = u[k], v[k], z[k]
        j0 = max(int(np.ceil(uk.min() / step - 0.5)), 0)
        j1 = min(int(np.floor(uk.max() / step - 0.5)), nx - 1)
        i0 = max(int(np.ceil(vk.min() / step - 0.5)), 0)
        i1 = min(int(np.floor(vk.max() / step - 0.5)), ny - 1)
        if j1 < j0 or i1 < i0:
            continue
        area = (uk[1] - uk[0]) * (vk[2] - vk[0]) - (uk[2] - uk[0]) * (vk[1] - vk[0])
        if area == 0.0:
            continue
        su = (np.arange(j0, j1 + 1) + 0.5) * step
        sv = (np.arange(i0, i1 + 1) + 0.5) * step
        U, V = np.meshgrid(su, sv)
        # barycentric weights from edge functions
        b0 = ((uk[1] - U) * (vk[2] - V) - (uk[2] - U) * (vk[1] - V)) / area
        b1 = ((uk[2] - U) * (vk[0] - V) - (uk[0] - U) * (vk[2] - V)) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        depth = 1.0 / (b0 / zk[0] + b1 / zk[1] + b2 / zk[2])
        win = zbuf[i0:i1 + 1, j0:j1 + 1]
        closer = inside & (depth < win)
        win[closer] = depth[closer]
        tid[i0:i1 + 1, j0:j1 + 1][closer] = k
    zbuf[~np.isfinite(zbuf)] = 0.0
    return zbuf, tid


def rasterize_depth(mesh: TriangleMesh, T_CO: RigidTransform, cam: PinholeCamera) -> DepthMap:
    depth, _ = rasterize_grid(camera_triangles(mesh, T_CO), cam, cam.width, cam.height, 1.0)
    return DepthMap(depth)


def rasterize_cells(mesh: TriangleMesh, T_CO: RigidTransform, cam: PinholeCamera, cell_size: int) -> np.ndarray:
    """Depth at the centre ray of every ``cell_size`` patch of the image."""
    nx, ny = cam.width // cell_size, cam.height // cell_size
    depth, _ = rasterize_grid(camera_triangles(mesh, T_CO), cam, nx, ny, float(cell_size))
    return depth
