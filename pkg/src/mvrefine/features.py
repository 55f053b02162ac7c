"""Query feature maps, descriptor sources and 3D registered features.

A :class:`FeatureMap` stores one descriptor per ``cell_size`` patch. Pixel
``uv`` maps to continuous grid coordinates ``uv / cell_size - 0.5``, so a
descriptor sits exactly at its patch centre. Sampling the patch grid
bilinearly at pixel coordinates is the same as bilinearly up-sampling it to
full resolution first, so the up-sampled grid is never materialised.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np

from .geometry import PinholeCamera, RigidTransform, compose, inverse
from .mesh import TriangleMesh, camera_triangles, rasterize_grid, FullyBehindCamera

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class OutOfBounds(ValueError):
    pass


class NoVisibleSurface(ValueError):
    pass


class BadMagic(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (H, W, D)
    cell_size: int = 14

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("feature map data must be H x W x D")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        s = self.cell_size
        return (
            (uv[..., 0] >= 0) & (uv[..., 0] < self.width * s)
            & (uv[..., 1] >= 0) & (uv[..., 1] < self.height * s)
        )

    def _lattice(self, uv: np.ndarray):
        g = np.asarray(uv, dtype=float) / self.cell_size - 0.5
        out = []
        for axis, n in ((0, self.width), (1, self.height)):
            c = g[..., axis]
            clamped = np.clip(c, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(clamped).astype(np.int64), max(n - 2, 0))
            a = clamped - i0
            # outside the centre lattice the interpolant is flat along this axis
            live = (c >= 0.0) & (c <= n - 1.0)
            out.append((i0, a, live))
        return out

    def sample(self, uv: np.ndarray) -> np.ndarray:
        """Bilinear samples ``(N, D)``; coordinates outside the grid are clamped."""
        (j0, a, _), (i0, b, _) = self._lattice(uv)
        j1 = np.minimum(j0 + 1, self.width - 1)
        i1 = np.minimum(i0 + 1, self.height - 1)
        F = self.data
        a = a[..., None]
        b = b[..., None]
        return (
            (1 - b) * ((1 - a) * F[i0, j0] + a * F[i0, j1])
            + b * ((1 - a) * F[i1, j0] + a * F[i1, j1])
        )

    def gradient(self, uv: np.ndarray) -> np.ndarray:
        """Derivative of :meth:`sample` w.r.t. pixel ``(u, v)``, shape ``(N, D, 2)``."""
        (j0, a, lu), (i0, b, lv) = self._lattice(uv)
        j1 = np.minimum(j0 + 1, self.width - 1)
        i1 = np.minimum(i0 + 1, self.height - 1)
        F = self.data
        a = a[..., None]
        b = b[..., None]
        s = float(self.cell_size)
        du = ((1 - b) * (F[i0, j1] - F[i0, j0]) + b * (F[i1, j1] - F[i1, j0])) / s
        dv = ((1 - a) * (F[i1, j0] - F[i0, j0]) + a * (F[i1, j1] - F[i0, j1])) / s
        du = du * lu[..., None]
        dv = dv * lv[..., None]
        return np.stack([du, dv], axis=-1)

    def cell_centers(self) -> np.ndarray:
        """Pixel coordinates of every cell centre, shape ``(H, W, 2)``."""
        s = self.cell_size
        jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(jj + 0.5) * s, (ii + 0.5) * s], axis=-1)


def sample_bilinear(fmap: FeatureMap, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    if not fmap.in_bounds(uv):
        raise OutOfBounds(f"uv {tuple(uv)} outside feature map")
    return fmap.sample(uv[None])[0]


def sample_gradient(fmap: FeatureMap, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    if not fmap.in_bounds(uv):
        raise OutOfBounds(f"uv {tuple(uv)} outside feature map")
    return fmap.gradient(uv[None])[0]


def normalize_descriptors(d: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    return np.where(n > eps, d / np.maximum(n, eps), 0.0)


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (k, D_in)
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    def apply(self, d: np.ndarray) -> np.ndarray:
        return (np.asarray(d, dtype=float) - self.mean) @ self.components.T

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self.components + self.mean


def fit_pca(descriptors, k: int, tol: float = 1e-12) -> PcaBasis:
    """Top-``k`` principal directions of the sample covariance.

    Each component's largest-magnitude entry is made positive. When fewer than
    ``k`` eigenvalues are non-zero, the missing rows are zero and the basis is
    flagged ``rank_deficient`` (a :class:`RankDeficientWarning` is issued).
    """
    X = np.asarray(descriptors, dtype=float)
    n, d = X.shape
    if k > d:
        raise ValueError(f"k={k} exceeds descriptor dimension {d}")
    if n < k:
        raise ValueError(f"need at least k={k} descriptors, got {n}")
    mean = X.mean(axis=0)
    C = (X - mean).T @ (X - mean) / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(C)
    order = np.argsort(evals)[::-1][:k]
    evals = np.maximum(evals[order], 0.0)
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    live = evals > tol * max(float(evals[0]) if len(evals) else 0.0, 1.0)
    deficient = not bool(live.all())
    if deficient:
        warnings.warn(f"only {int(live.sum())} of {k} PCA components are non-zero", RankDeficientWarning, stacklevel=2)
        comps[~live] = 0.0
        evals = np.where(live, evals, 0.0)
    return PcaBasis(mean, comps, evals, deficient)


def apply_pca(basis: PcaBasis, d) -> np.ndarray:
    return basis.apply(d)


class DescriptorSource(Protocol):
    """Anything that maps object-frame surface points ``(N, 3)`` to ``(N, D)``."""

    dim: int

    def __call__(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class SyntheticFeatureField:
    """Smooth, deterministic descriptor field ``normalize(M sin(F x + phi))``."""

    object_id: str
    frequencies: np.ndarray  # (m, 3), radians per length unit
    phases: np.ndarray  # (m,)
    mixing: np.ndarray  # (D, m)
    seed: int = 0

    @classmethod
    def random(
        cls,
        object_id: str,
        seed: int,
        dim: int = 32,
        n_components: int = 64,
        wavelength: tuple[float, float] = (1.0, 3.0),
    ) -> "SyntheticFeatureField":
        """Random field whose wavelengths lie in ``wavelength`` (length units)."""
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n_components, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lam = rng.uniform(wavelength[0], wavelength[1], size=n_components)
        freqs = dirs * (2 * np.pi / lam)[:, None]
        phases = rng.uniform(0, 2 * np.pi, size=n_components)
        mixing = rng.normal(size=(dim, n_components)) / np.sqrt(n_components)
        return cls(object_id, freqs, phases, mixing, seed)

    @property
    def dim(self) -> int:
        return self.mixing.shape[0]

    def raw(self, points: np.ndarray) -> np.ndarray:
        P = np.asarray(points, dtype=float)
        return np.sin(P @ self.frequencies.T + self.phases) @ self.mixing.T

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return normalize_descriptors(self.raw(points))

    def lipschitz_raw(self) -> float:
        """Lipschitz constant of the un-normalised field."""
        return float(np.linalg.norm(self.mixing, 2) * np.linalg.norm(self.frequencies, 2))

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "seed": int(self.seed),
            "frequencies": self.frequencies.tolist(),
            "phases": self.phases.tolist(),
            "mixing": self.mixing.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticFeatureField":
        return cls(
            str(d["object_id"]),
            np.array(d["frequencies"], dtype=float),
            np.array(d["phases"], dtype=float),
            np.array(d["mixing"], dtype=float),
            int(d.get("seed", 0)),
        )


def synth_descriptor(field: SyntheticFeatureField, x) -> np.ndarray:
    return field(np.asarray(x, dtype=float)[None])[0]


@dataclass(frozen=True, eq=False)
class RegisteredFeatureSet:
    descriptors: np.ndarray  # (N, D)
    points: np.ndarray  # (N, 3) object frame
    view_id: str = ""
    cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def interior_mask(valid: np.ndarray) -> np.ndarray:
    """Cells that are valid together with all 8 neighbours."""
    H, W = valid.shape
    out = np.zeros_like(valid)
    if H < 3 or W < 3:
        return out
    core = valid[1:-1, 1:-1].copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            core &= valid[1 + di:H - 1 + di, 1 + dj:W - 1 + dj]
    out[1:-1, 1:-1] = core
    return out


def build_registered_features(
    mesh: TriangleMesh,
    T_CpO: RigidTransform,
    crop_cam: PinholeCamera,
    source: Callable[[np.ndarray], np.ndarray],
    cell_size: int = 14,
    pca: PcaBasis | None = None,
    view_id: str = "",
) -> RegisteredFeatureSet:
    """Render the object at its coarse pose and lift patch descriptors to 3D.

    Depth is evaluated exactly on the ray through every patch centre, and only
    patches whose 8 neighbours are also on the object are kept.
    """
    nx, ny = crop_cam.width // cell_size, crop_cam.height // cell_size
    try:
        tris = camera_triangles(mesh, T_CpO)
    except FullyBehindCamera as exc:
        raise NoVisibleSurface(str(exc)) from exc
    depth, _ = rasterize_grid(tris, crop_cam, nx, ny, float(cell_size))
    keep = interior_mask(depth > 0)
    ii, jj = np.nonzero(keep)
    if len(ii) == 0:
        raise NoVisibleSurface(f"no interior patch of {mesh.object_id!r} visible in view {view_id!r}")
    uv = np.stack([(jj + 0.5) * cell_size, (ii + 0.5) * cell_size], axis=1)
    Xc = crop_cam.unproject(uv, depth[ii, jj])
    x_obj = inverse(T_CpO).apply(Xc)
    desc = normalize_descriptors(source(x_obj))
    if pca is not None:
        desc = pca.apply(desc)
    return RegisteredFeatureSet(desc, x_obj, view_id, np.stack([ii, jj], axis=1))


@dataclass(frozen=True, eq=False)
class SceneObject:
    """A ground-truth object instance for query synthesis."""

    mesh: TriangleMesh
    T_WO: RigidTransform
    source: Callable[[np.ndarray], np.ndarray]


def build_query_feature_map(
    objects: list[SceneObject],
    cam: PinholeCamera,
    T_CW: RigidTransform,
    cell_size: int = 14,
    background_mode: str = "zeros",
    seed: int = 0,
    pca: PcaBasis | None = None,
) -> FeatureMap:
    """Synthesise what a frozen extractor would see in ``cam``.

    Every patch-centre ray is z-buffered against all objects; the winning
    object's descriptor field is evaluated at the hit point. Background cells
    are zero or unit-norm noise drawn from ``seed``.
    """
    nx, ny = cam.width // cell_size, cam.height // cell_size
    best = np.full((ny, nx), np.inf)
    owner = np.full((ny, nx), -1, dtype=np.int64)
    for k, obj in enumerate(objects):
        try:
            tris = camera_triangles(obj.mesh, compose(T_CW, obj.T_WO))
        except FullyBehindCamera:
            continue
        depth, _ = rasterize_grid(tris, cam, nx, ny, float(cell_size))
        hit = (depth > 0) & (depth < best)
        best[hit] = depth[hit]
        owner[hit] = k

    dims = {int(getattr(o.source, "dim", 0)) for o in objects}
    if len(dims) > 1:
        raise DimMismatch(f"descriptor sources disagree on dimension: {sorted(dims)}")
    D = dims.pop() if dims else 0
    if background_mode == "zeros":
        data = np.zeros((ny, nx, D))
    elif background_mode == "noise":
        rng = np.random.default_rng(seed)
        data = normalize_descriptors(rng.normal(size=(ny, nx, D)))
    else:
        raise ValueError(f"unknown background_mode {background_mode!r}")

    for k, obj in enumerate(objects):
        ii, jj = np.nonzero(owner == k)
        if len(ii) == 0:
            continue
        uv = np.stack([(jj + 0.5) * cell_size, (ii + 0.5) * cell_size], axis=1)
        Xc = cam.unproject(uv, best[ii, jj])
        x_obj = inverse(compose(T_CW, obj.T_WO)).apply(Xc)
        data[ii, jj] = normalize_descriptors(obj.source(x_obj))
    if pca is not None:
        data = pca.apply(data.reshape(-1, D)).reshape(ny, nx, pca.k)
    return FeatureMap(data, cell_size)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``."""
    z = np.asarray(target, float) - np.asarray(eye, float)
    z /= np.linalg.norm(z)
    up = np.asarray(up, float)
    if abs(z @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ np.asarray(eye, float))


def fit_object_pca(
    mesh: TriangleMesh,
    source: Callable[[np.ndarray], np.ndarray],
    k: int,
    n_views: int = 64,
    crop_size: int = 420,
    cell_size: int = 14,
) -> PcaBasis:
    """Fit a per-object basis on masked patch descriptors from Fibonacci viewpoints."""
    from .geometry import make_crop_camera, project_points

    center = mesh.vertices.mean(axis=0)
    radius = 2.5 * mesh.diameter
    cam = PinholeCamera(600.0, 600.0, 320.0, 240.0, 640, 480)
    T_WO = RigidTransform.identity()
    samples = []
    for eye in fibonacci_sphere(n_views) * radius + center:
        T_CW = look_at(eye, center)
        uv = project_points(cam, T_CW.apply(mesh.vertices))
        bbox = (*uv.min(axis=0), *uv.max(axis=0))
        crop, T_CpW = make_crop_camera(cam, T_CW, bbox, crop_size)
        try:
            reg = build_registered_features(mesh, compose(T_CpW, T_WO), crop, source, cell_size)
        except NoVisibleSurface:
            continue
        samples.append(reg.descriptors)
    return fit_pca(np.concatenate(samples, axis=0), k)


def save_feature_tensor(fmap: FeatureMap, path) -> None:
    H, W, D = fmap.data.shape
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, H, W, D, int(fmap.cell_size)))
        fh.write(payload)


def load_feature_tensor(path, expected_dim: int | None = None) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FMAP_MAGIC:
        raise BadMagic(f"{path}: not an FMAP file")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, H, W, D, cell = _HEADER.unpack_from(raw)
    if version != FMAP_VERSION:
        raise BadMagic(f"{path}: unsupported FMAP version {version}")
    if expected_dim is not None and D != expected_dim:
        raise DimMismatch(f"{path}: descriptor dim {D}, expected {expected_dim}")
    n = H * W * D
    body = raw[_HEADER.size:]
    if len(body) < 4 * n:
        raise TruncatedFile(f"{path}: expected {n} floats, found {len(body) // 4}")
    if len(body) > 4 * n:
        raise DimMismatch(f"{path}: {len(body) - 4 * n} trailing bytes after {H}x{W}x{D} grid")
    data = np.frombuffer(body, dtype="<f4", count=n).reshape(H, W, D).copy()
    return FeatureMap(data, cell)
