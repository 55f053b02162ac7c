"""SE(3) algebra, pinhole projection and perspective-crop cameras.

Twists are stored as ``(omega, v)`` but flattened in ``(v, omega)`` order
wherever a 6-vector is needed (Jacobian columns, LM steps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
MIN_DEPTH = 1e-9


class AngleNearPi(ValueError):
    pass


class BehindCamera(ValueError):
    pass


class DegenerateBox(ValueError):
    pass


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]]) * 0.5


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rigid motion ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rows12(cls, values) -> "RigidTransform":
        """Build from 12 row-major numbers ``(R|t)``."""
        M = np.asarray(values, dtype=float).reshape(3, 4)
        return cls(M[:, :3], M[:, 3])

    def to_rows12(self) -> list[float]:
        return [float(x) for x in np.hstack([self.rotation, self.translation[:, None]]).ravel()]

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(N, 3)`` array (or a single 3-vector)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0)))


@dataclass(frozen=True, eq=False)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.array(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.array(self.v, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return cls(omega=xi[3:], v=xi[:3])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.omega])


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Lift pixels ``(N, 2)`` with camera-frame z ``(N,)`` to ``(N, 3)``."""
        uv = np.asarray(uv, dtype=float)
        z = np.asarray(depth, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx * z
        y = (uv[..., 1] - self.cy) / self.fy * z
        return np.stack([x, y, z], axis=-1)


def _so3_exp(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and left Jacobian ``V`` for rotation vector ``w``."""
    th2 = float(w @ w)
    th = np.sqrt(th2)
    W = hat(w)
    W2 = W @ W
    if th < SMALL_ANGLE:
        A = 1.0 - th2 / 6.0
        B = 0.5 - th2 / 24.0
        C = 1.0 / 6.0 - th2 / 120.0
    else:
        A = np.sin(th) / th
        B = 2.0 * np.sin(0.5 * th) ** 2 / th2  # 1 - cos(th) without cancellation
        C = (th - np.sin(th)) / (th2 * th)
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return R, V


def exp_se3(xi: Twist) -> RigidTransform:
    if not isinstance(xi, Twist):
        xi = Twist.from_vector(xi)
    R, V = _so3_exp(xi.omega)
    return RigidTransform(R, V @ xi.v)


def rotation_angle(R: np.ndarray) -> float:
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    # arccos loses precision near 0, so take atan2 of the skew part
    s = np.linalg.norm(vee(R))
    return float(np.arctan2(s, c))


def log_so3(R: np.ndarray) -> np.ndarray:
    th = rotation_angle(R)
    if th > np.pi - NEAR_PI:
        raise AngleNearPi(f"rotation angle {th:.9f} too close to pi")
    w = vee(R)
    if th < SMALL_ANGLE:
        return w * (1.0 + th * th / 6.0)
    return w * (th / np.sin(th))


def log_se3(T: RigidTransform) -> Twist:
    w = log_so3(T.rotation)
    th2 = float(w @ w)
    th = np.sqrt(th2)
    W = hat(w)
    if th < SMALL_ANGLE:
        coef = 1.0 / 12.0 + th2 / 720.0
    else:
        half = 0.5 * th
        coef = (1.0 - half * np.cos(half) / np.sin(half)) / th2
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return Twist(omega=w, v=V_inv @ T.translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def transform_point(T: RigidTransform, x) -> np.ndarray:
    return T.rotation @ np.asarray(x, dtype=float) + T.translation


def rotation_distance_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    return float(np.degrees(rotation_angle(Ra.T @ Rb)))


def project_points(cam: PinholeCamera, X: np.ndarray) -> np.ndarray:
    """Unchecked vectorised projection of ``(N, 3)`` camera-frame points."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    return np.stack([cam.fx * X[..., 0] / z + cam.cx, cam.fy * X[..., 1] / z + cam.cy], axis=-1)


def project_jacobians(cam: PinholeCamera, X: np.ndarray) -> np.ndarray:
    """Stacked ``(N, 2, 3)`` projection Jacobians, unchecked."""
    X = np.asarray(X, dtype=float)
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(X), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * x * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * y * iz * iz
    return J


def project(cam: PinholeCamera, x_cam) -> np.ndarray:
    x_cam = np.asarray(x_cam, dtype=float)
    if x_cam[2] <= MIN_DEPTH:
        raise BehindCamera(f"point has depth {x_cam[2]:g}")
    return project_points(cam, x_cam)


def project_jacobian(cam: PinholeCamera, x_cam) -> np.ndarray:
    x_cam = np.asarray(x_cam, dtype=float)
    if x_cam[2] <= MIN_DEPTH:
        raise BehindCamera(f"point has depth {x_cam[2]:g}")
    return project_jacobians(cam, x_cam[None])[0]


def make_crop_camera(
    cam: PinholeCamera,
    T_CW: RigidTransform,
    bbox2d,
    crop_size: int = 420,
    margin: float = 0.1,
) -> tuple[PinholeCamera, RigidTransform]:
    """Virtual camera looking through the centre of ``bbox2d``.

    The crop camera keeps the optical centre of ``cam`` and only rotates, so
    original and crop pixels are related by a homography. The focal length is
    chosen so that every pixel of the box lands inside a ``crop_size`` square
    with ``margin`` of slack.
    """
    u0, v0, u1, v1 = (float(b) for b in bbox2d)
    if not (u1 > u0 and v1 > v0):
        raise DegenerateBox(f"bbox {bbox2d} has no area")
    if u1 <= 0 or v1 <= 0 or u0 >= cam.width or v0 >= cam.height:
        raise DegenerateBox(f"bbox {bbox2d} does not intersect the image")

    Kinv = np.linalg.inv(cam.K)
    z = Kinv @ np.array([(u0 + u1) / 2, (v0 + v1) / 2, 1.0])
    z /= np.linalg.norm(z)
    # keep the original x axis as far as possible (identity when centred)
    x = np.array([1.0, 0.0, 0.0]) - z[0] * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_CpC = np.stack([x, y, z])

    corners = np.array([[u0, v0, 1.0], [u1, v0, 1.0], [u1, v1, 1.0], [u0, v1, 1.0]])
    rays = (R_CpC @ (Kinv @ corners.T)).T
    extent = np.max(np.abs(rays[:, :2] / rays[:, 2:3]))
    f = crop_size / (2.0 * (1.0 + margin) * extent)
    crop = PinholeCamera(f, f, crop_size / 2.0, crop_size / 2.0, crop_size, crop_size)
    return crop, compose(RigidTransform(R_CpC, np.zeros(3)), T_CW)


def crop_homography(cam: PinholeCamera, crop: PinholeCamera, R_CpC: np.ndarray) -> np.ndarray:
    """3x3 homography taking original pixels to crop pixels."""
    return crop.K @ R_CpC @ np.linalg.inv(cam.K)
