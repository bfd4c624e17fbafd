"""SE(3) algebra, pinhole projection and back-projection.

Conventions used throughout the package:

* rotations are 3x3 float64 matrices,
* twists are rotation-first 6-vectors ``(wx, wy, wz, vx, vy, vz)``,
* solver updates multiply on the right: ``T <- T @ exp(delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REORTHO_EVERY = 32
_SMALL = 1e-8


class NonPositiveDepth(ValueError):
    pass


class NearPiRotation(ValueError):
    pass


def hat(w):
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def orthonormalize(R):
    """Nearest rotation in Frobenius norm (polar projection)."""
    U, _, Vt = np.linalg.svd(R)
    M = U @ Vt
    if np.linalg.det(M) < 0:
        U[:, -1] *= -1
        M = U @ Vt
    return M


def rot_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w):
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    if theta2 == 0.0:
        return np.eye(3)
    theta = np.sqrt(theta2)
    W = hat(w)
    if theta < _SMALL:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, robust near 0 and pi."""
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def so3_log(R):
    theta = rotation_angle(R)
    if theta > np.pi - 1e-6:
        raise NearPiRotation(f"rotation angle {theta:.9f} is at the cut locus")
    v = vee(R - R.T)
    if theta < _SMALL:
        return 0.5 * (1.0 + theta * theta / 6.0) * v
    return theta / (2.0 * np.sin(theta)) * v


def _left_jacobian(w):
    theta2 = float(w @ w)
    W = hat(w)
    if theta2 < _SMALL**2:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * W + b * (W @ W)


def _left_jacobian_inv(w):
    theta2 = float(w @ w)
    W = hat(w)
    if theta2 < 1e-10:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = np.sqrt(theta2)
        c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta2
    return np.eye(3) - 0.5 * W + c * (W @ W)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation; maps x to R x + t.

    ``chain`` counts compositions since the rotation was last
    re-orthonormalized.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    chain: int = 0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def as_3x4(self):
        return np.hstack([self.rotation, self.translation[:, None]])

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation, self.chain)

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    chain = a.chain + b.chain + 1
    if chain >= REORTHO_EVERY:
        R = orthonormalize(R)
        chain = 0
    return RigidTransform(R, t, chain)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def apply(t: RigidTransform, p):
    """Apply to a single point (3,) or a point array (n, 3)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ t.rotation.T + t.translation


def exp_map(x) -> RigidTransform:
    x = np.asarray(x, dtype=np.float64)
    w, v = x[:3], x[3:]
    return RigidTransform(so3_exp(w), _left_jacobian(w) @ v)


def log_map(t: RigidTransform) -> np.ndarray:
    w = so3_log(t.rotation)
    return np.concatenate([w, _left_jacobian_inv(w) @ t.translation])


def geodesic_angle(a: RigidTransform, b: RigidTransform) -> float:
    """Rotation angle between the rotation parts of two transforms."""
    return rotation_angle(a.rotation.T @ b.rotation)


def translation_distance(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, size=256, focal=256.0):
        return cls(focal, focal, size / 2.0, size / 2.0, size, size)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    def in_frame(self, uv):
        uv = np.asarray(uv)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))


def project(k: CameraIntrinsics, p):
    """Pinhole projection of (3,) or (..., 3) camera-frame points."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def backproject(k: CameraIntrinsics, q, depth):
    q = np.asarray(q, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (q[..., 0] - k.cx) / k.fx * depth
    y = (q[..., 1] - k.cy) / k.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def transform_to_list(t: RigidTransform):
    """Row-major 3x4 nested list (dataset serialization)."""
    return t.as_3x4().tolist()


def transform_from_list(rows) -> RigidTransform:
    M = np.asarray(rows, dtype=np.float64)
    if M.shape != (3, 4):
        raise ValueError(f"expected a 3x4 transform, got shape {M.shape}")
    return RigidTransform(M[:, :3], M[:, 3])
