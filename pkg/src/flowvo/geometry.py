"""Rigid-motion and pinhole-camera primitives.

Conventions
-----------
A :class:`RelativeMotion` ``(t, r)`` is the pose of camera ``k+1`` expressed in
the frame of camera ``k``.  A point seen by camera ``k`` at ``X`` is seen by
camera ``k+1`` at ``exp(r).T @ (X - t)``.  Rotations are stored as axis-angle
3-vectors with magnitude strictly below pi; matrices are only built on demand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, NearPiRotation, NonCanonicalRotation, NonFinite

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
MIN_DEPTH = 1e-9


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def exp_so3(r):
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    r = np.asarray(r, dtype=float).reshape(3)
    if not np.all(np.isfinite(r)):
        raise NonFinite(f"rotation vector {r} is not finite")
    theta = float(np.linalg.norm(r))
    if theta >= np.pi:
        raise NonCanonicalRotation(f"|r| = {theta} >= pi")
    K = skew(r)
    if theta < SMALL_ANGLE:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(m):
    """Inverse of :func:`exp_so3` on the canonical chart |r| < pi."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite("rotation matrix is not finite")
    w = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(m) - 1.0)
    theta = float(np.arctan2(s, c))
    if np.pi - theta < NEAR_PI:
        raise NearPiRotation(f"rotation angle {theta} is within {NEAR_PI} of pi")
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta**2 / 6.0)
    return w * (theta / s)


def rotation_angle(m):
    """Geodesic angle of a rotation matrix, valid on [0, pi]."""
    m = np.asarray(m, dtype=float)
    w = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.arctan2(np.linalg.norm(w), 0.5 * (np.trace(m) - 1.0)))


def _vec3(x, name):
    x = np.array(x, dtype=float).reshape(3)
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{name} = {x} is not finite")
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class RelativeMotion:
    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        t = _vec3(self.t, "translation")
        r = _vec3(self.r, "rotation")
        angle = float(np.linalg.norm(r))
        if angle >= np.pi:
            raise NonCanonicalRotation(f"|r| = {angle} >= pi")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self):
        return np.concatenate([self.t, self.r])

    def rotation_matrix(self):
        return exp_so3(self.r)

    def inverse(self):
        R = self.rotation_matrix()
        return RelativeMotion(-R.T @ self.t, -self.r)


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        p = _vec3(self.position, "position")
        R = np.array(self.rotation, dtype=float)
        if R.shape != (3, 3) or not np.all(np.isfinite(R)):
            raise ValueError("rotation must be a finite 3x3 matrix")
        if (np.abs(R.T @ R - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(R) - 1.0) > 1e-9):
            raise ValueError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "rotation", R)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.eye(3))

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T


def compose(pose: Pose, motion: RelativeMotion) -> Pose:
    """Pose of camera k+1 given the pose of camera k and the motion between them."""
    R = motion.rotation_matrix()
    return Pose(pose.position + pose.rotation @ motion.t, pose.rotation @ R)


def between(a: Pose, b: Pose) -> RelativeMotion:
    """The motion that takes pose ``a`` to pose ``b`` (``compose(a, m) == b``)."""
    Rt = a.rotation.T
    return RelativeMotion(Rt @ (b.position - a.position), log_so3(Rt @ b.rotation))


def transform_points(points, motion: RelativeMotion):
    """Map camera-k coordinates (..., 3) into camera k+1."""
    R = motion.rotation_matrix()
    return (np.asarray(points, dtype=float) - motion.t) @ R


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    ox: float
    oy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "ox", "oy"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise NonFinite(f"{name} is not finite")
            object.__setattr__(self, name, v)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image size must be integral")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def shape(self):
        return (self.height, self.width)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.ox],
                         [0.0, self.fy, self.oy],
                         [0.0, 0.0, 1.0]])

    def fov_x(self):
        """Horizontal field of view in degrees."""
        return float(np.degrees(2.0 * np.arctan(self.width / (2.0 * self.fx))))

    def fov_y(self):
        return float(np.degrees(2.0 * np.arctan(self.height / (2.0 * self.fy))))


# TartanAir camera (640x480, fx = fy = 320) reduced to the 64x48 working grid.
DESK_CAMERA = CameraIntrinsics(32.0, 32.0, 32.0, 24.0, 64, 48)


def project(point, k: CameraIntrinsics):
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    point = np.asarray(point, dtype=float)
    z = point[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera("point depth must exceed 1e-9")
    u = k.fx * point[..., 0] / z + k.ox
    v = k.fy * point[..., 1] / z + k.oy
    return np.stack([u, v], axis=-1)


def unproject(pixel, depth, k: CameraIntrinsics):
    """Back-project pixels (..., 2) at the given depth to camera coordinates."""
    pixel = np.asarray(pixel, dtype=float)
    z = np.asarray(depth, dtype=float)
    x = (pixel[..., 0] - k.ox) / k.fx * z
    y = (pixel[..., 1] - k.oy) / k.fy * z
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def pixel_grid(width, height):
    """Integer pixel coordinates as an (H, W, 2) array of (u, v)."""
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([u, v], axis=-1)
