"""Procedural scenes, ground-truth flow and relative motion.

No images are rendered.  A scene is a box-shaped room with spheres inside it,
seeded by ``(seed, environment_id)``; a camera placed in the room ray-casts a
depth map, and dense flow is produced by moving every back-projected pixel
through the sampled relative motion.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DESK_CAMERA,
    MIN_DEPTH,
    CameraIntrinsics,
    Pose,
    RelativeMotion,
    exp_so3,
    pixel_grid,
)

MIN_VALID_FRACTION = 0.8
MAX_ATTEMPTS = 200


class MotionPattern(str, enum.Enum):
    FULL_6DOF = "full_6dof"
    PLANAR_CARLIKE = "planar_carlike"


@dataclass(frozen=True)
class FlowField:
    """Dense per-pixel displacement, stored as an (H, W, 2) array of (du, dv)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class SceneConfig:
    point_count: int = 12  # spheres placed inside the room
    depth_range: tuple = (1.0, 20.0)
    translation_range: tuple = (0.2, 1.0)
    rotation_range: tuple = (0.0, 0.15)
    seed: int = 0
    environment_id: int = 0

    def __post_init__(self):
        dmin, dmax = self.depth_range
        if not 0 < dmin < dmax:
            raise ValueError(f"invalid depth_range {self.depth_range}")
        tmin, tmax = self.translation_range
        if not 0 <= tmin < tmax:
            raise ValueError(f"invalid translation_range {self.translation_range}")
        rmin, rmax = self.rotation_range
        if not 0 <= rmin < rmax < np.pi:
            raise ValueError(f"invalid rotation_range {self.rotation_range}")
        if self.point_count < 0:
            raise ValueError("point_count must be non-negative")

    def scaled(self, factor):
        """The same world enlarged by ``factor``: depths and translations scale together."""
        return SceneConfig(
            point_count=self.point_count,
            depth_range=tuple(factor * d for d in self.depth_range),
            translation_range=tuple(factor * t for t in self.translation_range),
            rotation_range=self.rotation_range,
            seed=self.seed,
            environment_id=self.environment_id,
        )

    def with_environment(self, environment_id):
        return SceneConfig(self.point_count, self.depth_range, self.translation_range,
                           self.rotation_range, self.seed, environment_id)


@dataclass(frozen=True)
class Sample:
    flow: FlowField
    motion: RelativeMotion
    intrinsics: CameraIntrinsics
    valid_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.flow.data.shape[:2] != shape or self.valid_mask.shape != shape:
            raise ValueError("flow, mask and intrinsics dimensions disagree")


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.5
    dropout: float = 0.05

    def __post_init__(self):
        if self.sigma < 0 or not 0 <= self.dropout < 1:
            raise ValueError(f"invalid noise model {self}")


@dataclass(frozen=True)
class _Scene:
    half_extent: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    depth_range: tuple


def _build_scene(config: SceneConfig) -> _Scene:
    rng = np.random.default_rng([config.seed, config.environment_id, 0])
    dmax = config.depth_range[1]
    half = rng.uniform(0.3, 0.7, size=3) * dmax
    centers = rng.uniform(-0.9, 0.9, size=(config.point_count, 3)) * half
    radii = rng.uniform(0.025, 0.15, size=config.point_count) * dmax
    return _Scene(half, centers, radii, tuple(config.depth_range))


def _ray_depth(scene: _Scene, pose: Pose, k: CameraIntrinsics):
    grid = pixel_grid(k.width, k.height)
    rays = np.empty(grid.shape[:2] + (3,))
    rays[..., 0] = (grid[..., 0] - k.ox) / k.fx
    rays[..., 1] = (grid[..., 1] - k.oy) / k.fy
    rays[..., 2] = 1.0
    # camera-frame z of each ray is 1, so the ray parameter is the depth
    d = rays @ pose.rotation.T
    c = pose.position
    with np.errstate(divide="ignore", invalid="ignore"):
        exits = (np.sign(d) * scene.half_extent - c) / d
    exits[~np.isfinite(exits) | (exits <= 0)] = np.inf
    depth = exits.min(axis=-1)
    dd = np.einsum("hwi,hwi->hw", d, d)
    for center, radius in zip(scene.centers, scene.radii):
        oc = c - center
        b = d @ oc
        cc = oc @ oc - radius * radius
        disc = b * b - dd * cc
        hit = disc >= 0
        if not hit.any():
            continue
        root = np.sqrt(np.where(hit, disc, 0.0))
        t_near = (-b - root) / dd
        t_far = (-b + root) / dd
        t = np.where(t_near > 0, t_near, t_far)
        t = np.where(hit & (t > 0), t, np.inf)
        np.minimum(depth, t, out=depth)
    lo, hi = scene.depth_range
    return np.clip(depth, lo, hi)


def render_depth(config: SceneConfig, pose: Pose, k: CameraIntrinsics):
    """Per-pixel depth (H, W) seen from ``pose``, clamped to ``config.depth_range``."""
    return _ray_depth(_build_scene(config), pose, k)


def flow_from_depth_motion(depth, motion: RelativeMotion, k: CameraIntrinsics):
    """Exact flow induced by ``motion`` on a depth map.

    Returns the flow and a mask that is false where the moved point falls
    behind the second camera or lands outside its frame.  Flow is zero where
    the point falls behind the camera.
    """
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (k.height, k.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics")
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    grid = pixel_grid(k.width, k.height)
    X = np.empty(grid.shape[:2] + (3,))
    X[..., 0] = (grid[..., 0] - k.ox) / k.fx * depth
    X[..., 1] = (grid[..., 1] - k.oy) / k.fy * depth
    X[..., 2] = depth
    R = exp_so3(motion.r)
    X2 = (X - motion.t) @ R
    z2 = X2[..., 2]
    front = z2 > MIN_DEPTH
    zs = np.where(front, z2, 1.0)
    u2 = k.fx * X2[..., 0] / zs + k.ox
    v2 = k.fy * X2[..., 1] / zs + k.oy
    flow = np.stack([u2 - grid[..., 0], v2 - grid[..., 1]], axis=-1)
    flow[~front] = 0.0
    inside = (u2 >= 0) & (u2 <= k.width - 1) & (v2 >= 0) & (v2 <= k.height - 1)
    return FlowField(flow), front & inside


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_motion(rng, config: SceneConfig, pattern) -> RelativeMotion:
    pattern = MotionPattern(pattern)
    mag_t = rng.uniform(*config.translation_range)
    mag_r = rng.uniform(*config.rotation_range)
    if pattern is MotionPattern.FULL_6DOF:
        return RelativeMotion(mag_t * _unit(rng), mag_r * _unit(rng))
    # forward motion along a circular arc with yaw about the camera's y axis
    yaw = mag_r * rng.choice([-1.0, 1.0])
    t = mag_t * np.array([np.sin(0.5 * yaw), 0.0, np.cos(0.5 * yaw)])
    return RelativeMotion(t, np.array([0.0, yaw, 0.0]))


def _sample_camera(rng, scene: _Scene, pattern) -> Pose:
    margin = 0.05 * scene.depth_range[1]
    for _ in range(MAX_ATTEMPTS):
        position = rng.uniform(-0.4, 0.4, size=3) * scene.half_extent
        gaps = np.linalg.norm(scene.centers - position, axis=1) - scene.radii
        if gaps.size == 0 or gaps.min() > margin:
            break
    if MotionPattern(pattern) is MotionPattern.FULL_6DOF:
        angle = rng.uniform(0.0, 0.999 * np.pi)
        rotation = exp_so3(angle * _unit(rng))
    else:
        rotation = exp_so3([0.0, rng.uniform(-3.0, 3.0), 0.0])
    return Pose(position, rotation)


def generate_sample(config: SceneConfig, index: int, pattern="full_6dof",
                    k: CameraIntrinsics = DESK_CAMERA, scene=None) -> Sample:
    """Sample ``index`` of the dataset described by ``config``.

    Draws are redone until at least 80% of the pixels carry valid flow.
    """
    scene = scene if scene is not None else _build_scene(config)
    rng = np.random.default_rng([config.seed, config.environment_id, 1, index])
    for _ in range(MAX_ATTEMPTS):
        pose = _sample_camera(rng, scene, pattern)
        motion = sample_motion(rng, config, pattern)
        depth = _ray_depth(scene, pose, k)
        flow, mask = flow_from_depth_motion(depth, motion, k)
        if mask.mean() >= MIN_VALID_FRACTION:
            return Sample(flow, motion, k, mask)
    raise RuntimeError(f"no valid draw for sample {index} after {MAX_ATTEMPTS} attempts")


def generate_dataset(config: SceneConfig, n: int, motion_pattern="full_6dof",
                     k: CameraIntrinsics = DESK_CAMERA) -> list:
    if n <= 0:
        raise ValueError("sample count must be positive")
    scene = _build_scene(config)
    return [generate_sample(config, i, motion_pattern, k, scene) for i in range(n)]


def corrupt_flow(flow: FlowField, noise: NoiseModel, seed) -> FlowField:
    """Add Gaussian noise and zero out a random fraction of pixels."""
    rng = np.random.default_rng(seed)
    shape = flow.data.shape
    out = flow.data + noise.sigma * rng.normal(size=shape)
    dropped = rng.random(shape[:2]) < noise.dropout
    out[dropped] = 0.0
    return FlowField(out)
