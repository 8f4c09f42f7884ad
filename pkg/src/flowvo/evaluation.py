"""Trajectory integration, similarity alignment, ATE and segment drift."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTrajectory, TrajectoryTooShort
from .geometry import Pose, RelativeMotion, between, compose, rotation_angle

DESK_SEGMENTS = (5.0, 10.0, 20.0, 40.0)
KITTI_SEGMENTS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class Alignment(str, enum.Enum):
    SIMILARITY = "similarity"
    RIGID = "rigid"
    NONE = "none"


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.positions, dtype=float)
        R = np.asarray(self.rotations, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or R.shape != (p.shape[0], 3, 3) or ts.shape != (p.shape[0],):
            raise ValueError("inconsistent trajectory arrays")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "rotations", R)

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def from_poses(cls, poses, timestamps=None):
        poses = list(poses)
        ts = np.arange(len(poses), dtype=float) if timestamps is None else timestamps
        return cls(ts, np.array([p.position for p in poses]).reshape(-1, 3),
                   np.array([p.rotation for p in poses]).reshape(-1, 3, 3))

    def pose(self, i):
        return Pose(self.positions[i], self.rotations[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self))]

    def matrices(self):
        T = np.tile(np.eye(4), (len(self), 1, 1))
        T[:, :3, :3] = self.rotations
        T[:, :3, 3] = self.positions
        return T

    def transformed(self, scale, rotation, translation):
        """Apply ``x -> s R x + t`` to positions and ``R`` to orientations."""
        p = scale * self.positions @ np.asarray(rotation).T + translation
        return Trajectory(self.timestamps, p, np.asarray(rotation) @ self.rotations)


def integrate(motions, start: Pose | None = None, timestamps=None) -> Trajectory:
    pose = start or Pose.identity()
    poses = [pose]
    for m in motions:
        pose = compose(pose, m)
        poses.append(pose)
    return Trajectory.from_poses(poses, timestamps)


def relative_motions(traj: Trajectory) -> list:
    """Frame-to-frame motions; ``integrate`` inverts this."""
    poses = traj.poses()
    return [between(a, b) for a, b in zip(poses, poses[1:])]


def align_similarity(est: Trajectory, gt: Trajectory, with_scale=True):
    """Least-squares ``(s, R, t)`` minimising sum |s R p_est + t - p_gt|^2 (Umeyama)."""
    x = est.positions
    y = gt.positions
    if len(x) != len(y):
        raise ValueError("trajectories differ in length")
    if len(x) < 3:
        raise DegenerateTrajectory("alignment needs at least 3 poses")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sv_gt = np.linalg.svd(yc, compute_uv=False)
    if sv_gt[0] == 0 or sv_gt[1] <= 1e-9 * sv_gt[0]:
        raise DegenerateTrajectory("ground-truth positions are collinear")
    if not np.any(xc):
        raise DegenerateTrajectory("estimated positions are all identical")
    n = len(x)
    cov = yc.T @ xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / (np.sum(xc * xc) / n)) if with_scale else 1.0
    t = my - s * R @ mx
    return s, R, t


def _aligned(est, gt, mode):
    mode = Alignment(mode)
    if mode is Alignment.NONE:
        return est, (1.0, np.eye(3), np.zeros(3))
    s, R, t = align_similarity(est, gt, with_scale=mode is Alignment.SIMILARITY)
    return est.transformed(s, R, t), (s, R, t)


def ate(est: Trajectory, gt: Trajectory, mode="similarity") -> float:
    """RMSE of positions after the selected alignment."""
    if len(est) != len(gt):
        raise ValueError("trajectories differ in length")
    aligned, _ = _aligned(est, gt, mode)
    err = aligned.positions - gt.positions
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def path_lengths(traj: Trajectory):
    steps = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass(frozen=True)
class SegmentError:
    first: int
    last: int
    length: float
    t_err: float  # fraction of length
    r_err: float  # radians per unit length


def segment_errors(est: Trajectory, gt: Trajectory, lengths=DESK_SEGMENTS, step=1):
    """Per-segment relative-pose errors, KITTI odometry style.

    A segment of length L starts at every ``step``-th frame and ends at the
    first frame where accumulated ground-truth path length reaches L.
    """
    if len(est) != len(gt):
        raise ValueError("trajectories differ in length")
    dist = path_lengths(gt)
    if dist[-1] < max(lengths):
        raise TrajectoryTooShort(
            f"ground-truth path is {dist[-1]:.3f} long, shorter than segment {max(lengths)}")
    Te, Tg = est.matrices(), gt.matrices()
    out = []
    for first in range(0, len(gt), step):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="left"))
            if last >= len(gt):
                continue
            d_gt = np.linalg.solve(Tg[first], Tg[last])
            d_est = np.linalg.solve(Te[first], Te[last])
            err = np.linalg.solve(d_est, d_gt)
            out.append(SegmentError(first, last, float(L),
                                    float(np.linalg.norm(err[:3, 3])) / L,
                                    rotation_angle(err[:3, :3]) / L))
    return out


def kitti_drift(est: Trajectory, gt: Trajectory, lengths=DESK_SEGMENTS, step=1):
    """Average (t_rel in percent, r_rel in degrees per 100 units) over all segments."""
    errs = segment_errors(est, gt, lengths, step)
    t_rel = 100.0 * float(np.mean([e.t_err for e in errs]))
    r_rel = 100.0 * float(np.degrees(np.mean([e.r_err for e in errs])))
    return t_rel, r_rel


@dataclass(frozen=True)
class MetricReport:
    ate: float
    t_rel: float
    r_rel: float
    alignment: str
    segments: dict = field(default_factory=dict)  # length -> (t_rel %, r_rel deg/100)

    def __post_init__(self):
        for v in (self.ate, self.t_rel, self.r_rel):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"invalid metric value {v}")

    def to_text(self):
        lines = ["metric\tvalue",
                 f"alignment\t{self.alignment}",
                 f"ate\t{self.ate:.10g}",
                 f"t_rel\t{self.t_rel:.10g}",
                 f"r_rel\t{self.r_rel:.10g}"]
        for L, (t, r) in sorted(self.segments.items()):
            lines.append(f"t_rel@{L:g}\t{t:.10g}")
            lines.append(f"r_rel@{L:g}\t{r:.10g}")
        return "\n".join(lines) + "\n"


def evaluate_trajectory(est, gt, mode="similarity", lengths=DESK_SEGMENTS, step=1) -> MetricReport:
    errs = segment_errors(est, gt, lengths, step)
    per = {}
    for L in lengths:
        sel = [e for e in errs if e.length == L]
        if sel:
            per[L] = (100.0 * float(np.mean([e.t_err for e in sel])),
                      100.0 * float(np.degrees(np.mean([e.r_err for e in sel]))))
    t_rel = 100.0 * float(np.mean([e.t_err for e in errs]))
    r_rel = 100.0 * float(np.degrees(np.mean([e.r_err for e in errs])))
    return MetricReport(ate(est, gt, mode), t_rel, r_rel, Alignment(mode).value, per)
