"""On-disk formats: flow and mask files, trajectories, config files, datasets.

Flow files hold ``b"UVFL"``, little-endian u32 width and height, then
width*height*2 little-endian f32 values (u then v per pixel, row-major).
Mask files hold ``b"MASK"``, the same dims, then the row-major bits packed
MSB first.  Trajectories are KITTI (12 numbers, row-major [R|t]) or TUM
(``timestamp tx ty tz qx qy qz qw``) text files, sniffed by line shape.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError
from .evaluation import Trajectory
from .geometry import CameraIntrinsics

FLOW_MAGIC = b"UVFL"
MASK_MAGIC = b"MASK"
KITTI, TUM = "kitti", "tum"


def _read_header(data: bytes, magic: bytes, path):
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"{path}: missing {magic.decode()} header")
    w, h = struct.unpack("<II", data[4:12])
    return w, h


def write_flow(path, flow):
    flow = np.asarray(getattr(flow, "data", flow))
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h = _read_header(data, FLOW_MAGIC, path)
    if len(data) != 12 + 8 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} flow, file has {len(data) - 12} payload bytes")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def write_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<II", w, h))
        fh.write(np.packbits(mask.ravel()).tobytes())


def read_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h = _read_header(data, MASK_MAGIC, path)
    if len(data) != 12 + (w * h + 7) // 8:
        raise FormatError(f"{path}: mask payload does not match {w}x{h}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=12), count=w * h)
    return bits.astype(bool).reshape(h, w)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _numbers(line, lineno, path):
    try:
        return [float(v) for v in line.split()]
    except ValueError:
        raise FormatError(f"{path}: non-numeric value", line=lineno) from None


def read_trajectory(path):
    """Returns ``(Trajectory, format)``; KITTI poses get timestamps 0, 1, 2, ..."""
    rows, fmt = [], None
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError:
        raise FormatError(f"{path}: not a text file") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = _numbers(line.replace(",", " "), lineno, path)
        kind = {12: KITTI, 8: TUM}.get(len(vals))
        if kind is None:
            raise FormatError(f"{path}: expected 12 (KITTI) or 8 (TUM) numbers, got {len(vals)}",
                              line=lineno)
        if fmt is not None and kind != fmt:
            raise FormatError(f"{path}: line switches from {fmt} to {kind}", line=lineno)
        fmt = kind
        rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no poses")
    a = np.array(rows)
    if not np.all(np.isfinite(a)):
        raise FormatError(f"{path}: non-finite values")
    if fmt == KITTI:
        m = a.reshape(-1, 3, 4)
        ts, pos, rot = np.arange(len(a), dtype=float), m[:, :, 3], m[:, :, :3]
    else:
        ts, pos = a[:, 0], a[:, 1:4]
        if np.any(np.linalg.norm(a[:, 4:], axis=1) == 0):
            raise FormatError(f"{path}: zero quaternion")
        rot = Rotation.from_quat(a[:, 4:]).as_matrix()
    try:
        return Trajectory(ts, pos, rot), fmt
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def write_trajectory(path, traj: Trajectory, fmt=KITTI):
    lines = []
    if fmt == KITTI:
        for p, R in zip(traj.positions, traj.rotations):
            m = np.hstack([R, p[:, None]])
            lines.append(" ".join(f"{v:.17g}" for v in m.ravel()))
    elif fmt == TUM:
        q = Rotation.from_matrix(traj.rotations).as_quat()
        for t, p, qi in zip(traj.timestamps, traj.positions, q):
            lines.append(" ".join(f"{v:.17g}" for v in (t, *p, *qi)))
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def match_trajectories(est: Trajectory, gt: Trajectory, by_time=False, tol=1e-6):
    """Pair poses by order when lengths agree, else (``by_time``) by equal timestamps.

    Returns the matched ``(est, gt)`` or None when they cannot be paired.
    """
    if len(est) == len(gt):
        return est, gt
    if not by_time:
        return None
    j = np.searchsorted(gt.timestamps, est.timestamps)
    j = np.clip(j, 0, len(gt) - 1)
    near = np.abs(gt.timestamps[j] - est.timestamps) <= tol
    left = np.clip(j - 1, 0, len(gt) - 1)
    near_left = np.abs(gt.timestamps[left] - est.timestamps) <= tol
    j = np.where(near, j, left)
    ok = near | near_left
    if ok.sum() < 2:
        return None
    i = np.flatnonzero(ok)
    j = j[ok]
    return (Trajectory(est.timestamps[i], est.positions[i], est.rotations[i]),
            Trajectory(gt.timestamps[j], gt.positions[j], gt.rotations[j]))


# ---------------------------------------------------------------------------
# key = value config files
# ---------------------------------------------------------------------------

def _parse_value(raw, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is tuple:
        parts = raw.replace(",", " ").split()
        if not parts:
            raise ValueError("empty list")
        return tuple(float(p) for p in parts)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_config(text, schema: dict, source="<config>"):
    """Parse ``key = value`` lines against ``schema`` (key -> type).

    ``#`` starts a comment.  Unknown or repeated keys and unparsable values
    raise FormatError carrying the line number.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise FormatError(f"{source}: expected 'key = value'", line=lineno)
        if key not in schema:
            raise FormatError(f"{source}: unknown key {key!r}", line=lineno)
        if key in out:
            raise FormatError(f"{source}: duplicate key {key!r}", line=lineno)
        try:
            out[key] = _parse_value(raw, schema[key])
        except ValueError as e:
            raise FormatError(f"{source}: bad value for {key}: {e}", line=lineno) from None
    return out


def read_config(path, schema: dict):
    return parse_config(Path(path).read_text(), schema, source=str(path))


def format_config(values: dict):
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return " ".join(f"{x:.17g}" if isinstance(x, float) else str(x) for x in v)
        if isinstance(v, float):
            return f"{v:.17g}"
        return str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in values.items())


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

_INTRINSICS_KEYS = {"fx": float, "fy": float, "ox": float, "oy": float,
                    "width": int, "height": int}


def flow_name(i):
    return f"{i:06d}.uvfl"


def write_dataset(out_dir, ds, meta: dict):
    """``meta`` text (config echo plus intrinsics), ``motions.txt`` and per-sample files."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    k = ds.intrinsics
    meta = dict(meta, count=len(ds), fx=k.fx, fy=k.fy, ox=k.ox, oy=k.oy,
                width=k.width, height=k.height)
    (out / "meta").write_text(format_config(meta))
    np.savetxt(out / "motions.txt", ds.motions, fmt="%.17g")
    files = [out / "meta", out / "motions.txt"]
    for i in range(len(ds)):
        f = out / flow_name(i)
        write_flow(f, ds.flows[i])
        write_mask(f.with_suffix(".msk"), ds.masks[i])
        files += [f, f.with_suffix(".msk")]
    return files


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns ``(FlowDataset, meta dict)``."""
    from .trainer import FlowDataset

    root = Path(path)
    text = (root / "meta").read_text()
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        key, sep, raw = line.partition("=")
        if not sep:
            raise FormatError(f"{root / 'meta'}: expected 'key = value'", line=lineno)
        meta[key.strip()] = raw.strip()
    try:
        k = CameraIntrinsics(**{key: kind(meta[key]) for key, kind in _INTRINSICS_KEYS.items()})
        n = int(meta["count"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"{root / 'meta'}: {e}") from None
    motions = np.loadtxt(root / "motions.txt", ndmin=2)
    if motions.shape != (n, 6):
        raise FormatError(f"{root / 'motions.txt'}: expected {n} rows of 6 numbers")
    flows = np.empty((n, k.height, k.width, 2), dtype=np.float32)
    masks = np.empty((n, k.height, k.width), dtype=bool)
    for i in range(n):
        f = root / flow_name(i)
        flows[i] = read_flow(f)
        masks[i] = read_mask(f.with_suffix(".msk"))
    return FlowDataset(flows, masks, motions, k), meta
