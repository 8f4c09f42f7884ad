"""Intrinsics layer and random crop-and-resize of flow samples.

Pixel indices are cell-centred at integer coordinates.  Cropping the rect
``(x0, y0, w, h)`` and resizing it to ``(W, H)`` maps output pixel ``u'`` to
source position ``x0 + u' * w / W``; under that map the effective camera is
``fx' = fx * W / w`` and ``ox' = (ox - x0) * W / w`` (same for y).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Infeasible, InvalidCrop
from .geometry import CameraIntrinsics
from .synthgen import FlowField, Sample

MAX_RESIZE = 2.5
_TOL = 1e-9


@dataclass(frozen=True)
class ILGrid:
    kx: np.ndarray
    ky: np.ndarray

    @property
    def width(self):
        return self.kx.shape[1]

    @property
    def height(self):
        return self.kx.shape[0]

    def stacked(self):
        """(H, W, 2) array, channel order (kx, ky)."""
        return np.stack([self.kx, self.ky], axis=-1)


def make_il(k: CameraIntrinsics) -> ILGrid:
    x = (np.arange(k.width, dtype=float) - k.ox) / k.fx
    y = (np.arange(k.height, dtype=float) - k.oy) / k.fy
    kx = np.broadcast_to(x, (k.height, k.width)).copy()
    ky = np.broadcast_to(y[:, None], (k.height, k.width)).copy()
    return ILGrid(kx, ky)


@dataclass(frozen=True)
class CropResizeParams:
    x0: float
    y0: float
    w: float
    h: float
    out_width: int
    out_height: int

    @property
    def factors(self):
        return self.out_width / self.w, self.out_height / self.h

    def validate(self, width, height):
        if self.w <= 0 or self.h <= 0:
            raise InvalidCrop(f"empty crop {self}")
        if (self.x0 < -_TOL or self.y0 < -_TOL
                or self.x0 + self.w > width + _TOL or self.y0 + self.h > height + _TOL):
            raise InvalidCrop(f"crop {self} exits the {width}x{height} source")
        for f in self.factors:
            if not 1.0 - _TOL <= f <= MAX_RESIZE + _TOL:
                raise InvalidCrop(f"resize factor {f} outside [1, {MAX_RESIZE}]")

    def effective_intrinsics(self, k: CameraIntrinsics) -> CameraIntrinsics:
        sx, sy = self.factors
        return CameraIntrinsics(k.fx * sx, k.fy * sy, (k.ox - self.x0) * sx,
                                (k.oy - self.y0) * sy, self.out_width, self.out_height)


def _source_coords(params: CropResizeParams):
    xs = params.x0 + np.arange(params.out_width) * (params.w / params.out_width)
    ys = params.y0 + np.arange(params.out_height) * (params.h / params.out_height)
    return xs, ys


def _linear_weights(coords, size):
    # the left index is clamped so samples past the last centre extrapolate
    # linearly instead of flattening; affine fields are reproduced exactly
    i0 = np.clip(np.floor(coords).astype(int), 0, max(size - 2, 0))
    a = coords - i0
    return i0, np.minimum(i0 + 1, size - 1), a


def resample_bilinear(arr, params: CropResizeParams):
    """Resample an (H, W, ...) array onto the output grid of ``params``."""
    xs, ys = _source_coords(params)
    x0, x1, ax = _linear_weights(xs, arr.shape[1])
    y0, y1, ay = _linear_weights(ys, arr.shape[0])
    extra = (None,) * (arr.ndim - 2)
    ax = ax[(None, slice(None)) + extra]
    ay = ay[(slice(None), None) + extra]
    top = (1.0 - ax) * arr[y0][:, x0] + ax * arr[y0][:, x1]
    bottom = (1.0 - ax) * arr[y1][:, x0] + ax * arr[y1][:, x1]
    return (1.0 - ay) * top + ay * bottom


def _batch_weights(params_list, width, height):
    xs, ys = zip(*(_source_coords(p) for p in params_list))
    return _linear_weights(np.stack(xs), width), _linear_weights(np.stack(ys), height)


def crop_resize_batch(flows, masks, ils, params_list):
    """Batched :func:`rcr` on stacked arrays.

    ``flows`` and ``ils`` are (B, H, W, 2), ``masks`` (B, H, W); every
    ``params_list`` entry must share one output size.  Returns new arrays.
    """
    B, H, W = masks.shape
    (x0, x1, ax), (y0, y1, ay) = _batch_weights(params_list, W, H)
    # channels first keeps the broadcast inner loop along W
    data = np.ascontiguousarray(np.concatenate([flows, ils], axis=-1).reshape(B * H * W, -1).T)
    rows = np.arange(B)[:, None, None] * H

    def gather(yi, xi):
        flat = ((rows + yi[:, :, None]) * W + xi[:, None, :]).ravel()
        return np.take(data, flat, axis=1).reshape(-1, B, H, W)

    wx = ax[:, None, :].astype(data.dtype)
    wy = ay[:, :, None].astype(data.dtype)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    factors = np.array([p.factors for p in params_list], dtype=data.dtype)
    out[0] *= factors[:, 0, None, None]
    out[1] *= factors[:, 1, None, None]
    out = np.moveaxis(out, 0, -1)
    xs, ys = zip(*(_source_coords(p) for p in params_list))
    xi = np.clip(np.floor(np.stack(xs) + 0.5).astype(int), 0, W - 1)
    yi = np.clip(np.floor(np.stack(ys) + 0.5).astype(int), 0, H - 1)
    flat = ((rows + yi[:, :, None]) * W + xi[:, None, :]).ravel()
    mask_out = np.take(masks.reshape(-1), flat).reshape(B, H, W)
    return np.ascontiguousarray(out[..., :2]), mask_out, np.ascontiguousarray(out[..., 2:])


def resample_nearest(arr, params: CropResizeParams):
    xs, ys = _source_coords(params)
    xi = np.clip(np.floor(xs + 0.5).astype(int), 0, arr.shape[1] - 1)
    yi = np.clip(np.floor(ys + 0.5).astype(int), 0, arr.shape[0] - 1)
    return arr[yi][:, xi]


def sample_rcr_params(k: CameraIntrinsics, seed, fov_range=(40.0, 90.0),
                      max_factor=MAX_RESIZE) -> CropResizeParams:
    """Random crop whose resized output has a horizontal FoV inside ``fov_range``.

    The target FoV is drawn uniformly from the part of ``fov_range`` reachable
    with resize factors in [1, max_factor]; both axes share the factor so the
    pixel aspect is kept.  The crop position is uniform over the frame.
    ``seed`` may also be a ``numpy.random.Generator``, which is consumed.
    """
    lo, hi = fov_range
    if not 0.0 < lo <= hi < 120.0:
        raise ValueError(f"fov range {fov_range} must lie within (0, 120) degrees")
    fov_of = lambda w: np.degrees(2.0 * np.arctan(w / (2.0 * k.fx)))  # noqa: E731
    reach_lo, reach_hi = fov_of(k.width / max_factor), fov_of(k.width)
    a, b = max(lo, reach_lo), min(hi, reach_hi)
    if a > b + 1e-9:
        raise Infeasible(f"FoV range {fov_range} unreachable; factors up to "
                         f"{max_factor} give [{reach_lo:.2f}, {reach_hi:.2f}] degrees")
    rng = np.random.default_rng(seed)
    fov = rng.uniform(a, b) if b > a else a
    w = 2.0 * k.fx * np.tan(np.radians(fov) / 2.0)
    factor = min(max(k.width / w, 1.0), max_factor)
    w = k.width / factor
    h = k.height / factor
    x0 = rng.uniform(0.0, k.width - w) if k.width > w else 0.0
    y0 = rng.uniform(0.0, k.height - h) if k.height > h else 0.0
    return CropResizeParams(x0, y0, w, h, k.width, k.height)


def rcr(sample: Sample, il: ILGrid, params: CropResizeParams | None = None, seed=None):
    """Crop and resize a sample together with its intrinsics layer.

    When ``params`` is None they are drawn with :func:`sample_rcr_params`
    from ``seed``.  Returns the transformed sample, carrying the effective
    intrinsics, and the transformed intrinsics layer.
    """
    k = sample.intrinsics
    if params is None:
        params = sample_rcr_params(k, seed)
    params.validate(k.width, k.height)
    sx, sy = params.factors
    flow = resample_bilinear(sample.flow.data, params)
    flow[..., 0] *= sx
    flow[..., 1] *= sy
    mask = resample_nearest(sample.valid_mask, params)
    il_out = resample_bilinear(il.stacked(), params)
    out = Sample(FlowField(flow), sample.motion, params.effective_intrinsics(k), mask)
    return out, ILGrid(il_out[..., 0], il_out[..., 1])
