"""Small convolutional pose regressor with a hand-written backward pass.

Layout is NHWC throughout.  The network is a stack of 3x3 stride-2 conv +
ReLU stages, a flatten, and two separate fully connected heads producing
the translation and the rotation.  Only the ops used here are differentiated.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, NonFinite, ShapeMismatch
from .geometry import RelativeMotion

CHECKPOINT_MAGIC = b"FVONET01"


@dataclass(frozen=True)
class PoseNetConfig:
    width: int = 64
    height: int = 48
    in_channels: int = 4
    stages: tuple = (8, 16, 32, 48)
    head_widths: tuple = (128, 32)
    flow_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.in_channels not in (2, 4):
            raise ValueError("in_channels must be 2 (flow) or 4 (flow + IL)")
        if len(self.stages) < 1:
            raise ValueError("at least one conv stage is required")
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        object.__setattr__(self, "head_widths", tuple(int(s) for s in self.head_widths))

    def feature_shape(self):
        h, w = self.height, self.width
        for _ in self.stages:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w, self.stages[-1]


def _conv_out(n):
    return (n - 1) // 2 + 1


def _im2col(x):
    """(B, H, W, C) -> (B, Ho, Wo, 3, 3, C) view of the zero-padded input."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    B, H, W, C = x.shape
    Ho, Wo = _conv_out(H), _conv_out(W)
    sb, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (B, Ho, Wo, 3, 3, C), (sb, 2 * sh, 2 * sw, sh, sw, sc), writeable=False)


def _col2im(dcols, shape):
    B, H, W, C = shape
    Ho, Wo = dcols.shape[1:3]
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:H + 1, 1:W + 1, :]


class PoseNet:
    """Parameters live in ``self.params`` (name -> float64 array), in declaration order."""

    def __init__(self, config: PoseNetConfig = PoseNetConfig(), dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = self._init_params()

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        params = {}

        def uniform(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        cin = cfg.in_channels
        for i, cout in enumerate(cfg.stages):
            params[f"conv{i}.w"] = uniform((3, 3, cin, cout), 9 * cin)
            params[f"conv{i}.b"] = np.zeros(cout)
            cin = cout
        flat = int(np.prod(cfg.feature_shape()))
        for head in ("trans", "rot"):
            fan = flat
            for j, width in enumerate(cfg.head_widths):
                params[f"{head}.fc{j}.w"] = uniform((fan, width), fan)
                params[f"{head}.fc{j}.b"] = np.zeros(width)
                fan = width
            j = len(cfg.head_widths)
            # zero output layer: an untrained net predicts zero motion
            params[f"{head}.fc{j}.w"] = np.zeros((fan, 3))
            params[f"{head}.fc{j}.b"] = np.zeros(3)
        return params

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        other = PoseNet.__new__(PoseNet)
        other.config = self.config
        other.dtype = self.dtype
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _check_input(self, x):
        cfg = self.config
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
            raise ShapeMismatch(
                f"input {x.shape[1:]} does not match "
                f"({cfg.height}, {cfg.width}, {cfg.in_channels})")
        return x

    def forward(self, x, keep=False):
        """Raw (translation, rotation) outputs, each (B, 3).

        ``x`` is (B, H, W, C) with channels [du, dv] or [du, dv, kx, ky];
        flow channels are multiplied by ``config.flow_scale`` internally.
        With ``keep=True`` a cache for :meth:`backward` is returned as well.
        """
        x = self._check_input(x).astype(self.dtype, copy=True)
        x[..., :2] *= self.config.flow_scale
        p = {k: v.astype(self.dtype, copy=False) for k, v in self.params.items()}
        cache = {"shapes": [], "cols": [], "acts": []}
        h = x
        for i in range(len(self.config.stages)):
            cols = _im2col(h)
            B, Ho, Wo = cols.shape[:3]
            cols2 = cols.reshape(B * Ho * Wo, -1)
            w = p[f"conv{i}.w"]
            z = cols2 @ w.reshape(-1, w.shape[-1]) + p[f"conv{i}.b"]
            cache["shapes"].append(h.shape)
            cache["cols"].append(cols2)
            h = np.maximum(z, 0).reshape(B, Ho, Wo, -1)
            cache["acts"].append(h)
        feat = h.reshape(h.shape[0], -1)
        cache["feat"] = feat
        out = []
        for head in ("trans", "rot"):
            a = feat
            layers = []
            n = len(self.config.head_widths)
            for j in range(n + 1):
                layers.append(a)
                a = a @ p[f"{head}.fc{j}.w"] + p[f"{head}.fc{j}.b"]
                if j < n:
                    a = np.maximum(a, 0)
            cache[head] = layers
            out.append(a.astype(np.float64))
        if keep:
            return out[0], out[1], cache
        return out[0], out[1]

    def backward(self, cache, d_translation, d_rotation):
        """Gradients of a scalar loss given its gradients wrt both head outputs."""
        p = {k: v.astype(self.dtype, copy=False) for k, v in self.params.items()}
        grads = {}
        d_feat = 0
        n = len(self.config.head_widths)
        for head, g in (("trans", d_translation), ("rot", d_rotation)):
            g = np.asarray(g, dtype=self.dtype).reshape(-1, 3)
            layers = cache[head]
            for j in range(n, -1, -1):
                a = layers[j]
                grads[f"{head}.fc{j}.w"] = a.T @ g
                grads[f"{head}.fc{j}.b"] = g.sum(axis=0)
                g = g @ p[f"{head}.fc{j}.w"].T
                if j > 0:
                    g = g * (a > 0)
            d_feat = d_feat + g
        acts = cache["acts"]
        g = np.asarray(d_feat).reshape(acts[-1].shape)
        for i in range(len(self.config.stages) - 1, -1, -1):
            g = g * (acts[i] > 0)
            B, Ho, Wo, cout = g.shape
            g2 = g.reshape(-1, cout)
            w = p[f"conv{i}.w"]
            grads[f"conv{i}.w"] = (cache["cols"][i].T @ g2).reshape(w.shape)
            grads[f"conv{i}.b"] = g2.sum(axis=0)
            if i > 0:
                dcols = (g2 @ w.reshape(-1, cout).T).reshape(B, Ho, Wo, 3, 3, -1)
                g = _col2im(dcols, cache["shapes"][i])
        return {k: grads[k].astype(np.float64) for k in self.params}


def canonicalize_output(t, r) -> RelativeMotion:
    """Turn raw head outputs into a RelativeMotion, wrapping |r| into [0, pi)."""
    t = np.asarray(t, dtype=float).reshape(3)
    r = np.asarray(r, dtype=float).reshape(3)
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r))):
        raise NonFinite("network output is not finite")
    theta = float(np.linalg.norm(r))
    if theta >= np.pi:
        wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
        r = r / theta * wrapped
    return RelativeMotion(t, r)


def _write_tensors(fh, magic, header, arrays):
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(magic)
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_tensors(fh, magic):
    if fh.read(len(magic)) != magic:
        raise FormatError("bad checkpoint magic")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode())
    return header, fh.read()


def save_checkpoint(path, net: PoseNet, extra_header=None, extra_arrays=()):
    """Magic, u32 header length, JSON config echo, then little-endian f64 tensors."""
    header = {"config": asdict(net.config),
              "params": [[k, list(v.shape)] for k, v in net.params.items()],
              "extra": extra_header or {}}
    buf = io.BytesIO()
    _write_tensors(buf, CHECKPOINT_MAGIC, header, list(net.params.values()) + list(extra_arrays))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype=np.float32):
    """Returns (net, extra_header, remaining flat f64 payload)."""
    with open(path, "rb") as fh:
        header, payload = _read_tensors(fh, CHECKPOINT_MAGIC)
    flat = np.frombuffer(payload, dtype="<f8")
    net = PoseNet(PoseNetConfig(**header["config"]), dtype=dtype)
    offset = 0
    for name, shape in header["params"]:
        size = int(np.prod(shape))
        if name not in net.params or offset + size > flat.size:
            raise FormatError(f"checkpoint tensor {name} is inconsistent")
        net.params[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    return net, header["extra"], flat[offset:].astype(np.float64)
