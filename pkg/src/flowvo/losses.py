"""Flow and camera-motion training objectives with analytic gradients.

Motion losses accept single motions as 3-vectors or batches as (B, 3)
arrays; per-sample values come back with the matching leading shape.
Rotation error is the Euclidean distance between so(3) vectors.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask

EPS = 1e-6
DEFAULT_LAMBDA = 0.1


class Variant(str, enum.Enum):
    FULL = "full"
    COS = "cos"
    COS_PRINTED = "cos-printed"
    NORM = "norm"


@dataclass(frozen=True)
class LossValue:
    total: float
    translation_term: float
    rotation_term: float
    flow_term: float = 0.0

    @property
    def pose(self):
        return self.translation_term + self.rotation_term


@dataclass(frozen=True)
class MotionTerms:
    """Per-sample loss terms and their gradients wrt the predictions."""

    translation: np.ndarray
    rotation: np.ndarray
    d_translation: np.ndarray
    d_rotation: np.ndarray

    @property
    def value(self):
        return self.translation + self.rotation


def _norm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


def _distance(pred, label):
    diff = pred - label
    n = _norm(diff)
    safe = np.where(n > 0, n, 1.0)[..., None]
    return n, np.where(n[..., None] > 0, diff / safe, 0.0)


def flow_loss(pred, label, mask):
    """Mean per-pixel L1 flow error over the valid pixels, with its gradient."""
    pred = np.asarray(getattr(pred, "data", pred), dtype=float)
    label = np.asarray(getattr(label, "data", label), dtype=float)
    if pred.shape != label.shape or pred.shape[:-1] != np.shape(mask):
        raise ValueError("flow and mask shapes disagree")
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no valid pixel")
    diff = (pred - label) * mask[..., None]
    value = float(np.abs(diff).sum() / count)
    return value, np.sign(diff) / count


def _translation_cos(t_pred, t, printed=False):
    nt_pred = _norm(t_pred)
    nt = _norm(t)
    prod = nt_pred * nt
    denom = np.maximum(prod, EPS)
    dot = np.sum(t_pred * t, axis=-1)
    cos = dot / denom
    active = (prod > EPS)[..., None]
    safe = np.where(prod > 0, nt_pred, 1.0)[..., None]
    d_cos = t / denom[..., None] - np.where(
        active, dot[..., None] * t_pred / (safe * safe * denom[..., None]), 0.0)
    if printed:
        return cos, d_cos
    return 1.0 - cos, -d_cos


def _unit_guarded(v):
    n = _norm(v)
    d = np.maximum(n, EPS)[..., None]
    u = v / d
    return u, n, d


def _translation_norm(t_pred, t):
    u, n, d = _unit_guarded(t_pred)
    w, _, _ = _unit_guarded(t)
    value, g = _distance(u, w)
    # Jacobian of v / max(|v|, eps): (I - u u^T) / |v| above eps, I / eps below
    above = (n > EPS)[..., None]
    proj = g - np.where(above, np.sum(g * u, axis=-1, keepdims=True) * u, 0.0)
    return value, proj / d


def motion_terms(variant, t_pred, r_pred, t, r) -> MotionTerms:
    variant = Variant(variant)
    t_pred, r_pred, t, r = (np.asarray(a, dtype=float) for a in (t_pred, r_pred, t, r))
    if variant is Variant.FULL:
        trans, d_t = _distance(t_pred, t)
    elif variant is Variant.NORM:
        trans, d_t = _translation_norm(t_pred, t)
    else:
        trans, d_t = _translation_cos(t_pred, t, printed=variant is Variant.COS_PRINTED)
    rot, d_r = _distance(r_pred, r)
    return MotionTerms(trans, rot, d_t, d_r)


def _as_arrays(motion):
    if hasattr(motion, "t"):
        return motion.t, motion.r
    v = np.asarray(motion, dtype=float)
    return v[..., :3], v[..., 3:]


def _single(variant, pred, label):
    tp, rp = _as_arrays(pred)
    t, r = _as_arrays(label)
    m = motion_terms(variant, tp, rp, t, r)
    return m.value, m.d_translation, m.d_rotation


def motion_loss_full(pred, label):
    """|t_hat - t| + |r_hat - r|; returns (value, d/dt_hat, d/dr_hat)."""
    return _single(Variant.FULL, pred, label)


def motion_loss_cos(pred, label, printed=False):
    """1 - cos(t_hat, t) + |r_hat - r|.

    ``printed=True`` uses +cos instead of 1 - cos; that form is minimised by
    an anti-parallel translation and is kept only for reproduction runs.
    """
    return _single(Variant.COS_PRINTED if printed else Variant.COS, pred, label)


def motion_loss_norm(pred, label):
    """|t_hat/|t_hat| - t/|t|| + |r_hat - r| with the eps guard on both norms."""
    return _single(Variant.NORM, pred, label)


@dataclass(frozen=True)
class LossGradients:
    flow: np.ndarray | None
    translation: np.ndarray
    rotation: np.ndarray


def total_loss(flow_pred, flow_label, mask, t_pred, r_pred, t, r,
               lam=DEFAULT_LAMBDA, variant=Variant.NORM):
    """lam * flow loss + motion loss, averaged over the batch.

    Flow arguments may be None to skip the flow term.  Gradients are those
    of the returned batch-mean total.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    terms = motion_terms(variant, t_pred, r_pred, t, r)
    trans = np.atleast_1d(terms.translation)
    rot = np.atleast_1d(terms.rotation)
    n = trans.shape[0]
    flow_term, d_flow = 0.0, None
    if flow_pred is not None:
        flow_term, d_flow = flow_loss(flow_pred, flow_label, mask)
        d_flow = lam * d_flow
    tt = float(trans.mean())
    rt = float(rot.mean())
    value = LossValue(lam * flow_term + tt + rt, tt, rt, flow_term)
    grads = LossGradients(d_flow, terms.d_translation / n, terms.d_rotation / n)
    return value, grads
