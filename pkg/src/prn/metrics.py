"""Reconstruction error metrics."""

import numpy as np

from .errors import DimensionMismatch, ZeroGroundTruth


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] != 3:
        raise DimensionMismatch(f"pred {pred.shape} and gt {gt.shape} must both be (3, n_p)")
    return pred, gt


def mpjpe(pred, gt):
    """Mean Euclidean distance between corresponding points."""
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=0)))


def normalized_error(pred, gt):
    """``||pred - gt||_F / ||gt||_F``."""
    pred, gt = _pair(pred, gt)
    denom = np.linalg.norm(gt)
    if denom == 0.0:
        raise ZeroGroundTruth("ground truth shape is all zeros")
    return float(np.linalg.norm(pred - gt) / denom)


def reflect(shape):
    """Negate depth; the orthographic projection cannot tell the two apart."""
    out = np.array(shape, dtype=float)
    out[2] *= -1.0
    return out


def eval_with_reflection(pred, gt, metric):
    """Return ``(value, reflected)`` for the better of ``pred`` and its depth mirror."""
    plain = metric(pred, gt)
    mirrored = metric(reflect(pred), gt)
    if mirrored < plain:
        return mirrored, True
    return plain, False
