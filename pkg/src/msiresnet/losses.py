"""Binary cross entropy on sigmoid probabilities."""

import numpy as np

from .errors import InvalidLabelError, ShapeError

PROB_CLAMP = 1e-12


def _check(prob, label):
    prob = np.asarray(prob, dtype=float)
    label = np.asarray(label, dtype=prob.dtype)
    if label.size != prob.size:
        raise ShapeError(f"{label.size} labels for probabilities of shape {prob.shape}")
    label = label.reshape(prob.shape)
    if not np.all((label == 0) | (label == 1)):
        bad = np.flatnonzero((label != 0) & (label != 1))[0]
        raise InvalidLabelError(f"label at position {bad} is {label.reshape(-1)[bad]}, expected 0 or 1")
    if prob.size == 0:
        raise ShapeError("empty batch")
    return prob, label


def bce_loss(prob, label):
    """Mean of ``-[y ln p + (1-y) ln(1-p)]`` with ``p`` clamped away from 0 and 1."""
    prob, label = _check(prob, label)
    p = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(label * np.log(p) + (1.0 - label) * np.log1p(-p)))


def bce_grad(prob, label):
    """d(bce_loss)/d(prob) = (p - y) / (p (1 - p)) / N, on the clamped ``p``."""
    prob, label = _check(prob, label)
    p = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (p - label) / (p * (1.0 - p)) / prob.size


def bce_objective(label):
    """Loss callable for :func:`msiresnet.autograd.grad_check`."""
    return lambda prob: (bce_loss(prob, label), bce_grad(prob, label))
