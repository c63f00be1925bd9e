"""Pose-regression losses with analytic gradients.

Each loss returns the value and the gradient with respect to the prediction.
Non-differentiable points (zero loss, distance kinks, branch ties) use the
zero subgradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import AnchorTriplet

__all__ = [
    "LossValueGrad",
    "angular_distance",
    "euler_loss",
    "quaternion_loss",
    "anchor_loss",
    "finite_difference_check",
]

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True, eq=False)
class LossValueGrad:
    value: float
    grad: np.ndarray
    heads: tuple = ()


def _wrap(a):
    return (np.asarray(a, dtype=np.float64) + math.pi) % TWO_PI - math.pi


def angular_distance(a, b):
    """Wrap-aware distance ``min(|a-b|, 2pi - |a-b|)``, never above pi."""
    diff = np.abs(_wrap(a) - _wrap(b))
    return np.minimum(diff, TWO_PI - diff)


def euler_loss(pred, target) -> LossValueGrad:
    """Geodesic Euler loss over (alpha, beta, gamma) triples."""
    a = _wrap(pred)
    b = _wrap(target)
    diff = a - b
    d = np.minimum(np.abs(diff), TWO_PI - np.abs(diff))
    value = float(np.sqrt(np.sum(d * d)))
    if value == 0.0:
        return LossValueGrad(0.0, np.zeros(3))
    dd = -np.sign(np.abs(diff) - math.pi) * np.sign(diff)
    return LossValueGrad(value, d / value * dd)


def quaternion_loss(pred, target, tol: float | None = 1e-6) -> LossValueGrad:
    """``min(|q1 - q2|, |q1 + q2|)``; both quaternions must be unit norm within ``tol``."""
    q1 = np.asarray(pred, dtype=np.float64)
    q2 = np.asarray(target, dtype=np.float64)
    if tol is not None:
        for q in (q1, q2):
            if abs(np.linalg.norm(q) - 1.0) > tol:
                raise ValueError("quaternion_loss expects unit quaternions")
    minus = float(np.linalg.norm(q1 - q2))
    plus = float(np.linalg.norm(q1 + q2))
    # ties go to the minus branch
    s, value = (1.0, minus) if minus <= plus else (-1.0, plus)
    if value == 0.0:
        return LossValueGrad(0.0, np.zeros(4))
    return LossValueGrad(value, (q1 - s * q2) / value)


def anchor_loss(pred, target) -> LossValueGrad:
    """Sum over the three anchor heads of ``0.5 * |p_pred - p_gt|^2``.

    ``grad`` is flattened in (pc, pl, pr) order; ``heads`` holds per-head values.
    """
    p = pred.as_array() if isinstance(pred, AnchorTriplet) else np.asarray(pred, dtype=np.float64).reshape(3, 3)
    g = target.as_array() if isinstance(target, AnchorTriplet) else np.asarray(target, dtype=np.float64).reshape(3, 3)
    r = p - g
    heads = tuple(float(0.5 * (row @ row)) for row in r)
    return LossValueGrad(float(sum(heads)), r.ravel().copy(), heads)


def finite_difference_check(loss, point, h: float = 1e-6) -> float:
    """Max relative error of ``loss(x).grad`` against central differences.

    ``loss`` maps a flat parameter vector to :class:`LossValueGrad`.
    """
    x = np.asarray(point, dtype=np.float64).ravel()
    analytic = np.asarray(loss(x).grad, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        numeric = (loss(x + e).value - loss(x - e).value) / (2.0 * h)
        err = abs(numeric - analytic[i]) / max(abs(analytic[i]), 1e-8)
        worst = max(worst, err)
    return worst
