"""Class activation maps and unified per-block activation maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

EPS = 1e-8


@dataclass
class ActivationMap:
    A: np.ndarray
    cam: np.ndarray
    labels: np.ndarray


@dataclass
class UnifiedActivation:
    O: Tensor
    confidence: Tensor
    block: int


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def class_scores(f_last, theta) -> np.ndarray:
    """Per-position class scores theta^T f(x, y), shape (X, Y, C)."""
    f = _values(f_last)
    th = _values(theta)
    if th.ndim != 2 or f.shape[-1] != th.shape[0]:
        raise ShapeError(f"compute_A: features have {f.shape[-1]} channels, theta is {th.shape}")
    return f @ th


def compute_A(f_last, theta, eps: float = EPS) -> np.ndarray:
    """ReLU of per-class scores divided by each class's global maximum.

    A class whose maximum score is <= ``eps`` yields an all-zero map.
    """
    s = class_scores(f_last, theta)
    peak = s.max(axis=(0, 1))
    ok = peak > eps
    out = np.where(ok, np.maximum(s, 0.0) / np.where(ok, peak, 1.0), 0.0)
    return out


def mask_by_label(A: np.ndarray, labels) -> np.ndarray:
    c = np.asarray(labels)
    if c.ndim != 1 or c.shape[0] != A.shape[-1]:
        raise ShapeError(f"label vector length {c.shape} does not match {A.shape[-1]} classes")
    return A * (c != 0).astype(A.dtype)


def activation_map(f_last, theta, labels) -> ActivationMap:
    A = compute_A(f_last, theta)
    return ActivationMap(A, mask_by_label(A, labels), np.asarray(labels))


def unify_channels(f_n: Tensor, proj: Tensor, eps: float = EPS) -> Tensor:
    """1x1 projection of ``relu(f_n / max f_n)`` to the unified width.

    The max runs over all positions and channels.  Differentiable in both
    ``f_n`` (including through the max) and ``proj``.
    """
    if proj.ndim != 4 or proj.shape[:2] != (1, 1) or proj.shape[2] != f_n.shape[-1]:
        raise ShapeError(f"unify_channels: projection {proj.shape} does not fit features {f_n.shape}")
    peak = T.global_max(f_n)
    if peak.data <= eps:
        normed = T.scale(f_n, 0.0)
    else:
        normed = T.relu(T.div_scalar(f_n, peak))
    return T.conv2d(normed, proj)


def confidence_map(O_n: Tensor) -> Tensor:
    """Per-position maximum over channels, shape (X, Y, 1)."""
    return T.channel_max(O_n)


def unified_activation(f_n: Tensor, proj: Tensor, block: int) -> UnifiedActivation:
    O = unify_channels(f_n, proj)
    return UnifiedActivation(O, confidence_map(O), block)
