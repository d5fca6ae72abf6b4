"""Pose error metrics (mm): MPJPE, N-MPJPE and Procrustes-aligned PA-MPJPE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, ValidationError

# relative singular-value threshold below which a point set counts as collinear
_RANK_TOL = 1e-9


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.shape[-1] != 3:
        raise ValidationError(f"pose shapes differ or are not (..., J, 3): {p.shape} vs {q.shape}")
    return p, q


def mpjpe(p, q):
    """Mean per-joint Euclidean distance. Works on ``(J, 3)`` or batched ``(..., J, 3)``."""
    p, q = _pair(p, q)
    return np.linalg.norm(p - q, axis=-1).mean(axis=-1)


def optimal_scale(pred, gt):
    """Least-squares scale s minimising sum_j ||s * pred_j - gt_j||^2."""
    pred, gt = _pair(pred, gt)
    denom = np.sum(pred * pred, axis=(-2, -1))
    if np.any(denom == 0.0):
        raise DegenerateGeometryError("scale undefined for an all-zero prediction")
    return np.sum(pred * gt, axis=(-2, -1)) / denom


def n_mpjpe(pred, gt):
    s = optimal_scale(pred, gt)
    pred, gt = _pair(pred, gt)
    return mpjpe(np.asarray(s)[..., None, None] * pred, gt)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def _check_spread(centered, name):
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[..., 0].min() == 0.0 or np.any(sv[..., 1] <= _RANK_TOL * sv[..., 0]):
        raise DegenerateGeometryError(f"{name} joints are coincident or collinear")


def _umeyama(pred, gt, check=True):
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    x = pred - mu_p
    y = gt - mu_g
    if check:
        _check_spread(x, "pred")
        _check_spread(y, "gt")
    cov = np.swapaxes(y, -1, -2) @ x  # sum_j y_j x_j^T
    U, S, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    d = np.where(d == 0, 1.0, d)
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    S = S.copy()
    S[..., 2] *= d
    R = U @ Vt
    scale = S.sum(axis=-1) / np.sum(x * x, axis=(-2, -1))
    t = mu_g[..., 0, :] - scale[..., None] * (mu_p @ np.swapaxes(R, -1, -2))[..., 0, :]
    return scale, R, t


def procrustes(pred, gt) -> SimilarityTransform:
    """Similarity (s, R, t) minimising sum_j ||s R pred_j + t - gt_j||^2, det R = +1."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2:
        raise ValidationError("procrustes expects a single (J, 3) pose pair")
    s, R, t = _umeyama(pred, gt)
    return SimilarityTransform(float(s), R, t)


def pa_mpjpe(pred, gt, check=True):
    """MPJPE after aligning ``pred`` onto ``gt``. Batched over leading axes."""
    pred, gt = _pair(pred, gt)
    s, R, t = _umeyama(pred, gt, check=check)
    aligned = s[..., None, None] * (pred @ np.swapaxes(R, -1, -2)) + t[..., None, :]
    return mpjpe(aligned, gt)
