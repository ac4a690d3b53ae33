"""Scaled-cosine classifier with additive cosine margin.

Logits are ``s * cos(theta_j)``; the discriminative loss subtracts ``m``
from the target cosine before scaling, the generalization loss does not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InputError, ShapeError

DEFAULT_SCALE = 16.0
DEFAULT_MARGIN = 0.2

DISCRIMINATIVE = "discriminative"
GENERALIZATION = "generalization"


@dataclass
class CosineClassifier:
    W: np.ndarray  # (d, C), one column per class
    s: float = DEFAULT_SCALE
    m: float = DEFAULT_MARGIN

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[1] < 2:
            raise ShapeError(f"classifier needs a (d, C>=2) weight matrix, got {self.W.shape}")
        if self.s <= 0 or self.m < 0:
            raise InputError(f"need s > 0 and m >= 0, got s={self.s}, m={self.m}")

    @property
    def num_classes(self):
        return self.W.shape[1]

    def copy(self):
        return CosineClassifier(self.W.copy(), self.s, self.m)


def _norms(F, W):
    fn = np.linalg.norm(F, axis=1)
    wn = np.linalg.norm(W, axis=0)
    bad = np.flatnonzero(fn == 0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm feature at row {int(bad[0])}")
    bad = np.flatnonzero(wn == 0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm classifier column {int(bad[0])}")
    return fn, wn


def cosine_matrix(F, W):
    """Row-by-column cosines, shape ``(B, C)``."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    if F.shape[1] != W.shape[0]:
        raise ShapeError(f"feature dim {F.shape[1]} != classifier dim {W.shape[0]}")
    fn, wn = _norms(F, W)
    return (F / fn[:, None]) @ (W / wn[None, :])


def cosine_logits(f, clf):
    return clf.s * cosine_matrix(f, clf.W)[0]


def predict(F, W):
    """Argmax cosine; the margin is a training-only penalty and never enters here."""
    return np.argmax(cosine_matrix(F, W), axis=1)


def per_sample_losses(F, W, y, s, m):
    """Per-row losses and exact gradients.

    Returns ``(losses (B,), dF (B, d), dW (d, C))``: ``dF[i]`` is the gradient
    of ``losses[i]`` alone, ``dW`` is summed over rows.
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B, C = F.shape[0], W.shape[1]
    if y.shape[0] != B:
        raise ShapeError(f"{B} feature rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= C):
        raise InputError(f"labels must lie in [0, {C})")
    if F.shape[1] != W.shape[0]:
        raise ShapeError(f"feature dim {F.shape[1]} != classifier dim {W.shape[0]}")

    fnorm, wnorm = _norms(F, W)
    fhat = F / fnorm[:, None]
    what = W / wnorm[None, :]
    cos = fhat @ what
    rows = np.arange(B)

    z = s * cos
    z[rows, y] -= s * m
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sumez = ez.sum(axis=1, keepdims=True)
    losses = (np.log(sumez[:, 0]) + zmax[:, 0]) - z[rows, y]

    dz = ez / sumez
    dz[rows, y] -= 1.0
    dcos = s * dz  # (B, C)

    # d cos_ij / d f_i = (what_j - cos_ij fhat_i) / |f_i|
    dF = (dcos @ what.T - (dcos * cos).sum(axis=1, keepdims=True) * fhat) / fnorm[:, None]
    # d cos_ij / d w_j = (fhat_i - cos_ij what_j) / |w_j|
    dW = (fhat.T @ dcos - what * (dcos * cos).sum(axis=0, keepdims=True)) / wnorm[None, :]
    return losses, dF, dW


def _loss(f, clf, y, m):
    f = np.asarray(f, dtype=np.float64)
    losses, dF, dW = per_sample_losses(f[None, :], clf.W, [y], clf.s, m)
    return float(losses[0]), dF[0], dW


def loss_discriminative(f, clf, y):
    """Margin-penalized loss; returns ``(loss, grad_f, grad_W)``."""
    return _loss(f, clf, y, clf.m)


def loss_generalization(f, clf, y):
    """Plain cosine-softmax cross-entropy; returns ``(loss, grad_f, grad_W)``."""
    return _loss(f, clf, y, 0.0)


def batch_loss(features, labels, clf, kind):
    """Mean loss over rows with gradients of the mean.

    Returns ``(loss, grad_features (B, d), grad_W (d, C))``.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    if features.shape[0] == 0 or labels.size == 0:
        raise InputError("empty batch")
    if kind == DISCRIMINATIVE:
        m = clf.m
    elif kind == GENERALIZATION:
        m = 0.0
    else:
        raise InputError(f"unknown loss kind {kind!r}")
    losses, dF, dW = per_sample_losses(features, clf.W, labels, clf.s, m)
    B = features.shape[0]
    return float(losses.sum() / B), dF / B, dW / B
