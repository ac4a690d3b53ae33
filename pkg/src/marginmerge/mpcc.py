"""Classifier calibration on balanced real and Gaussian pseudo-feature batches.

Base classes are replayed from two Gaussians sharing the class covariance,
one centred on the class prototype and one on the discriminative
classifier's column. Earlier few-shot classes are replayed around their
prototype with the covariance borrowed from the most cosine-similar base
class. Current-session classes use their real embeddings, repeated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InputError, NumericError, ProtocolError, ShapeError
from .margin_head import per_sample_losses
from .numerics import DEFAULT_PSD_FLOOR, psd_factor, sample_gaussian

ESTIMATED = "estimated"
BORROWED = "borrowed"


@dataclass
class ClassStats:
    prototype: np.ndarray
    covariance: np.ndarray
    source: str = ESTIMATED
    sample_count: int = 0
    borrowed_from: int | None = None


def estimate_base_stats(features_per_class):
    """Mean and biased (divide by N) covariance per class id."""
    stats = {}
    for c in sorted(features_per_class):
        F = np.atleast_2d(np.asarray(features_per_class[c], dtype=np.float64))
        if F.shape[0] == 0:
            raise InputError(f"class {c} has no samples")
        P = F.mean(axis=0)
        X = F - P
        sigma = X.T @ X / F.shape[0]
        sigma = 0.5 * (sigma + sigma.T)
        stats[c] = ClassStats(P, sigma, ESTIMATED, F.shape[0])
    return stats


def most_similar_base(proto, base_stats):
    """Base class id maximizing cosine with ``proto``; lowest id wins ties."""
    proto = np.asarray(proto, dtype=np.float64)
    pn = np.linalg.norm(proto)
    if pn == 0:
        raise DegenerateInputError("zero-norm prototype")
    if not base_stats:
        raise InputError("no base class statistics to borrow from")
    best, best_cos = None, -np.inf
    for c in sorted(base_stats):
        P = base_stats[c].prototype
        n = np.linalg.norm(P)
        if n == 0:
            raise DegenerateInputError(f"zero-norm base prototype for class {c}")
        cos = float(proto @ P) / (pn * n)
        if cos > best_cos:
            best, best_cos = c, cos
    return best


def borrow_covariance(new_proto, base_stats, sample_count=0):
    c = most_similar_base(new_proto, base_stats)
    return ClassStats(
        np.asarray(new_proto, dtype=np.float64).copy(),
        base_stats[c].covariance,
        BORROWED,
        sample_count,
        borrowed_from=c,
    )


@dataclass
class EmbeddingBatch:
    features: np.ndarray  # (rows, d)
    labels: np.ndarray  # class ids
    per_class: int


class ReplayBank:
    """Gaussian statistics and Cholesky factors for every replayed class.

    ``clf_columns`` maps base class id -> the discriminative classifier's
    weight column, used raw as the second Gaussian mean.
    """

    def __init__(self, base_stats, clf_columns, floor=DEFAULT_PSD_FLOOR):
        missing = set(base_stats) - set(clf_columns)
        if missing:
            raise ProtocolError(f"no classifier column for base classes {sorted(missing)}")
        self.base_stats = base_stats
        self.clf_columns = clf_columns
        self.floor = floor
        self.previous = {}  # few-shot class id -> borrowed ClassStats
        self._factors = {}

    def factor(self, c):
        st = self.base_stats.get(c)
        if st is None:
            st = self.previous[c]
            # borrowed covariances share the base class factor
            return self.factor(st.borrowed_from)
        if c not in self._factors:
            self._factors[c] = psd_factor(st.covariance, self.floor)
        return self._factors[c]

    def add_previous(self, class_id, stats):
        self.previous[class_id] = stats


def build_embedding_batch(bank, current_features, per_class, rng, class_ids=None):
    """One balanced batch: ``per_class`` rows for every seen class.

    ``class_ids`` fixes the row-block order (defaults to base, previous,
    current, each sorted). Draws for class ``c`` come from ``rng.substream(c)``.
    """
    if per_class < 1:
        raise InputError("per_class must be positive")
    base_ids = sorted(bank.base_stats)
    prev_ids = sorted(bank.previous)
    cur_ids = sorted(current_features)
    if class_ids is None:
        class_ids = base_ids + prev_ids + cur_ids
    blocks, labels = [], []
    half = per_class // 2
    for c in class_ids:
        sub = rng.substream(c)
        if c in bank.base_stats:
            L = bank.factor(c)
            st = bank.base_stats[c]
            from_proto = sample_gaussian(st.prototype, L, sub.substream("proto"), per_class - half)
            from_clf = sample_gaussian(np.asarray(bank.clf_columns[c], dtype=np.float64), L, sub.substream("clf"), half)
            rows = np.empty((per_class, st.prototype.shape[0]))
            rows[0::2] = from_proto
            rows[1::2] = from_clf
        elif c in bank.previous:
            rows = sample_gaussian(bank.previous[c].prototype, bank.factor(c), sub, per_class)
        elif c in current_features:
            real = np.atleast_2d(np.asarray(current_features[c], dtype=np.float64))
            if real.shape[0] == 0:
                raise InputError(f"no real features for current class {c}")
            rows = real[np.arange(per_class) % real.shape[0]]
        else:
            raise ProtocolError(f"no statistics for seen class {c}")
        blocks.append(rows)
        labels.append(np.full(per_class, c, dtype=np.int64))
    return EmbeddingBatch(np.concatenate(blocks), np.concatenate(labels), per_class)


def calibrate(W_init, class_ids, make_batch, s=16.0, m=0.2, lr=0.001, iters=50):
    """Plain SGD on the margin loss over the classifier weights only.

    ``make_batch(it)`` returns the EmbeddingBatch for iteration ``it``;
    ``class_ids[j]`` is the class held by column ``j`` of ``W_init``.
    """
    W = np.array(W_init, dtype=np.float64, copy=True)
    if W.shape[1] != len(class_ids):
        raise ShapeError(f"{W.shape[1]} classifier columns for {len(class_ids)} classes")
    column = {c: j for j, c in enumerate(class_ids)}
    for it in range(iters):
        batch = make_batch(it)
        try:
            y = np.array([column[int(c)] for c in batch.labels])
        except KeyError as exc:
            raise ProtocolError(f"batch contains class {exc} with no classifier column") from None
        losses, _, dW = per_sample_losses(batch.features, W, y, s, m)
        loss = losses.sum() / len(y)
        if not np.isfinite(loss):
            raise NumericError(f"calibration loss is not finite at iteration {it}")
        W -= lr * (dW / len(y))
    return W
