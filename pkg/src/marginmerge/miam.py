"""Fisher-weighted merging of two adapter sets trained on the same base task.

Both sets are scored with the diagonal empirical Fisher of the plain
(no-margin) cosine loss, taken with respect to each layer's key and value
update blocks. Per block, the Frobenius norms of the two Fisher matrices are
normalized into a convex pair of merge coefficients.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .backbone import MergedAdapterSet, backward_cached, forward_cached
from .errors import DegenerateInputError, ShapeError
from .margin_head import per_sample_losses

BLOCKS = ("key", "value")
FALLBACK_EPS = 1e-12


@dataclass
class FisherStats:
    key: list  # (d, d) per layer
    value: list

    @property
    def num_layers(self):
        return len(self.key)

    def block(self, name):
        return self.key if name == "key" else self.value

    def frob_norms(self, name):
        return [float(np.linalg.norm(F)) for F in self.block(name)]


@dataclass
class MergeWeights:
    # weights[block][layer] = (fis_d, fis_g)
    key: list
    value: list
    fallback_key: list
    fallback_value: list

    def block(self, name):
        return self.key if name == "key" else self.value

    def fallback(self, name):
        return self.fallback_key if name == "key" else self.fallback_value


def fisher_diag(backbone, adapters, clf, samples, labels, chunk=64):
    """Mean over samples of the squared per-sample gradient of the plain cosine loss.

    ``labels`` index columns of ``clf.W``. Accumulation is in sample order,
    chunk by chunk.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n = samples.shape[0]
    if n == 0:
        raise ShapeError("fisher_diag needs at least one sample")
    L, d = backbone.config.num_layers, backbone.config.embed_dim
    acc_k = [np.zeros((d, d)) for _ in range(L)]
    acc_v = [np.zeros((d, d)) for _ in range(L)]
    for start in range(0, n, chunk):
        xb, yb = samples[start : start + chunk], labels[start : start + chunk]
        feats, cache = forward_cached(backbone, adapters, xb)
        try:
            _, dF, _ = per_sample_losses(feats, clf.W, yb, clf.s, 0.0)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"{exc} (sample offset {start})") from exc
        res = backward_cached(backbone, adapters, feats, cache, dF, per_sample=True)
        for l in range(L):
            acc_k[l] += np.einsum("bij,bij->ij", res.dWk[l], res.dWk[l])
            acc_v[l] += np.einsum("bij,bij->ij", res.dWv[l], res.dWv[l])
    return FisherStats([a / n for a in acc_k], [a / n for a in acc_v])


def _pair(nd, ng):
    total = nd + ng
    if total < FALLBACK_EPS:
        return (0.5, 0.5), True
    fd = nd / total
    return (fd, 1.0 - fd), False


def fis_weights(fisher_d, fisher_g):
    if fisher_d.num_layers != fisher_g.num_layers:
        raise ShapeError("Fisher statistics have different layer counts")
    out = {}
    for name in BLOCKS:
        pairs, flags = [], []
        for nd, ng in zip(fisher_d.frob_norms(name), fisher_g.frob_norms(name)):
            p, fb = _pair(nd, ng)
            pairs.append(p)
            flags.append(fb)
        out[name] = (pairs, flags)
    if any(any(flags) for _, flags in out.values()):
        warnings.warn("degenerate Fisher norms; using 0.5/0.5 merge weights for some blocks")
    return MergeWeights(out["key"][0], out["value"][0], out["key"][1], out["value"][1])


def merge_adapters(set_d, set_g, weights):
    """Blockwise convex combination of the two sets' update products."""
    if set_d.num_layers != set_g.num_layers or len(weights.key) != set_d.num_layers:
        raise ShapeError("adapter sets and weights disagree on layer count")
    merged_k, merged_v = [], []
    for l, ((dk_d, dv_d), (dk_g, dv_g)) in enumerate(zip(set_d.deltas(), set_g.deltas())):
        if dk_d.shape != dk_g.shape or dv_d.shape != dv_g.shape:
            raise ShapeError(f"layer {l}: update blocks have different shapes")
        (kd, kg), (vd, vg) = weights.key[l], weights.value[l]
        merged_k.append(kd * dk_d + kg * dk_g)
        merged_v.append(vd * dv_d + vg * dv_g)
    return MergedAdapterSet(merged_k, merged_v)


def export_merge_report(fisher_d, fisher_g, weights):
    """Rows of per-layer, per-block Fisher magnitudes and merge weights."""
    rows = []
    for l in range(fisher_d.num_layers):
        for name in BLOCKS:
            fd, fg = weights.block(name)[l]
            rows.append(
                {
                    "layer": l,
                    "block": name,
                    "frob_d": fisher_d.frob_norms(name)[l],
                    "frob_g": fisher_g.frob_norms(name)[l],
                    "fis_d": fd,
                    "fis_g": fg,
                    "fallback": bool(weights.fallback(name)[l]),
                }
            )
    return rows


def dumps_merge_report(rows):
    # repr-based float formatting in json round-trips float64 exactly
    return json.dumps(rows, indent=2)


def loads_merge_report(text):
    return json.loads(text)
