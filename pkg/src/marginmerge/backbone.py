"""Tiny pre-norm transformer encoder with low-rank adapters on key and value projections.

Layout per layer (single head, ``d_k = d``)::

    h  = LN1(x)
    x  = x + softmax((h Wq)(h Wk)^T / sqrt(d)) (h Wv) Wout
    h2 = LN2(x)
    x  = x + gelu(h2 W1) W2

with ``Wk = Wk0 + Bk Ak`` and ``Wv = Wv0 + Bv Av``. The embedding is the
class-token row of the last layer's output. Samples are processed in
batches of shape ``(B, N * patch_dim)``; a 1-D sample is treated as a batch
of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ShapeError
from .numerics import SeededRng

LN_EPS = 1e-5
ADAPTER_INIT_STD = 0.02

LAYER_KEYS = ("wq", "wk0", "wv0", "wout", "ffn1", "ffn2", "ln1s", "ln1b", "ln2s", "ln2b")


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 2
    embed_dim: int = 32
    num_patches: int = 16
    patch_dim: int = 4
    ffn_hidden: int = 64
    rank: int = 4

    def __post_init__(self):
        if self.num_layers < 1 or self.embed_dim < 4 or self.num_patches < 1 or self.patch_dim < 1:
            raise InputError(f"invalid backbone config {self}")
        if self.ffn_hidden < 1:
            raise InputError("ffn_hidden must be positive")
        if not 0 < self.rank < self.embed_dim:
            raise InputError(f"adapter rank must satisfy 0 < r < d, got r={self.rank}")

    @property
    def input_dim(self):
        return self.num_patches * self.patch_dim


# full-scale settings; rank 10 as in the reference ViT-B/16 experiments
FULL_SCALE_CONFIG = dict(num_layers=12, embed_dim=768, num_patches=196, patch_dim=768, ffn_hidden=3072, rank=10)


@dataclass
class FrozenBackbone:
    config: BackboneConfig
    patch_embed: np.ndarray  # (patch_dim, d)
    class_token: np.ndarray  # (d,)
    pos_embed: np.ndarray  # (N, d), added to patch tokens
    layers: list  # one dict per layer, keys LAYER_KEYS

    def parameters(self):
        """Named arrays in a fixed order (used for hashing and serialization)."""
        out = [("patch_embed", self.patch_embed), ("class_token", self.class_token), ("pos_embed", self.pos_embed)]
        for l, layer in enumerate(self.layers):
            out.extend((f"layer{l}.{k}", layer[k]) for k in LAYER_KEYS)
        return out

    def copy(self):
        return FrozenBackbone(
            self.config,
            self.patch_embed.copy(),
            self.class_token.copy(),
            self.pos_embed.copy(),
            [{k: v.copy() for k, v in layer.items()} for layer in self.layers],
        )


@dataclass
class AdapterPair:
    A: np.ndarray  # (r, d)
    B: np.ndarray  # (d, r)

    def __post_init__(self):
        r, d = self.A.shape
        if self.B.shape != (d, r) or r >= d:
            raise ShapeError(f"adapter pair shapes A{self.A.shape} B{self.B.shape} do not conform")

    @property
    def rank(self):
        return self.A.shape[0]

    def delta(self):
        return self.B @ self.A


@dataclass
class AdapterSet:
    key: list  # AdapterPair per layer
    value: list

    @property
    def num_layers(self):
        return len(self.key)

    def deltas(self):
        return [(k.delta(), v.delta()) for k, v in zip(self.key, self.value)]

    def copy(self):
        return AdapterSet(
            [AdapterPair(p.A.copy(), p.B.copy()) for p in self.key],
            [AdapterPair(p.A.copy(), p.B.copy()) for p in self.value],
        )


@dataclass
class MergedAdapterSet:
    delta_k: list  # (d, d) per layer
    delta_v: list

    @property
    def num_layers(self):
        return len(self.delta_k)

    def deltas(self):
        return list(zip(self.delta_k, self.delta_v))


def init_adapters(config, rng):
    """B = 0, A ~ N(0, 0.02^2): every delta starts at exactly zero."""
    d, r = config.embed_dim, config.rank

    def pair(*labels):
        A = ADAPTER_INIT_STD * rng.substream(*labels).normal((r, d))
        return AdapterPair(A, np.zeros((d, r)))

    return AdapterSet(
        [pair("key", l) for l in range(config.num_layers)],
        [pair("value", l) for l in range(config.num_layers)],
    )


def zero_merged(config):
    d = config.embed_dim
    return MergedAdapterSet(
        [np.zeros((d, d)) for _ in range(config.num_layers)],
        [np.zeros((d, d)) for _ in range(config.num_layers)],
    )


def effective_weight(frozen, pair):
    frozen = np.asarray(frozen, dtype=np.float64)
    d = frozen.shape[0]
    if frozen.shape != (d, d) or pair.A.shape[1] != d or pair.B.shape[0] != d:
        raise ShapeError(f"frozen {frozen.shape} does not conform with adapter pair")
    return frozen + pair.B @ pair.A


def init_backbone(config, rng):
    d, h = config.embed_dim, config.ffn_hidden
    g = lambda label, shape, std: std * rng.substream(label).normal(shape)
    layers = []
    for l in range(config.num_layers):
        layers.append(
            {
                "wq": g(f"wq{l}", (d, d), 1 / math.sqrt(d)),
                "wk0": g(f"wk{l}", (d, d), 1 / math.sqrt(d)),
                "wv0": g(f"wv{l}", (d, d), 1 / math.sqrt(d)),
                "wout": g(f"wout{l}", (d, d), 1 / math.sqrt(d)),
                "ffn1": g(f"ffn1{l}", (d, h), 1 / math.sqrt(d)),
                "ffn2": g(f"ffn2{l}", (h, d), 1 / math.sqrt(h)),
                "ln1s": np.ones(d),
                "ln1b": np.zeros(d),
                "ln2s": np.ones(d),
                "ln2b": np.zeros(d),
            }
        )
    return FrozenBackbone(
        config,
        g("patch", (config.patch_dim, d), 1 / math.sqrt(config.patch_dim)),
        g("cls", (d,), 0.02),
        g("pos", (config.num_patches, d), 0.5),
        layers,
    )


# ------------------------------------------------------------------ kernels


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    """tanh-form GELU; returns the activation and the tanh term for the backward pass."""
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _ln_forward(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def _ln_backward(dy, scale, cache):
    xhat, inv = cache
    dscale = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dshift = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * scale
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, dshift


def _tsum(a, b):
    """sum over batch and tokens of a_t^T b_t"""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(backbone, samples):
    x = np.asarray(samples, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    cfg = backbone.config
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"samples must have length {cfg.input_dim}, got shape {np.shape(samples)}")
    return x, single


def _resolve_deltas(backbone, adapters):
    if adapters is None:
        return [(None, None)] * backbone.config.num_layers
    if adapters.num_layers != backbone.config.num_layers:
        raise ShapeError(f"{adapters.num_layers} adapter layers for a {backbone.config.num_layers}-layer backbone")
    return adapters.deltas()


def _forward(backbone, deltas, x):
    cfg = backbone.config
    B, d = x.shape[0], cfg.embed_dim
    P = x.reshape(B, cfg.num_patches, cfg.patch_dim)
    tokens = np.concatenate([np.broadcast_to(backbone.class_token, (B, 1, d)), P @ backbone.patch_embed + backbone.pos_embed], axis=1)
    caches = []
    h_in = tokens
    scale = 1.0 / math.sqrt(d)
    for layer, (dk, dv) in zip(backbone.layers, deltas):
        wk = layer["wk0"] if dk is None else layer["wk0"] + dk
        wv = layer["wv0"] if dv is None else layer["wv0"] + dv
        h, ln1 = _ln_forward(h_in, layer["ln1s"], layer["ln1b"])
        Q, K, V = h @ layer["wq"], h @ wk, h @ wv
        attn = _softmax(np.matmul(Q, K.transpose(0, 2, 1)) * scale)
        O = np.matmul(attn, V)
        x1 = h_in + O @ layer["wout"]
        h2, ln2 = _ln_forward(x1, layer["ln2s"], layer["ln2b"])
        U = h2 @ layer["ffn1"]
        G, T = _gelu(U)
        x2 = x1 + G @ layer["ffn2"]
        caches.append(dict(h=h, ln1=ln1, Q=Q, K=K, V=V, attn=attn, O=O, wk=wk, wv=wv, h2=h2, ln2=ln2, U=U, G=G, T=T))
        h_in = x2
    if not np.all(np.isfinite(h_in)):
        raise NumericError("non-finite activations in forward pass")
    return h_in[:, 0, :], (x, deltas, P, caches)


def forward(backbone, adapters, samples):
    """Embeddings for one sample (returns ``(d,)``) or a batch (returns ``(B, d)``).

    ``adapters`` may be an AdapterSet, a MergedAdapterSet or None (bare backbone).
    """
    x, single = _as_batch(backbone, samples)
    f, _ = _forward(backbone, _resolve_deltas(backbone, adapters), x)
    return f[0] if single else f


def embed(backbone, adapters, samples, chunk=512):
    """Batched forward in fixed-size chunks; row order is preserved."""
    x, _ = _as_batch(backbone, samples)
    deltas = _resolve_deltas(backbone, adapters)
    out = [_forward(backbone, deltas, x[i : i + chunk])[0] for i in range(0, x.shape[0], chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, backbone.config.embed_dim))


@dataclass
class BackwardResult:
    """Gradients of ``sum_i <upstream_i, f_i>``.

    ``dWk[l]``/``dWv[l]`` are gradients on the effective key/value weights
    (equal to gradients on the deltas); per-sample when requested, with a
    leading batch axis. ``adapters`` holds gradients on A and B when an
    AdapterSet was supplied. ``backbone`` holds gradients on frozen weights
    when requested (used by pretraining only).
    """

    dWk: list
    dWv: list
    adapters: AdapterSet | None = None
    backbone: dict = field(default_factory=dict)


def forward_cached(backbone, adapters, samples):
    """Batch embeddings plus the activations ``backward_cached`` needs."""
    x, _ = _as_batch(backbone, samples)
    return _forward(backbone, _resolve_deltas(backbone, adapters), x)


def forward_backward(backbone, adapters, samples, upstream, per_sample=False, backbone_grads=False):
    """Forward then reverse pass; returns ``(embeddings, BackwardResult)``."""
    f, cache = forward_cached(backbone, adapters, samples)
    return f, backward_cached(backbone, adapters, f, cache, upstream, per_sample, backbone_grads)


def backward_cached(backbone, adapters, f, cache, upstream, per_sample=False, backbone_grads=False):
    _, _, P, caches = cache
    dF = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if dF.shape != f.shape:
        raise ShapeError(f"upstream gradient shape {dF.shape} != embedding shape {f.shape}")

    cfg = backbone.config
    B, d = f.shape
    scale = 1.0 / math.sqrt(d)
    dx = np.zeros((B, cfg.num_patches + 1, d))
    dx[:, 0, :] = dF
    dWk = [None] * cfg.num_layers
    dWv = [None] * cfg.num_layers
    bgrads = {}
    wsum = (lambda a, b: np.matmul(a.transpose(0, 2, 1), b)) if per_sample else _tsum

    for l in reversed(range(cfg.num_layers)):
        layer, c = backbone.layers[l], caches[l]
        # FFN block
        dG = dx @ layer["ffn2"].T
        dU = dG * _gelu_grad(c["U"], c["T"])
        dh2 = dU @ layer["ffn1"].T
        dx1_ln, ds2, db2 = _ln_backward(dh2, layer["ln2s"], c["ln2"])
        dx1 = dx + dx1_ln
        if backbone_grads:
            bgrads[f"layer{l}.ffn2"] = _tsum(c["G"], dx)
            bgrads[f"layer{l}.ffn1"] = _tsum(c["h2"], dU)
            bgrads[f"layer{l}.ln2s"], bgrads[f"layer{l}.ln2b"] = ds2, db2
        # attention block
        dO = dx1 @ layer["wout"].T
        attn = c["attn"]
        dattn = np.matmul(dO, c["V"].transpose(0, 2, 1))
        dV = np.matmul(attn.transpose(0, 2, 1), dO)
        dS = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dQ = np.matmul(dS, c["K"])
        dK = np.matmul(dS.transpose(0, 2, 1), c["Q"])
        h = c["h"]
        dWk[l] = wsum(h, dK)
        dWv[l] = wsum(h, dV)
        dh = dQ @ layer["wq"].T + dK @ c["wk"].T + dV @ c["wv"].T
        dx_ln, ds1, db1 = _ln_backward(dh, layer["ln1s"], c["ln1"])
        if backbone_grads:
            bgrads[f"layer{l}.wout"] = _tsum(c["O"], dx1)
            bgrads[f"layer{l}.wq"] = _tsum(h, dQ)
            bgrads[f"layer{l}.wk0"] = dWk[l] if not per_sample else dWk[l].sum(axis=0)
            bgrads[f"layer{l}.wv0"] = dWv[l] if not per_sample else dWv[l].sum(axis=0)
            bgrads[f"layer{l}.ln1s"], bgrads[f"layer{l}.ln1b"] = ds1, db1
        dx = dx1 + dx_ln

    if backbone_grads:
        bgrads["class_token"] = dx[:, 0, :].sum(axis=0)
        bgrads["patch_embed"] = _tsum(P, dx[:, 1:, :])
        bgrads["pos_embed"] = dx[:, 1:, :].sum(axis=0)

    adapter_grads = None
    if isinstance(adapters, AdapterSet):
        pairs_k, pairs_v = [], []
        for l in range(cfg.num_layers):
            gk = dWk[l].sum(axis=0) if per_sample else dWk[l]
            gv = dWv[l].sum(axis=0) if per_sample else dWv[l]
            pk, pv = adapters.key[l], adapters.value[l]
            # dL/dB = dW A^T, dL/dA = B^T dW
            pairs_k.append(AdapterPair(pk.B.T @ gk, gk @ pk.A.T))
            pairs_v.append(AdapterPair(pv.B.T @ gv, gv @ pv.A.T))
        adapter_grads = AdapterSet(pairs_k, pairs_v)

    for g in dWk + dWv:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradients in backward pass")
    return BackwardResult(dWk, dWv, adapter_grads, bgrads)


def backward(backbone, adapters, sample, upstream):
    """Gradients of ``upstream . f`` on every adapter matrix, as an AdapterSet of gradients."""
    if not isinstance(adapters, AdapterSet):
        raise InputError("backward needs an AdapterSet with trainable A and B")
    _, res = forward_backward(backbone, adapters, sample, upstream)
    return res.adapters


# -------------------------------------------------------------- pretraining


def pretrain_backbone(config, samples, labels, epochs=30, lr=0.003, batch=64, rng=None):
    """Train every backbone weight with a linear softmax head (Adam), then drop the head.

    Labels may be arbitrary integer ids; they are mapped to head columns in
    sorted order. Returns the frozen backbone.
    """
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if samples.shape[0] == 0:
        raise InputError("empty pretext data")
    if rng is None:
        rng = SeededRng(0, "pretrain")
    classes, y = np.unique(labels, return_inverse=True)
    C, d = classes.size, config.embed_dim
    backbone = init_backbone(config, rng.substream("init"))
    params = dict(backbone.parameters())
    params["head"] = 0.01 * rng.substream("head").normal((d, C))
    params["head_bias"] = np.zeros(C)
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, step = 0.9, 0.999, 0

    n = samples.shape[0]
    for epoch in range(epochs):
        order = rng.substream("epoch", epoch).permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb, yb = samples[idx], y[idx]
            f, cache = forward_cached(backbone, None, xb)
            p = _softmax(f @ params["head"] + params["head_bias"])
            rows = np.arange(len(idx))
            loss = -np.log(p[rows, yb] + 1e-300).mean()
            if not np.isfinite(loss):
                raise NumericError(f"pretraining diverged at epoch {epoch}, step {start // batch}")
            dlogits = p
            dlogits[rows, yb] -= 1.0
            dlogits /= len(idx)
            res = backward_cached(backbone, None, f, cache, dlogits @ params["head"].T, backbone_grads=True)
            grads = dict(res.backbone, head=f.T @ dlogits, head_bias=dlogits.sum(axis=0))
            step += 1
            for k, g in grads.items():
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                params[k] -= lr * (m1[k] / (1 - b1**step)) / (np.sqrt(m2[k] / (1 - b2**step)) + 1e-8)
    for name, arr in backbone.parameters():
        arr.setflags(write=False)
    return backbone
