import hashlib

import numpy as np
import pytest

from marginmerge.backbone import (
    AdapterPair,
    AdapterSet,
    BackboneConfig,
    MergedAdapterSet,
    backward,
    effective_weight,
    embed,
    forward,
    forward_backward,
    init_adapters,
    init_backbone,
    pretrain_backbone,
    zero_merged,
)
from marginmerge.errors import InputError, ShapeError
from marginmerge.margin_head import DISCRIMINATIVE, GENERALIZATION, CosineClassifier, batch_loss
from marginmerge.numerics import SeededRng, grad_check

SMALL = BackboneConfig(num_layers=2, embed_dim=8, num_patches=3, patch_dim=2, ffn_hidden=6, rank=2)


def random_adapters(cfg, rng, scale=0.3):
    def pair():
        return AdapterPair(scale * rng.normal(size=(cfg.rank, cfg.embed_dim)), scale * rng.normal(size=(cfg.embed_dim, cfg.rank)))

    return AdapterSet([pair() for _ in range(cfg.num_layers)], [pair() for _ in range(cfg.num_layers)])


def adapter_arrays(ad):
    return [a for p in ad.key + ad.value for a in (p.A, p.B)]


def grad_arrays(g):
    return [a for p in g.key + g.value for a in (p.A, p.B)]


@pytest.fixture(scope="module")
def small():
    return init_backbone(SMALL, SeededRng(0, "bb"))


def test_config_validation():
    with pytest.raises(InputError):
        BackboneConfig(embed_dim=4, rank=4)
    with pytest.raises(InputError):
        BackboneConfig(num_layers=0)


def test_effective_weight_examples():
    rng = np.random.default_rng(0)
    W0 = rng.normal(size=(4, 4))
    zero_b = AdapterPair(rng.normal(size=(2, 4)), np.zeros((4, 2)))
    np.testing.assert_array_equal(effective_weight(W0, zero_b), W0)

    pair = AdapterPair(rng.normal(size=(2, 4)), rng.normal(size=(4, 2)))
    np.testing.assert_array_equal(effective_weight(np.zeros((4, 4)), pair), pair.B @ pair.A)

    frozen = np.array([[1.0, 1.0], [1.0, 1.0]])
    rank1 = AdapterPair(np.array([[0.0, 2.0]]), np.array([[1.0], [0.0]]))
    np.testing.assert_array_equal(effective_weight(frozen, rank1), frozen + [[0.0, 2.0], [0.0, 0.0]])

    with pytest.raises(ShapeError):
        effective_weight(np.zeros((3, 3)), pair)


def test_adapter_pair_shape_contract():
    with pytest.raises(ShapeError):
        AdapterPair(np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        AdapterPair(np.zeros((4, 4)), np.zeros((4, 4)))  # r must be < d


def test_forward_shapes_and_determinism(small):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, SMALL.input_dim))
    ad = random_adapters(SMALL, rng)
    f = forward(small, ad, x)
    assert f.shape == (5, SMALL.embed_dim)
    assert forward(small, ad, x[0]).shape == (SMALL.embed_dim,)
    assert forward(small, ad, x).tobytes() == f.tobytes()
    with pytest.raises(ShapeError):
        forward(small, ad, np.zeros(SMALL.input_dim + 1))


def test_zero_init_adapters_match_zero_merged(small):
    x = np.random.default_rng(2).normal(size=(4, SMALL.input_dim))
    ad = init_adapters(SMALL, SeededRng(3))
    assert all(np.all(d == 0) for pair in ad.deltas() for d in pair)
    np.testing.assert_array_equal(forward(small, ad, x), forward(small, zero_merged(SMALL), x))
    np.testing.assert_array_equal(forward(small, ad, x), forward(small, None, x))


def test_adapter_linearity(small):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, SMALL.input_dim))
    ad = random_adapters(SMALL, rng)
    dk, dv = zip(*ad.deltas())
    merged = MergedAdapterSet(list(dk), list(dv))
    np.testing.assert_allclose(forward(small, ad, x), forward(small, merged, x), atol=1e-10, rtol=0)

    # a different factorization of the same products gives the same output
    other = AdapterSet(
        [AdapterPair(2.0 * p.A, 0.5 * p.B) for p in ad.key],
        [AdapterPair(-p.A, -p.B) for p in ad.value],
    )
    np.testing.assert_allclose(forward(small, other, x), forward(small, merged, x), atol=1e-10, rtol=0)


def test_embed_matches_forward(small):
    x = np.random.default_rng(5).normal(size=(7, SMALL.input_dim))
    np.testing.assert_allclose(embed(small, None, x, chunk=3), forward(small, None, x), atol=1e-14, rtol=0)


def test_backward_matches_finite_differences(small):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(5):
        x = rng.normal(size=SMALL.input_dim)
        up = rng.normal(size=SMALL.embed_dim)
        ad = random_adapters(SMALL, rng)

        def fn(ps):
            f = forward(small, ad, x)
            return float(up @ f), grad_arrays(backward(small, ad, x, up))

        worst = max(worst, grad_check(fn, adapter_arrays(ad), eps=1e-5))
    assert worst < 1e-4


def test_zero_upstream_gives_zero_gradients(small):
    rng = np.random.default_rng(7)
    ad = random_adapters(SMALL, rng)
    g = backward(small, ad, rng.normal(size=SMALL.input_dim), np.zeros(SMALL.embed_dim))
    assert all(np.all(a == 0) for a in grad_arrays(g))


def test_b_column_gradient_vanishes_for_zero_a_row(small):
    rng = np.random.default_rng(8)
    ad = random_adapters(SMALL, rng)
    ad.key[0].A[1] = 0.0  # row 1 of A pairs with column 1 of B
    x = rng.normal(size=SMALL.input_dim)
    up = rng.normal(size=SMALL.embed_dim)
    g = backward(small, ad, x, up)
    assert np.all(g.key[0].B[:, 1] == 0)

    def fn(ps):
        return float(up @ forward(small, ad, x)), [backward(small, ad, x, up).key[0].B]

    assert grad_check(fn, [ad.key[0].B]) < 1e-4


@pytest.mark.parametrize("kind", [DISCRIMINATIVE, GENERALIZATION])
def test_loss_through_backbone_grad_check(small, kind):
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, SMALL.input_dim))
    y = np.array([0, 1, 2, 1])
    clf = CosineClassifier(rng.normal(size=(SMALL.embed_dim, 3)), 16.0, 0.2)
    ad = random_adapters(SMALL, rng)

    def fn(ps):
        f, res = forward_backward(small, ad, x, np.zeros((4, SMALL.embed_dim)))
        loss, dF, dW = batch_loss(f, y, clf, kind)
        _, res = forward_backward(small, ad, x, dF)
        return loss, grad_arrays(res.adapters) + [dW]

    assert grad_check(fn, adapter_arrays(ad) + [clf.W], eps=1e-5) < 1e-4


def test_backbone_weight_gradients(small):
    rng = np.random.default_rng(10)
    bb = small.copy()
    x = rng.normal(size=(3, SMALL.input_dim))
    up = rng.normal(size=(3, SMALL.embed_dim))
    ad = random_adapters(SMALL, rng)
    names = [n for n, _ in bb.parameters()]
    arrays = [a for _, a in bb.parameters()]

    def fn(ps):
        f, res = forward_backward(bb, ad, x, up, backbone_grads=True)
        return float((up * f).sum()), [res.backbone[n] for n in names]

    assert grad_check(fn, arrays, eps=1e-5) < 1e-4


def test_per_sample_gradients_sum_to_batch(small):
    rng = np.random.default_rng(11)
    ad = random_adapters(SMALL, rng)
    x = rng.normal(size=(5, SMALL.input_dim))
    up = rng.normal(size=(5, SMALL.embed_dim))
    _, batch = forward_backward(small, ad, x, up)
    _, per = forward_backward(small, ad, x, up, per_sample=True)
    for l in range(SMALL.num_layers):
        np.testing.assert_allclose(per.dWk[l].sum(axis=0), batch.dWk[l], atol=1e-12)
        np.testing.assert_allclose(per.dWv[l].sum(axis=0), batch.dWv[l], atol=1e-12)


def _pretext(n_cls=4, n=40, seed=0):
    rng = np.random.default_rng(seed)
    means = 3.0 * rng.normal(size=(n_cls, SMALL.input_dim))
    x = np.concatenate([m + rng.normal(size=(n, SMALL.input_dim)) for m in means])
    y = np.repeat(np.arange(n_cls), n)
    return x, y


def _digest(bb):
    h = hashlib.sha256()
    for _, a in bb.parameters():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def test_pretrain_beats_chance_and_is_deterministic():
    x, y = _pretext()
    xt, yt = _pretext(seed=0)  # same class means
    xt, yt = xt[1::2], yt[1::2]
    x, y = x[::2], y[::2]
    a = pretrain_backbone(SMALL, x, y, epochs=15, lr=0.01, batch=16, rng=SeededRng(1))
    b = pretrain_backbone(SMALL, x, y, epochs=15, lr=0.01, batch=16, rng=SeededRng(1))
    assert _digest(a) == _digest(b)

    f, ft = embed(a, None, x), embed(a, None, xt)
    protos = np.stack([f[y == c].mean(0) for c in range(4)])
    fn = ft / np.linalg.norm(ft, axis=1, keepdims=True)
    pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    acc = np.mean(np.argmax(fn @ pn.T, axis=1) == yt)
    assert acc > 2 * (1 / 4)


def test_pretrained_weights_are_frozen():
    x, y = _pretext(n=10)
    bb = pretrain_backbone(SMALL, x, y, epochs=1, lr=0.01, batch=16, rng=SeededRng(2))
    with pytest.raises(ValueError):
        bb.layers[0]["wk0"][0, 0] = 1.0


def test_pretrain_rejects_empty_data():
    with pytest.raises(InputError):
        pretrain_backbone(SMALL, np.zeros((0, SMALL.input_dim)), np.zeros(0, dtype=int), epochs=1, lr=0.01)
