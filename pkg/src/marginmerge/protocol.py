"""Task stream, complementary base training and incremental session orchestration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import miam
from .backbone import MergedAdapterSet, backward_cached, embed, forward_cached, init_adapters, pretrain_backbone
from .config import backbone_config, validate_config
from .errors import InputError, NumericError, ProtocolError
from .margin_head import DISCRIMINATIVE, GENERALIZATION, CosineClassifier, batch_loss, predict
from .metrics import build_report, make_records, session_accuracy
from .mpcc import ReplayBank, borrow_covariance, build_embedding_batch, calibrate, estimate_base_stats
from .numerics import SeededRng

log = logging.getLogger(__name__)

MERGED = "merged"
VARIANTS = (MERGED, DISCRIMINATIVE, GENERALIZATION)

PRETRAIN_EPOCHS = 30
PRETRAIN_LR = 0.003


# ------------------------------------------------------------------ stream


@dataclass
class SessionData:
    index: int
    classes: list
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray  # cumulative over all classes seen so far
    test_y: np.ndarray


@dataclass
class TaskStream:
    classes: list  # classes[t] = sorted class ids introduced in session t
    sessions: list  # SessionData per session

    @property
    def session_of(self):
        return {c: t for t, cs in enumerate(self.classes) for c in cs}

    @property
    def base_classes(self):
        return self.classes[0]


def build_stream(fixture, stream_cfg, rng):
    """Base session gets every training sample of its classes; later sessions get K shots per class."""
    base, n_way = stream_cfg["base_classes"], stream_cfg["n_way"]
    k_shot, T = stream_cfg["k_shot"], stream_cfg["sessions"]
    needed = base + n_way * T
    if needed > fixture.spec.num_classes:
        raise InputError(f"stream needs {needed} classes, fixture has {fixture.spec.num_classes}")
    classes = [list(range(base))] + [list(range(base + t * n_way, base + (t + 1) * n_way)) for t in range(T)]
    seen = set()
    for cs in classes:
        if seen & set(cs):
            raise ProtocolError("session class sets overlap")
        seen |= set(cs)

    train_x, train_y = fixture.splits["train"]
    test_x, test_y = fixture.splits["test"]
    sessions = []
    seen = []
    for t, cs in enumerate(classes):
        idx = []
        for c in cs:
            members = np.flatnonzero(train_y == c)
            if t == 0:
                idx.append(members)
            else:
                if members.size < k_shot:
                    raise InputError(f"class {c} has {members.size} training samples, need {k_shot}")
                pick = rng.substream("shots", c).permutation(members.size)[:k_shot]
                idx.append(members[np.sort(pick)])
        idx = np.concatenate(idx)
        seen = seen + cs
        test_idx = np.flatnonzero(np.isin(test_y, seen))
        sessions.append(SessionData(t, cs, train_x[idx], train_y[idx], test_x[test_idx], test_y[test_idx]))
    return TaskStream(classes, sessions)


def compute_prototype(features):
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if F.shape[0] == 0:
        raise InputError("cannot compute a prototype from zero features")
    return F.mean(axis=0)


def class_prototypes(features, labels, class_ids):
    return np.stack([compute_prototype(features[labels == c]) for c in class_ids], axis=1)


# ---------------------------------------------------------- base training


@dataclass
class BaseTrainResult:
    base_classes: list
    adapters_d: object
    clf_d: CosineClassifier
    adapters_g: object | None
    clf_g: CosineClassifier | None
    merged: MergedAdapterSet
    base_prototypes: np.ndarray  # (d, |C0|) through the merged backbone
    merge_report: list = field(default_factory=list)
    fisher_d: object = None
    fisher_g: object = None
    weights: object = None

    def deltas_for(self, variant):
        if variant == MERGED:
            return self.merged
        src = self.adapters_d if variant == DISCRIMINATIVE else self.adapters_g
        if src is None:
            raise InputError(f"no {variant} adapter set in this result")
        dk, dv = zip(*src.deltas())
        return MergedAdapterSet(list(dk), list(dv))

    def classifier_for(self, variant):
        return self.clf_g if variant == GENERALIZATION else self.clf_d


def train_model(backbone, samples, labels, kind, train_cfg, rng, init_W):
    """SGD on adapters and classifier for one objective; returns ``(AdapterSet, CosineClassifier)``.

    ``labels`` are column indices into ``init_W``.
    """
    cfg = backbone.config
    adapters = init_adapters(cfg, rng.substream("adapters"))
    clf = CosineClassifier(init_W.copy(), train_cfg["s"], train_cfg["m"])
    lr, batch = train_cfg["lr"], train_cfg["batch"]
    n = samples.shape[0]
    for epoch in range(train_cfg["epochs"]):
        order = rng.substream("epoch", epoch).permutation(n)
        for step, start in enumerate(range(0, n, batch)):
            idx = order[start : start + batch]
            feats, cache = forward_cached(backbone, adapters, samples[idx])
            loss, dF, dW = batch_loss(feats, labels[idx], clf, kind)
            if not np.isfinite(loss):
                raise NumericError(f"{kind} training diverged at epoch {epoch}, step {step}")
            res = backward_cached(backbone, adapters, feats, cache, dF)
            for p, g in zip(adapters.key + adapters.value, res.adapters.key + res.adapters.value):
                p.A -= lr * g.A
                p.B -= lr * g.B
            clf.W -= lr * dW
    return adapters, clf


def _fisher_subset(n, subsample, rng):
    if subsample <= 0 or subsample >= n:
        return np.arange(n)
    return np.sort(rng.permutation(n)[:subsample])


def train_complementary(backbone, base_session, cfg, rng, merge=True):
    """Train the margin and plain models, score them by Fisher, merge, and take base prototypes.

    With ``merge=False`` only the margin-loss model is trained and its updates
    are used directly (single-set baseline).
    """
    train_cfg, fisher_cfg = cfg["train"], cfg["fisher"]
    classes = sorted(base_session.classes)
    if len(classes) < 2:
        raise InputError("base session needs at least two classes")
    col = {c: j for j, c in enumerate(classes)}
    X = base_session.train_x
    y = np.array([col[int(c)] for c in base_session.train_y])

    # classifiers start from the class means of the un-adapted backbone
    init_W = class_prototypes(embed(backbone, None, X), y, range(len(classes)))

    adapters_d, clf_d = train_model(backbone, X, y, DISCRIMINATIVE, train_cfg, rng.substream("d"), init_W)
    if not merge:
        dk, dv = zip(*adapters_d.deltas())
        merged = MergedAdapterSet(list(dk), list(dv))
        protos = class_prototypes(embed(backbone, merged, X), y, range(len(classes)))
        return BaseTrainResult(classes, adapters_d, clf_d, None, None, merged, protos)

    adapters_g, clf_g = train_model(backbone, X, y, GENERALIZATION, train_cfg, rng.substream("g"), init_W)

    sub = _fisher_subset(X.shape[0], fisher_cfg["subsample"], rng.substream("fisher"))
    # the plain loss scores both sets; by default each through its own head
    head_d = clf_g if fisher_cfg.get("classifier", "own") == "generalization" else clf_d
    fisher_d = miam.fisher_diag(backbone, adapters_d, head_d, X[sub], y[sub])
    fisher_g = miam.fisher_diag(backbone, adapters_g, clf_g, X[sub], y[sub])
    weights = miam.fis_weights(fisher_d, fisher_g)
    merged = miam.merge_adapters(adapters_d, adapters_g, weights)
    report = miam.export_merge_report(fisher_d, fisher_g, weights)
    protos = class_prototypes(embed(backbone, merged, X), y, range(len(classes)))
    return BaseTrainResult(classes, adapters_d, clf_d, adapters_g, clf_g, merged, protos, report, fisher_d, fisher_g, weights)


# ------------------------------------------------------------ incremental


@dataclass
class IncrementalState:
    W: np.ndarray  # (d, seen classes)
    class_ids: list  # column j holds class class_ids[j]
    next_session: int = 0

    def copy(self):
        return IncrementalState(self.W.copy(), list(self.class_ids), self.next_session)


def extend_classifier(state, new_prototypes, new_ids):
    """Append prototype columns for unseen classes, in ascending class-id order."""
    new_ids = list(new_ids)
    if len(set(new_ids)) != len(new_ids) or set(new_ids) & set(state.class_ids):
        raise InputError(f"duplicate class ids in {new_ids}")
    if not new_ids:
        return IncrementalState(state.W, list(state.class_ids), state.next_session)
    P = np.asarray(new_prototypes, dtype=np.float64)
    order = np.argsort(new_ids, kind="stable")
    W = np.concatenate([state.W, P[:, order]], axis=1) if state.W.size else P[:, order]
    return IncrementalState(W, list(state.class_ids) + [new_ids[i] for i in order], state.next_session)


@dataclass
class SessionMetrics:
    session: int
    accuracy: float
    records: object


def evaluate(state, backbone, deltas, session, session_of):
    feats = embed(backbone, deltas, session.test_x)
    pred = np.asarray(state.class_ids)[predict(feats, state.W)]
    records = make_records(session.test_y, pred, session_of)
    return SessionMetrics(session.index, session_accuracy(records), records)


class SessionRunner:
    """Runs sessions in order against a frozen backbone and fixed adapter updates."""

    def __init__(self, backbone, deltas, base_result, stream, cfg, rng, variant=MERGED):
        self.backbone = backbone
        self.deltas = deltas
        self.base = base_result
        self.stream = stream
        self.cfg = cfg
        self.rng = rng
        self.variant = variant
        self.bank = None

    def _base_prototypes(self, session):
        if self.variant == MERGED:
            return self.base.base_prototypes.copy()
        # single-model ablations use their own feature space for the base columns too
        feats = embed(self.backbone, self.deltas, session.train_x)
        return class_prototypes(feats, session.train_y, self.base.base_classes)

    def _bank(self):
        if self.bank is None:
            s0 = self.stream.sessions[0]
            feats = embed(self.backbone, self.deltas, s0.train_x)
            stats = estimate_base_stats({c: feats[s0.train_y == c] for c in self.base.base_classes})
            clf = self.base.classifier_for(self.variant)
            columns = {c: clf.W[:, j] for j, c in enumerate(self.base.base_classes)}
            self.bank = ReplayBank(stats, columns)
        return self.bank

    def run_session(self, state, session, mpcc_enabled):
        if session.index != state.next_session:
            raise ProtocolError(f"expected session {state.next_session}, got {session.index}")
        session_of = self.stream.session_of
        if session.index == 0:
            state = IncrementalState(self._base_prototypes(session), list(self.base.base_classes), 0)
        else:
            feats = embed(self.backbone, self.deltas, session.train_x)
            new_ids = sorted(session.classes)
            protos = class_prototypes(feats, session.train_y, new_ids)
            prev_ids = list(state.class_ids)
            state = extend_classifier(state, protos, new_ids)
            if mpcc_enabled:
                state = self._calibrate(state, session, feats, protos, new_ids, prev_ids)
        state.next_session = session.index + 1
        return state, evaluate(state, self.backbone, self.deltas, session, session_of)

    def _calibrate(self, state, session, feats, protos, new_ids, prev_ids):
        bank = self._bank()
        mcfg, tcfg = self.cfg["mpcc"], self.cfg["train"]
        current = {c: feats[session.train_y == c] for c in new_ids}
        rng = self.rng.substream("mpcc", session.index)

        def make_batch(it):
            return build_embedding_batch(bank, current, mcfg["per_class"], rng.substream(it), class_ids=state.class_ids)

        W = calibrate(state.W, state.class_ids, make_batch, s=tcfg["s"], m=tcfg["m"], lr=mcfg["lr"], iters=mcfg["iters"])
        # this session's classes become "previous" few-shot classes for later sessions
        for j, c in enumerate(new_ids):
            bank.add_previous(c, borrow_covariance(protos[:, j], bank.base_stats, session.train_y.tolist().count(c)))
        return IncrementalState(W, state.class_ids, state.next_session)


def run_sessions(backbone, base_result, stream, cfg, rng, variant=MERGED, mpcc_enabled=None):
    """All sessions in order; returns ``(list of SessionMetrics, final IncrementalState)``."""
    if mpcc_enabled is None:
        mpcc_enabled = cfg["mpcc"]["enabled"]
    runner = SessionRunner(backbone, base_result.deltas_for(variant), base_result, stream, cfg, rng, variant)
    state = IncrementalState(np.zeros((backbone.config.embed_dim, 0)), [], 0)
    metrics = []
    for session in stream.sessions:
        state, m = runner.run_session(state, session, mpcc_enabled)
        metrics.append(m)
    return metrics, state


# --------------------------------------------------------------- pipeline


def pretrain_from_fixture(fixture, cfg, rng, epochs=PRETRAIN_EPOCHS, lr=PRETRAIN_LR):
    bcfg = backbone_config(cfg, fixture.spec.patch_dim)
    if bcfg.num_patches != fixture.spec.num_patches:
        raise InputError(f"config N={bcfg.num_patches} but fixture has {fixture.spec.num_patches} patches")
    x, y = fixture.splits["pretext_train"]
    return pretrain_backbone(bcfg, x, y, epochs=epochs, lr=lr, rng=rng)


@dataclass
class PipelineResult:
    backbone: object
    base: BaseTrainResult
    stream: TaskStream
    reports: dict  # (variant, mpcc flag) -> RunReport dict
    metrics: dict


def run_pipeline(fixture, cfg, backbone=None, variants=(MERGED,), mpcc_modes=None, merge=True):
    """Pretrain (unless given a backbone), train the base task, run every session.

    Every random draw is a labelled substream of the config seed, so
    switching variants or MPCC never changes base-training randomness.
    """
    validate_config(cfg)
    root = SeededRng(cfg["seed"])
    if backbone is None:
        backbone = pretrain_from_fixture(fixture, cfg, root.substream("pretrain"))
    stream = build_stream(fixture, cfg["stream"], root.substream("stream"))
    base = train_complementary(backbone, stream.sessions[0], cfg, root.substream("base"), merge=merge)
    if mpcc_modes is None:
        mpcc_modes = (cfg["mpcc"]["enabled"],)
    reports, metrics = {}, {}
    for variant in variants:
        for mpcc_on in mpcc_modes:
            ms, _ = run_sessions(backbone, base, stream, cfg, root.substream("sessions"), variant, mpcc_on)
            echo = dict(cfg, mpcc=dict(cfg["mpcc"], enabled=bool(mpcc_on)))
            reports[(variant, mpcc_on)] = build_report([m.accuracy for m in ms], ms[-1].records, cfg["seed"], echo)
            metrics[(variant, mpcc_on)] = ms
    return PipelineResult(backbone, base, stream, reports, metrics)
