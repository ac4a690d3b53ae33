"""Checkpoint directories: ``manifest.json`` plus one SMPMAT01 file per matrix.

A backbone checkpoint holds ``patch_embed``, ``class_token``, ``pos_embed``
and ``layer{l}.{key}.mat`` files. A base-model checkpoint adds the merged
updates (``merged.layer{l}.{dk|dv}.mat``), one subdirectory per trained
adapter set (``d/`` and ``g/``, each with ``adapters.layer{l}.{ak|bk|av|bv}.mat``
and ``classifier.mat``), ``prototypes.mat`` and ``merge_report.json``.

Manifests carry no timestamps, so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import LAYER_KEYS, AdapterPair, AdapterSet, BackboneConfig, FrozenBackbone, MergedAdapterSet
from .errors import CorruptionError
from .margin_head import CosineClassifier
from .miam import dumps_merge_report, loads_merge_report
from .numerics import encode_matrix, load_matrix, save_matrix, sha256_file

BACKBONE_FORMAT = "marginmerge-backbone/1"
MODEL_FORMAT = "marginmerge-model/1"
_VECTORS = {"class_token", "ln1s", "ln1b", "ln2s", "ln2b"}


def backbone_hash(backbone):
    """SHA-256 over the serialized frozen weights, in parameter order."""
    h = hashlib.sha256()
    for name, arr in backbone.parameters():
        h.update(name.encode())
        h.update(encode_matrix(np.atleast_2d(arr)))
    return h.hexdigest()


def _content_hash(files):
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(f"{name}={files[name]}\n".encode())
    return h.hexdigest()


def _write_manifest(path, manifest):
    manifest["content_hash"] = _content_hash(manifest["files"])
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _read_manifest(path, fmt):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{mpath}: {exc}") from exc
    if manifest.get("format") != fmt:
        raise CorruptionError(f"{mpath}: expected format {fmt}, found {manifest.get('format')!r}")
    for name, digest in manifest["files"].items():
        f = path / name
        if not f.is_file():
            raise CorruptionError(f"checkpoint file missing: {f}")
        if sha256_file(f) != digest:
            raise CorruptionError(f"checksum mismatch for {f}")
    return manifest


def _save_backbone_files(path, backbone, files):
    for name, arr in backbone.parameters():
        files[f"{name}.mat"] = save_matrix(path / f"{name}.mat", np.atleast_2d(arr))


def _load_backbone_files(path, cfg):
    def get(name):
        return load_matrix(path / f"{name}.mat")

    layers = []
    for l in range(cfg.num_layers):
        layer = {}
        for k in LAYER_KEYS:
            m = get(f"layer{l}.{k}")
            layer[k] = m[0] if k in _VECTORS else m
        layers.append(layer)
    return FrozenBackbone(cfg, get("patch_embed"), get("class_token")[0], get("pos_embed"), layers)


def save_backbone(path, backbone, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    _save_backbone_files(path, backbone, files)
    manifest = {
        "format": BACKBONE_FORMAT,
        "version": __version__,
        "config": vars(backbone.config).copy(),
        "components": ["backbone"],
        "backbone_hash": backbone_hash(backbone),
        "metadata": extra or {},
        "files": files,
    }
    return _write_manifest(path, manifest)


def load_backbone(path):
    path = Path(path)
    manifest = _read_manifest(path, BACKBONE_FORMAT)
    return _load_backbone_files(path, BackboneConfig(**manifest["config"]))


def _save_adapters(path, adapters, files, prefix):
    path.mkdir(parents=True, exist_ok=True)
    for l in range(adapters.num_layers):
        for tag, mat in (
            ("ak", adapters.key[l].A),
            ("bk", adapters.key[l].B),
            ("av", adapters.value[l].A),
            ("bv", adapters.value[l].B),
        ):
            name = f"adapters.layer{l}.{tag}.mat"
            files[f"{prefix}{name}"] = save_matrix(path / name, mat)


def _load_adapters(path, num_layers):
    get = lambda l, tag: load_matrix(path / f"adapters.layer{l}.{tag}.mat")
    return AdapterSet(
        [AdapterPair(get(l, "ak"), get(l, "bk")) for l in range(num_layers)],
        [AdapterPair(get(l, "av"), get(l, "bv")) for l in range(num_layers)],
    )


def save_model(path, backbone, base_result, extra=None):
    """Backbone, both adapter sets and classifiers, merged updates, prototypes and merge report."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    _save_backbone_files(path, backbone, files)
    for l, (dk, dv) in enumerate(base_result.merged.deltas()):
        files[f"merged.layer{l}.dk.mat"] = save_matrix(path / f"merged.layer{l}.dk.mat", dk)
        files[f"merged.layer{l}.dv.mat"] = save_matrix(path / f"merged.layer{l}.dv.mat", dv)
    components = ["backbone", "merged", "prototypes"]
    classifiers = {}
    for tag, adapters, clf in (
        ("d", base_result.adapters_d, base_result.clf_d),
        ("g", base_result.adapters_g, base_result.clf_g),
    ):
        if adapters is None:
            continue
        _save_adapters(path / tag, adapters, files, f"{tag}/")
        files[f"{tag}/classifier.mat"] = save_matrix(path / tag / "classifier.mat", clf.W)
        classifiers[tag] = {"s": clf.s, "m": clf.m}
        components.append(f"adapters_{tag}")
    files["prototypes.mat"] = save_matrix(path / "prototypes.mat", base_result.base_prototypes)
    if base_result.merge_report:
        (path / "merge_report.json").write_text(dumps_merge_report(base_result.merge_report))
        files["merge_report.json"] = sha256_file(path / "merge_report.json")
        components.append("merge_report")
    manifest = {
        "format": MODEL_FORMAT,
        "version": __version__,
        "config": vars(backbone.config).copy(),
        "components": components,
        "base_classes": [int(c) for c in base_result.base_classes],
        "classifiers": classifiers,
        "backbone_hash": backbone_hash(backbone),
        "metadata": extra or {},
        "files": files,
    }
    return _write_manifest(path, manifest)


def load_model(path):
    """Returns ``(backbone, BaseTrainResult, manifest)``."""
    from .protocol import BaseTrainResult

    path = Path(path)
    manifest = _read_manifest(path, MODEL_FORMAT)
    cfg = BackboneConfig(**manifest["config"])
    backbone = _load_backbone_files(path, cfg)
    L = cfg.num_layers
    merged = MergedAdapterSet(
        [load_matrix(path / f"merged.layer{l}.dk.mat") for l in range(L)],
        [load_matrix(path / f"merged.layer{l}.dv.mat") for l in range(L)],
    )
    loaded = {}
    for tag, hp in manifest["classifiers"].items():
        W = load_matrix(path / tag / "classifier.mat")
        loaded[tag] = (_load_adapters(path / tag, L), CosineClassifier(W, hp["s"], hp["m"]))
    report = []
    if (path / "merge_report.json").is_file():
        report = loads_merge_report((path / "merge_report.json").read_text())
    ad_d, clf_d = loaded["d"]
    ad_g, clf_g = loaded.get("g", (None, None))
    result = BaseTrainResult(
        manifest["base_classes"], ad_d, clf_d, ad_g, clf_g, merged, load_matrix(path / "prototypes.mat"), report
    )
    return backbone, result, manifest
