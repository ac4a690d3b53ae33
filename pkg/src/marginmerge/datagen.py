"""Seeded synthetic class-conditional patch data and its on-disk fixture format.

Templates are built in two layers. A *coarse* template gives every patch one
of ``num_parts`` shared unit "part" vectors (or i.i.d. Gaussian values when
``num_parts == 0``), scaled so two coarse templates sit ``class_separation``
apart on average. Coarse templates are projected off a shared rank
``fine_rank`` subspace U, and each class adds a *fine* offset
``fine_scale * U w`` with a random unit ``w``.

The first ``parent_classes`` FSCIL classes have their own coarse template
and no fine offset. Every later FSCIL class copies a random parent and
differs from it only along U, so telling new classes apart needs exactly the
directions base training is free to treat as noise. Within-class variation
is isotropic noise plus an extra ``nuisance_scale`` component along U (both
scaled by ``noise_sigma``). Pretext classes have their own coarse templates
and a smaller nuisance, so pretraining learns to keep U.

FSCIL classes use ids ``0 .. num_classes-1``; pretext classes continue from
``num_classes``. The two template families come from independent RNG
substreams.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CorruptionError, InputError
from .numerics import SeededRng, load_matrix, save_matrix, sha256_file

SPLITS = ("train", "test", "pretext_train", "pretext_test")
FORMAT = "marginmerge-fixture/1"


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 40
    samples_per_class_train: int = 60
    samples_per_class_test: int = 30
    num_patches: int = 16
    patch_dim: int = 4
    class_separation: float = 6.0
    noise_sigma: float = 1.0
    pretext_classes: int = 100
    samples_per_class_pretext: int = 150
    num_parts: int = 8
    # FSCIL classes at or above this id are fine-grained children of a lower id
    parent_classes: int = 20
    fine_rank: int = 8
    fine_scale: float = 3.0
    nuisance_scale: float = 1.0
    pretext_nuisance_scale: float = 0.5

    def __post_init__(self):
        counts = ("num_classes", "samples_per_class_train", "samples_per_class_test", "num_patches", "patch_dim")
        for name in counts:
            if int(getattr(self, name)) <= 0:
                raise InputError(f"{name} must be positive")
        for name in ("pretext_classes", "samples_per_class_pretext", "parent_classes", "fine_rank"):
            if int(getattr(self, name)) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.num_parts == 1 or self.num_parts < 0:
            raise InputError("num_parts must be 0 (i.i.d. templates) or at least 2")
        for name in ("class_separation", "noise_sigma", "fine_scale", "nuisance_scale", "pretext_nuisance_scale"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.fine_rank > self.input_dim:
            raise InputError("fine_rank cannot exceed num_patches * patch_dim")
        if self.parent_classes > self.num_classes:
            raise InputError("parent_classes cannot exceed num_classes")
        if 0 < self.parent_classes < self.num_classes and self.fine_rank == 0:
            raise InputError("child classes need fine_rank > 0 to differ from their parents")

    @property
    def input_dim(self):
        return self.num_patches * self.patch_dim

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown synthetic spec keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(str(exc)) from exc


@dataclass
class DatasetFixture:
    spec: SyntheticSpec
    seed: int
    splits: dict  # name -> (samples (n, D), labels (n,) int64)

    def __eq__(self, other):
        if not isinstance(other, DatasetFixture):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.seed == other.seed
            and all(
                np.array_equal(self.splits[s][0], other.splits[s][0])
                and np.array_equal(self.splits[s][1], other.splits[s][1])
                for s in SPLITS
            )
        )


def _parts(spec, rng):
    parts = rng.substream("parts").normal((spec.num_parts, spec.patch_dim))
    return parts / np.linalg.norm(parts, axis=1, keepdims=True)


def _coarse(spec, rng, ids, parts):
    if parts is None:
        per_coord = spec.class_separation / math.sqrt(2.0 * spec.input_dim)
        return {c: per_coord * rng.substream(c).normal(spec.input_dim) for c in ids}
    # expected squared distance between two unit parts is 2, and two classes
    # share the part at a position with probability 1/K
    K = spec.num_parts
    scale = spec.class_separation / math.sqrt(2.0 * spec.num_patches * (1.0 - 1.0 / K))
    out = {}
    for c in ids:
        choice = np.floor(rng.substream(c).uniform(spec.num_patches) * K).astype(np.int64)
        out[c] = scale * parts[choice].reshape(-1)
    return out


def _fine_basis(spec, rng):
    q, _ = np.linalg.qr(rng.substream("fine_basis").normal((spec.input_dim, spec.fine_rank)))
    return q.T  # (rank, D), orthonormal rows


def _fine_offset(spec, rng, U):
    if spec.fine_rank == 0 or spec.fine_scale == 0:
        return 0.0
    w = rng.normal(spec.fine_rank)
    return spec.fine_scale * (w / np.linalg.norm(w)) @ U


def _family(spec, rng, ids, parts, U, parent_classes=0):
    coarse = _coarse(spec, rng.substream("coarse"), ids, parts)
    out = {}
    for c in ids:
        if parent_classes and c < parent_classes:
            # parents sit at the origin of U, so U is pure nuisance for them
            out[c] = coarse[c] - (coarse[c] @ U.T) @ U
            continue
        if parent_classes:
            parent = int(rng.substream("parent", c).uniform() * parent_classes)
            t = out[parent]
        else:
            t = coarse[c] - (coarse[c] @ U.T) @ U
        out[c] = t + _fine_offset(spec, rng.substream("fine", c), U)
    return out


def _all_templates(spec, seed):
    rng = SeededRng(seed, "datagen")
    parts = _parts(spec, rng) if spec.num_parts else None
    U = _fine_basis(spec, rng)
    fscil_ids = list(range(spec.num_classes))
    pretext_ids = list(range(spec.num_classes, spec.num_classes + spec.pretext_classes))
    parents = spec.parent_classes if spec.parent_classes < spec.num_classes else 0
    fscil = _family(spec, rng.substream("fscil_templates"), fscil_ids, parts, U, parents)
    pretext = _family(spec, rng.substream("pretext_templates"), pretext_ids, parts, U)
    return rng, U, fscil, pretext


def _draw(spec, template, U, nuisance, rng, n):
    x = template[None, :] + spec.noise_sigma * rng.normal((n, spec.input_dim))
    if spec.fine_rank and nuisance:
        x = x + spec.noise_sigma * nuisance * rng.normal((n, spec.fine_rank)) @ U
    return x


def generate(spec, seed):
    rng, U, fscil, pretext = _all_templates(spec, seed)
    templates = {**fscil, **pretext}
    splits = {}
    for split, ids, n, nuisance in (
        ("train", fscil, spec.samples_per_class_train, spec.nuisance_scale),
        ("test", fscil, spec.samples_per_class_test, spec.nuisance_scale),
        ("pretext_train", pretext, spec.samples_per_class_pretext, spec.pretext_nuisance_scale),
        ("pretext_test", pretext, spec.samples_per_class_test, spec.pretext_nuisance_scale),
    ):
        ids = sorted(ids)
        xs = [_draw(spec, templates[c], U, nuisance, rng.substream(split, c), n) for c in ids]
        ys = [np.full(n, c, dtype=np.int64) for c in ids]
        if xs and n:
            splits[split] = (np.concatenate(xs), np.concatenate(ys))
        else:
            splits[split] = (np.zeros((0, spec.input_dim)), np.zeros(0, dtype=np.int64))
    return DatasetFixture(spec, int(seed), splits)


def class_templates(spec, seed):
    """Template per class id, FSCIL and pretext alike (for oracles)."""
    _, _, fscil, pretext = _all_templates(spec, seed)
    return {**fscil, **pretext}


def save_fixture(fixture, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for split in SPLITS:
        x, y = fixture.splits[split]
        for kind, mat in (("samples", x), ("labels", y.astype(np.float64)[None, :])):
            name = f"{split}.{kind}.mat"
            checksums[name] = save_matrix(path / name, mat)
    manifest = {"format": FORMAT, "spec": asdict(fixture.spec), "seed": fixture.seed, "checksums": checksums}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_fixture(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no fixture manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{mpath}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CorruptionError(f"{mpath}: unsupported fixture format {manifest.get('format')!r}")
    for name, digest in manifest["checksums"].items():
        f = path / name
        if not f.is_file():
            raise FileNotFoundError(f"fixture file missing: {f}")
        if sha256_file(f) != digest:
            raise CorruptionError(f"checksum mismatch for {f}")
    spec = SyntheticSpec.from_dict(manifest["spec"])
    splits = {}
    for split in SPLITS:
        x = load_matrix(path / f"{split}.samples.mat")
        y = load_matrix(path / f"{split}.labels.mat")
        if y.shape[0] != 1 or y.shape[1] != x.shape[0]:
            raise CorruptionError(f"{split}: labels do not match samples")
        splits[split] = (x, y[0].astype(np.int64))
    return DatasetFixture(spec, int(manifest["seed"]), splits)
