import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marginmerge.datagen import SPLITS, SyntheticSpec, _fine_basis, class_templates, generate, load_fixture, save_fixture
from marginmerge.errors import CorruptionError, InputError
from marginmerge.numerics import SeededRng

TINY = dict(num_classes=6, samples_per_class_train=5, samples_per_class_test=3, num_patches=4, patch_dim=2,
            pretext_classes=3, samples_per_class_pretext=4, parent_classes=3, fine_rank=2)


def test_shapes_and_label_ranges():
    fx = generate(SyntheticSpec(**TINY), 0)
    x, y = fx.splits["train"]
    assert x.shape == (30, 8) and y.dtype == np.int64
    assert sorted(set(y)) == list(range(6))
    px, py = fx.splits["pretext_train"]
    assert px.shape == (12, 8)
    assert set(py) == {6, 7, 8}
    assert not set(py) & set(y)


def test_zero_noise_gives_templates():
    spec = SyntheticSpec(**TINY, noise_sigma=0.0)
    fx = generate(spec, 3)
    temps = class_templates(spec, 3)
    for split in SPLITS:
        x, y = fx.splits[split]
        for row, c in zip(x, y):
            np.testing.assert_array_equal(row, temps[int(c)])


def test_determinism():
    a = generate(SyntheticSpec(**TINY), 5)
    b = generate(SyntheticSpec(**TINY), 5)
    assert a == b
    for s in SPLITS:
        assert a.splits[s][0].tobytes() == b.splits[s][0].tobytes()
    assert generate(SyntheticSpec(**TINY), 6) != a


def test_nearest_template_oracle():
    spec = SyntheticSpec(class_separation=6.0, noise_sigma=0.05)
    fx = generate(spec, 1)
    temps = class_templates(spec, 1)
    T = np.stack([temps[c] for c in range(spec.num_classes)])
    x, y = fx.splits["test"]
    d = ((x[:, None, :] - T[None]) ** 2).sum(-1)
    assert np.mean(np.argmin(d, axis=1) == y) > 0.99


def test_children_differ_from_parents_only_in_fine_subspace():
    spec = SyntheticSpec(**TINY, noise_sigma=0.0)
    temps = class_templates(spec, 2)
    U = _fine_basis(spec, SeededRng(2, "datagen"))
    off = lambda t: t - (t @ U.T) @ U
    base = np.stack([temps[c] for c in range(3)])
    np.testing.assert_allclose(base @ U.T, 0.0, atol=1e-12)
    for c in range(3, 6):
        gaps = np.linalg.norm(base - off(temps[c]), axis=1)
        assert np.min(gaps) <= 1e-12  # equals some parent outside U
        assert np.min(np.linalg.norm(base - temps[c], axis=1)) == pytest.approx(spec.fine_scale)


def test_train_and_test_samples_disjoint():
    fx = generate(SyntheticSpec(**TINY), 0)
    tr = {r.tobytes() for r in fx.splits["train"][0]}
    te = {r.tobytes() for r in fx.splits["test"][0]}
    assert not tr & te


@pytest.mark.parametrize(
    "bad",
    [
        {"num_classes": 0},
        {"samples_per_class_train": -1},
        {"noise_sigma": -1.0},
        {"num_parts": 1},
        {"fine_rank": 0},
        {"parent_classes": 7},
    ],
)
def test_invalid_spec(bad):
    with pytest.raises(InputError):
        SyntheticSpec(**{**TINY, **bad})


def test_from_dict_rejects_unknown_keys():
    assert SyntheticSpec.from_dict(TINY) == SyntheticSpec(**TINY)
    with pytest.raises(InputError):
        SyntheticSpec.from_dict({"num_clases": 4})


def test_roundtrip(tmp_path):
    fx = generate(SyntheticSpec(**TINY), 9)
    manifest = save_fixture(fx, tmp_path / "fx")
    assert manifest["seed"] == 9
    back = load_fixture(tmp_path / "fx")
    assert back == fx
    for s in SPLITS:
        assert back.splits[s][0].tobytes() == fx.splits[s][0].tobytes()
        assert back.splits[s][1].tobytes() == fx.splits[s][1].tobytes()
    assert json.loads((tmp_path / "fx" / "manifest.json").read_text())["spec"]["num_classes"] == 6


def test_truncated_or_missing_files(tmp_path):
    save_fixture(generate(SyntheticSpec(**TINY), 0), tmp_path / "fx")
    f = tmp_path / "fx" / "train.samples.mat"
    f.write_bytes(f.read_bytes()[:-3])
    with pytest.raises(CorruptionError):
        load_fixture(tmp_path / "fx")
    f.unlink()
    with pytest.raises(FileNotFoundError):
        load_fixture(tmp_path / "fx")
    with pytest.raises(FileNotFoundError):
        load_fixture(tmp_path / "nowhere")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_any_seed(tmp_path_factory, seed):
    fx = generate(SyntheticSpec(**TINY), seed)
    path = tmp_path_factory.mktemp("fx")
    save_fixture(fx, path)
    assert load_fixture(path) == fx
