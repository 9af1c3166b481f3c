import struct
from collections import Counter

import numpy as np
import pytest

from agrp.data import (
    LabeledImage,
    Truth,
    gen_synthetic,
    inject_noise,
    load_dataset,
    load_idx,
    read_idx_images,
    save_dataset,
    write_idx,
)
from agrp.errors import ConfigurationError, ConsistencyError, DomainError, FormatError, TruncatedFileError


def clean_fragment(n, classes, side=4, seed=0, label_offset=0):
    rng = np.random.default_rng(seed)
    return [
        LabeledImage(i, rng.random((side, side, 1)), i % classes + label_offset, Truth.CORRECT, i % classes + label_offset)
        for i in range(n)
    ]


def test_clean_generation():
    ds = gen_synthetic(3, 20, xi=0.0, seed=1)
    assert all(im.truth is Truth.CORRECT for im in ds.train)
    assert len(ds.test) == 30 and len(ds.negatives) == 20


def test_noise_split_per_class():
    ds = gen_synthetic(5, 200, xi=0.4, seed=1)
    for y in range(5):
        kinds = Counter(im.truth for im in ds.train if im.given_label == y)
        assert abs(kinds[Truth.CORRECT] - 120) <= 1
        assert abs(kinds[Truth.CROSS_CATEGORY] - 40) <= 1
        assert abs(kinds[Truth.CROSS_DOMAIN] - 40) <= 1
    ds.check()


def test_generation_is_deterministic():
    a, b = gen_synthetic(3, 10, xi=0.3, seed=7), gen_synthetic(3, 10, xi=0.3, seed=7)
    for split in ("train", "test", "negatives"):
        for x, y in zip(getattr(a, split), getattr(b, split)):
            assert x.pixels.tobytes() == y.pixels.tobytes()
            assert (x.given_label, x.truth, x.true_label, x.signature_box) == (y.given_label, y.truth, y.true_label, y.signature_box)


def test_generation_guards():
    with pytest.raises(DomainError):
        gen_synthetic(3, 10, xi=1.0)
    with pytest.raises(ConfigurationError):
        gen_synthetic(1, 10)
    with pytest.raises(ConfigurationError):
        gen_synthetic(3, 10, image_side=8)


def test_signatures_are_separated():
    ds = gen_synthetic(6, 4, seed=3)
    flat = ds.signatures.reshape(6, -1)
    d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
    assert d[~np.eye(6, dtype=bool)].min() >= 0.5


def test_signature_box_holds_the_class_pattern():
    ds = gen_synthetic(3, 10, xi=0.4, seed=2)
    for im in ds.train:
        if im.truth is Truth.CROSS_DOMAIN:
            assert im.signature_box is None
            continue
        r, c, h, w = im.signature_box
        np.testing.assert_array_equal(im.pixels[r : r + h, c : c + w, 0], ds.signatures[im.true_label])


def test_box_pixels_are_the_only_deterministic_structure():
    # across many correct images, the box content has zero variance per class
    ds = gen_synthetic(2, 200, seed=4)
    for y in range(2):
        patches = [im.pixels[im.signature_box[0] : im.signature_box[0] + 3, im.signature_box[1] : im.signature_box[1] + 3] for im in ds.train if im.given_label == y]
        assert np.var(np.stack(patches), axis=0).max() == 0.0
    background = np.stack([im.pixels for im in ds.negatives])
    assert background.var(axis=0).min() > 0.01


def test_idx_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(2, 4, 4), dtype=np.uint8)
    write_idx(tmp_path / "i.idx", tmp_path / "l.idx", images, [0, 1])
    assert read_idx_images(tmp_path / "i.idx").tobytes() == images.tobytes()
    frag = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert [im.given_label for im in frag] == [0, 1]
    np.testing.assert_array_equal(np.round(frag[1].pixels[..., 0] * 255).astype(np.uint8), images[1])


def test_idx_wrong_magic_reports_it(tmp_path):
    write_idx(tmp_path / "i.idx", tmp_path / "l.idx", np.zeros((1, 2, 2)), [0])
    with pytest.raises(FormatError, match="0x00000801"):
        load_idx(tmp_path / "l.idx", tmp_path / "l.idx")


def test_idx_empty_and_truncated(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(OSError):
        read_idx_images(tmp_path / "empty")
    (tmp_path / "short").write_bytes(struct.pack(">IIII", 0x803, 2, 4, 4) + b"\x00" * 10)
    with pytest.raises(TruncatedFileError):
        read_idx_images(tmp_path / "short")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i.idx", tmp_path / "l.idx", np.zeros((2, 2, 2)), [0, 1])
    write_idx(tmp_path / "j.idx", tmp_path / "m.idx", np.zeros((3, 2, 2)), [0, 1, 1])
    with pytest.raises(ConsistencyError):
        load_idx(tmp_path / "i.idx", tmp_path / "m.idx")


def test_injection_without_noise_is_identity():
    clean = clean_fragment(10, 2)
    ds = inject_noise(clean, 0.0, [], seed=0)
    assert all(im.truth is Truth.CORRECT for im in ds.train)
    assert [im.given_label for im in ds.train] == [im.given_label for im in clean]


def test_injection_counts():
    ds = inject_noise(clean_fragment(100, 4), 0.6, clean_fragment(10, 2, label_offset=10), seed=3)
    counts = Counter(im.truth for im in ds.train)
    assert counts == {Truth.CROSS_CATEGORY: 30, Truth.CROSS_DOMAIN: 30, Truth.CORRECT: 40}
    assert len(ds.train) == 100


@pytest.mark.parametrize("seed", range(10))
def test_relabelled_images_never_keep_their_label(seed):
    clean = clean_fragment(60, 3)
    ds = inject_noise(clean, 0.5, clean_fragment(5, 1, label_offset=3), seed=seed)
    for before, after in zip(clean, ds.train):
        if after.truth is Truth.CROSS_CATEGORY:
            assert after.given_label != before.given_label
            assert after.true_label == before.given_label
            assert after.pixels is before.pixels
        elif after.truth is Truth.CROSS_DOMAIN:
            assert after.given_label == before.given_label
            assert after.true_label is None


def test_injection_guards():
    with pytest.raises(ConfigurationError):
        inject_noise(clean_fragment(10, 2), 0.2, [], seed=0)
    with pytest.raises(ConfigurationError):
        inject_noise(clean_fragment(10, 2), 0.2, clean_fragment(3, 2), seed=0)


def test_dataset_directory_round_trip(tmp_path):
    ds = gen_synthetic(3, 8, xi=0.25, seed=5)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.class_count == 3 and back.noise_level == 0.25
    for split in ("train", "test", "negatives"):
        for x, y in zip(getattr(ds, split), getattr(back, split)):
            assert x.pixels.tobytes() == y.pixels.tobytes()
            assert (x.id, x.given_label, x.truth, x.true_label, x.signature_box) == (y.id, y.given_label, y.truth, y.true_label, y.signature_box)
    save_dataset(back, tmp_path / "e")
    assert (tmp_path / "d/manifest.json").read_bytes() == (tmp_path / "e/manifest.json").read_bytes()
