"""Datasets with known label noise.

Three sources feed :class:`NoisyDataset`:

* :func:`gen_synthetic` draws images of uniform background noise with a
  small class-specific "signature" patch stamped somewhere inside.
* :func:`load_idx` reads real images in the big-endian IDX format.
* :func:`inject_noise` corrupts a clean fragment with cross-category
  (relabelled) and cross-domain (content swapped for a distractor) noise
  in a 1:1 ratio.

Image ids are positional: ``dataset.train[i].id == i`` and likewise for
``test`` and ``negatives``.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    ConsistencyError,
    DimensionError,
    DomainError,
    FormatError,
    GenerationError,
    TruncatedFileError,
)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SIGNATURE_SIDE = 3
SIGNATURE_MIN_DISTANCE = 0.5
SIGNATURE_MAX_DRAWS = 1000


class Truth(str, enum.Enum):
    CORRECT = "correct"
    CROSS_DOMAIN = "cross_domain"
    CROSS_CATEGORY = "cross_category"


@dataclass
class LabeledImage:
    id: int
    pixels: np.ndarray  # (h, w, c_in) in [0, 1]
    given_label: int | None
    truth: Truth = Truth.CORRECT
    true_label: int | None = None
    signature_box: tuple[int, int, int, int] | None = None  # (row, col, height, width)

    def check(self, class_count: int | None = None) -> None:
        if self.truth is Truth.CORRECT and self.true_label != self.given_label:
            raise ConsistencyError(f"image {self.id}: correct but true_label != given_label")
        if self.truth is Truth.CROSS_CATEGORY:
            if self.true_label is None or self.true_label == self.given_label:
                raise ConsistencyError(f"image {self.id}: cross_category must carry a different true label")
            if class_count is not None and not 0 <= self.true_label < class_count:
                raise ConsistencyError(f"image {self.id}: true_label {self.true_label} not a valid class")
        if self.truth is Truth.CROSS_DOMAIN and self.true_label is not None:
            raise ConsistencyError(f"image {self.id}: cross_domain images have no true label")


@dataclass
class NoisyDataset:
    train: list[LabeledImage]
    negatives: list[LabeledImage]
    test: list[LabeledImage]
    class_count: int
    noise_level: float
    signatures: np.ndarray | None = field(default=None, repr=False)

    @property
    def image_shape(self) -> tuple[int, ...]:
        for split in (self.train, self.test, self.negatives):
            if split:
                return split[0].pixels.shape
        raise ConfigurationError("dataset has no images")

    def observed_noise(self) -> float:
        if not self.train:
            return 0.0
        return sum(im.truth is not Truth.CORRECT for im in self.train) / len(self.train)

    def check(self) -> None:
        for im in self.train + self.test + self.negatives:
            im.check(self.class_count)
        if any(im.truth is not Truth.CORRECT for im in self.test):
            raise ConsistencyError("test images must all be correctly labelled")
        if self.train and abs(self.observed_noise() - self.noise_level) > 1.0 / len(self.train) + 1e-12:
            raise ConsistencyError(
                f"observed noise {self.observed_noise():.4f} deviates from noise level {self.noise_level}"
            )


def stack_pixels(images) -> np.ndarray:
    return np.stack([im.pixels for im in images]) if images else np.zeros((0,))


def _noise_count(xi: float, n: int) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(xi * n + 1e-9))


# ----------------------------------------------------------------------------
# synthetic benchmark


def draw_signatures(rng, class_count, side=SIGNATURE_SIDE, min_distance=SIGNATURE_MIN_DISTANCE):
    """Binary ``side x side`` patterns with pairwise L2 distance >= ``min_distance``."""
    for _ in range(SIGNATURE_MAX_DRAWS):
        sigs = rng.integers(0, 2, size=(class_count, side, side)).astype(np.float64)
        flat = sigs.reshape(class_count, -1)
        dist = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
        off = dist[~np.eye(class_count, dtype=bool)]
        if off.size == 0 or off.min() >= min_distance:
            return sigs
    raise GenerationError(f"no {class_count} signatures with distance >= {min_distance} after {SIGNATURE_MAX_DRAWS} draws")


def _background(rng, side, amplitude):
    return rng.uniform(0.5 - amplitude / 2, 0.5 + amplitude / 2, size=(side, side, 1))


def _stamp(rng, pixels, signature):
    side = pixels.shape[0]
    k = signature.shape[0]
    r, c = (int(v) for v in rng.integers(0, side - k + 1, size=2))
    pixels[r : r + k, c : c + k, 0] = signature
    return (r, c, k, k)


def gen_synthetic(
    classes: int,
    n_per_class: int,
    image_side: int = 16,
    xi: float = 0.0,
    seed: int = 0,
    background: float = 1.0,
) -> NoisyDataset:
    """Signature-patch benchmark with a 1:1 cross-category / cross-domain split.

    ``background`` is the width of the uniform background interval centred
    on 0.5.  The total noisy count ``floor(xi * N)`` is spread as evenly as
    possible over classes.
    """
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    if image_side < 12:
        raise ConfigurationError(f"image_side must be >= 12, got {image_side}")
    if not 0.0 <= xi < 1.0:
        raise DomainError(f"noise level must lie in [0, 1), got {xi}")
    if not 0.0 <= background <= 1.0:
        raise DomainError(f"background amplitude must lie in [0, 1], got {background}")
    rng = np.random.default_rng(seed)
    sigs = draw_signatures(rng, classes)

    n_total = classes * n_per_class
    m = _noise_count(xi, n_total)
    noisy_per_class = [m // classes + (c < m % classes) for c in range(classes)]
    n_cc_total = m // 2
    cc_per_class = [n // 2 for n in noisy_per_class]
    # hand the odd halves out until the global cross-category count is met
    for c in range(classes):
        if sum(cc_per_class) >= n_cc_total:
            break
        if noisy_per_class[c] % 2:
            cc_per_class[c] += 1

    train = []
    for y in range(classes):
        n_cc = cc_per_class[y]
        n_cd = noisy_per_class[y] - n_cc
        kinds = [Truth.CROSS_CATEGORY] * n_cc + [Truth.CROSS_DOMAIN] * n_cd
        kinds += [Truth.CORRECT] * (n_per_class - len(kinds))
        kinds = [kinds[i] for i in rng.permutation(len(kinds))]
        for kind in kinds:
            pixels = _background(rng, image_side, background)
            box, true_label = None, None
            if kind is Truth.CORRECT:
                true_label = y
                box = _stamp(rng, pixels, sigs[y])
            elif kind is Truth.CROSS_CATEGORY:
                other = int(rng.integers(classes - 1))
                true_label = other + (other >= y)
                box = _stamp(rng, pixels, sigs[true_label])
            train.append(LabeledImage(len(train), pixels, y, kind, true_label, box))

    negatives = [
        LabeledImage(i, _background(rng, image_side, background), None, Truth.CROSS_DOMAIN)
        for i in range(n_per_class)
    ]
    test = []
    for y in range(classes):
        for _ in range(n_per_class // 2):
            pixels = _background(rng, image_side, background)
            box = _stamp(rng, pixels, sigs[y])
            test.append(LabeledImage(len(test), pixels, y, Truth.CORRECT, y, box))

    ds = NoisyDataset(train, negatives, test, classes, float(xi), sigs)
    ds.check()
    return ds


# ----------------------------------------------------------------------------
# IDX files


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_idx_images(path) -> np.ndarray:
    """Raw ``uint8`` array of shape ``(count, rows, cols)``."""
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, f"{path} magic"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{path}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, f"{path} header"))
        data = _read_exact(f, count * rows * cols, f"{path} pixels")
    return np.frombuffer(data, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, f"{path} magic"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{path}: label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        (count,) = struct.unpack(">I", _read_exact(f, 4, f"{path} header"))
        data = _read_exact(f, count, f"{path} labels")
    return np.frombuffer(data, dtype=np.uint8)


def write_idx(images_path, labels_path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise DimensionError(f"images must be (count, rows, cols), got shape {images.shape}")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_idx(images_path, labels_path) -> list[LabeledImage]:
    """Clean fragment: pixels scaled to [0, 1], shape ``(rows, cols, 1)``."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    return [
        LabeledImage(i, raw[i][..., None] / 255.0, int(labels[i]), Truth.CORRECT, int(labels[i]))
        for i in range(raw.shape[0])
    ]


# ----------------------------------------------------------------------------
# noise injection


def inject_noise(clean, xi, distractors, seed, test=None, negatives=None) -> NoisyDataset:
    """Corrupt ``floor(xi * n)`` of ``clean`` half by relabelling, half by content swap.

    Cross-category images keep their pixels and receive a uniformly drawn
    different label; cross-domain images keep their label and receive the
    pixels of a random distractor.  ``negatives`` defaults to the
    distractor fragment itself.
    """
    if not 0.0 <= xi < 1.0:
        raise DomainError(f"noise level must lie in [0, 1), got {xi}")
    clean = list(clean)
    distractors = list(distractors)
    if not clean:
        raise ConfigurationError("clean fragment is empty")
    class_count = max(im.given_label for im in clean) + 1
    if class_count < 2:
        raise ConfigurationError("clean fragment must contain at least 2 classes")
    clean_classes = {im.given_label for im in clean}
    overlap = clean_classes & {im.given_label for im in distractors if im.given_label is not None}
    if overlap:
        raise ConfigurationError(f"distractor labels overlap clean classes: {sorted(overlap)}")
    n = len(clean)
    m = _noise_count(xi, n)
    if m > 0 and not distractors:
        raise ConfigurationError("distractor pool is empty but noise level is positive")
    shape = clean[0].pixels.shape
    for im in distractors:
        if im.pixels.shape != shape:
            raise DimensionError(f"distractor image shape {im.pixels.shape} differs from clean {shape}")

    rng = np.random.default_rng(seed)
    picked = rng.choice(n, size=m, replace=False) if m else np.zeros(0, dtype=int)
    n_cc = m // 2
    cross_category = set(int(i) for i in picked[:n_cc])
    cross_domain = [int(i) for i in picked[n_cc:]]
    swap_for = {}
    if cross_domain:
        with_replacement = len(cross_domain) > len(distractors)
        swap = rng.choice(len(distractors), size=len(cross_domain), replace=with_replacement)
        swap_for = dict(zip(cross_domain, (int(s) for s in swap)))

    train = []
    for i, im in enumerate(clean):
        if i in cross_category:
            other = int(rng.integers(class_count - 1))
            new_label = other + (other >= im.given_label)
            train.append(LabeledImage(i, im.pixels, new_label, Truth.CROSS_CATEGORY, im.given_label, im.signature_box))
        elif i in swap_for:
            pixels = distractors[swap_for[i]].pixels
            train.append(LabeledImage(i, pixels, im.given_label, Truth.CROSS_DOMAIN, None, None))
        else:
            train.append(replace(im, id=i, truth=Truth.CORRECT, true_label=im.given_label))

    negatives = distractors if negatives is None else list(negatives)
    negatives = [LabeledImage(i, im.pixels, None, Truth.CROSS_DOMAIN) for i, im in enumerate(negatives)]
    test = [replace(im, id=i, truth=Truth.CORRECT, true_label=im.given_label) for i, im in enumerate(test or [])]
    ds = NoisyDataset(train, negatives, test, class_count, float(xi))
    ds.check()
    return ds


# ----------------------------------------------------------------------------
# directory serialization

MANIFEST = "manifest.json"
SPLITS = ("train", "test", "negatives")


def _record(im: LabeledImage) -> dict:
    return {
        "id": im.id,
        "given_label": im.given_label,
        "truth": im.truth.value,
        "true_label": im.true_label,
        "signature_box": list(im.signature_box) if im.signature_box is not None else None,
    }


def noise_summary(ds: NoisyDataset) -> dict:
    counts = {t.value: 0 for t in Truth}
    for im in ds.train:
        counts[im.truth.value] += 1
    return counts


def save_dataset(ds: NoisyDataset, directory) -> Path:
    """Write ``<split>.npy`` pixel stacks plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        images = getattr(ds, split)
        arr = stack_pixels(images) if images else np.zeros((0,) + ds.image_shape)
        np.save(directory / f"{split}.npy", arr)
    if ds.signatures is not None:
        np.save(directory / "signatures.npy", ds.signatures)
    manifest = {
        "class_count": ds.class_count,
        "noise_level": ds.noise_level,
        "image_shape": list(ds.image_shape),
        "noise_counts": noise_summary(ds),
        **{split: [_record(im) for im in getattr(ds, split)] for split in SPLITS},
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> NoisyDataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"no dataset manifest in {directory}") from exc
    splits = {}
    for split in SPLITS:
        pixels = np.load(directory / f"{split}.npy")
        records = manifest[split]
        if len(records) != pixels.shape[0]:
            raise ConsistencyError(f"{split}: {len(records)} manifest records but {pixels.shape[0]} images")
        splits[split] = [
            LabeledImage(
                r["id"],
                pixels[i],
                r["given_label"],
                Truth(r["truth"]),
                r["true_label"],
                tuple(r["signature_box"]) if r["signature_box"] is not None else None,
            )
            for i, r in enumerate(records)
        ]
    sig_path = directory / "signatures.npy"
    sigs = np.load(sig_path) if sig_path.exists() else None
    ds = NoisyDataset(
        splits["train"], splits["negatives"], splits["test"], manifest["class_count"], manifest["noise_level"], sigs
    )
    ds.check()
    return ds
