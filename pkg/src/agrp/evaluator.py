"""Single-image inference, accuracy, training-set re-ranking and attention maps."""

from __future__ import annotations

import csv
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as att
from .data import Truth, stack_pixels
from .errors import CapabilityError, DimensionError, DomainError, FormatError, TruncatedFileError
from .model import attention_params, extractor_forward, forward_groups

EVAL_BATCH = 256


def _check_image_shape(model, pixels):
    if tuple(pixels.shape[-3:]) != tuple(model.image_shape):
        raise DimensionError(f"image shape {pixels.shape[-3:]} does not match model input {model.image_shape}")


def predict_batch(model, pixels) -> np.ndarray:
    """Class scores for a stack of single images ``(N, S, S, cin) -> (N, C)``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    _check_image_shape(model, pixels)
    cfg = model.config
    out = []
    for i in range(0, pixels.shape[0], EVAL_BATCH):
        chunk = pixels[i : i + EVAL_BATCH, None]
        logits, _ = forward_groups(model.params, cfg.extractor, chunk, cfg.uses_attention, cfg.epsilon)
        out.append(logits)
    if not out:
        return np.zeros((0, model.class_count))
    return np.concatenate(out)


def predict(model, image) -> np.ndarray:
    """Class scores for one image; the grouping module is not used at test time."""
    pixels = getattr(image, "pixels", image)
    return predict_batch(model, np.asarray(pixels)[None])[0]


def accuracy_from_scores(scores, labels) -> float:
    scores = np.asarray(scores)
    if scores.shape[0] == 0:
        raise DomainError("accuracy of an empty set is undefined")
    # np.argmax returns the lowest index among ties
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


def accuracy(model, images) -> float:
    if not images:
        raise DomainError("accuracy of an empty set is undefined")
    scores = predict_batch(model, stack_pixels(images))
    return accuracy_from_scores(scores, [im.true_label for im in images])


# ----------------------------------------------------------------------------
# re-ranking


def average_precision(relevance) -> float:
    """Mean of precision@r over the ranks r holding a relevant item.

    ``relevance`` is a 0/1 sequence already in rank order.  The sum is
    kept as an exact fraction and rounded once, so the result does not
    depend on summation order.
    """
    rel = np.asarray(relevance, dtype=bool)
    ranks = np.flatnonzero(rel) + 1
    if len(ranks) == 0:
        raise DomainError("average precision needs at least one positive")
    total = sum(Fraction(hits, int(rank)) for hits, rank in enumerate(ranks, start=1))
    return float(total / len(ranks))


@dataclass
class RankedItem:
    image_id: int
    score: float
    truth: Truth

    @property
    def relevant(self) -> bool:
        return self.truth is Truth.CORRECT


@dataclass
class RankingResult:
    rankings: dict[int, list[RankedItem]]
    ap: dict[int, float]
    map: float
    skipped_classes: list[int] = field(default_factory=list)

    @property
    def warning_count(self) -> int:
        return len(self.skipped_classes)


def rank_class(items: list[RankedItem]) -> list[RankedItem]:
    """Descending score, ties by ascending image id."""
    return sorted(items, key=lambda it: (-it.score, it.image_id))


def rerank_from_scores(train, scores, class_count) -> RankingResult:
    """Rank each class's training images by their score for that class."""
    rankings, aps, skipped = {}, {}, []
    for c in range(class_count):
        items = [
            RankedItem(im.id, float(scores[i, c]), im.truth)
            for i, im in enumerate(train)
            if im.given_label == c
        ]
        ranked = rank_class(items)
        rankings[c] = ranked
        if not any(it.relevant for it in ranked):
            skipped.append(c)
            continue
        aps[c] = average_precision([it.relevant for it in ranked])
    mean_ap = float(np.mean(list(aps.values()))) if aps else float("nan")
    return RankingResult(rankings, aps, mean_ap, skipped)


def rerank(model, train) -> RankingResult:
    scores = predict_batch(model, stack_pixels(train))
    return rerank_from_scores(train, scores, model.class_count)


RANKING_HEADER = ("class", "rank", "image_id", "score", "truth")
SUMMARY_HEADER = ("class", "ap")


def write_ranking_csv(result: RankingResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RANKING_HEADER)
        for c in sorted(result.rankings):
            for r, it in enumerate(result.rankings[c], start=1):
                w.writerow([c, r, it.image_id, repr(it.score), it.truth.value])


def write_summary_csv(result: RankingResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        for c in sorted(result.ap):
            w.writerow([c, repr(result.ap[c])])
        w.writerow(["MAP", repr(result.map)])


# ----------------------------------------------------------------------------
# attention maps


def attention_maps(model, pixels) -> np.ndarray:
    """Normalized attention ``a`` of single images, ``(N, d, d)``; each map sums to 1."""
    if not model.config.uses_attention:
        raise CapabilityError(f"variant {model.config.variant} has no attention module")
    pixels = np.asarray(pixels, dtype=np.float64)
    _check_image_shape(model, pixels)
    feats, _ = extractor_forward(model.params, model.config.extractor, pixels)
    trace = att.attention_forward(feats[:, None], attention_params(model.params), model.config.epsilon)
    return trace.a[:, 0]


def rescale_unit(a) -> np.ndarray:
    """Min-max rescale to [0, 1]; a flat map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def attention_heatmap(model, image) -> np.ndarray:
    pixels = getattr(image, "pixels", image)
    return rescale_unit(attention_maps(model, np.asarray(pixels)[None])[0])


def quantize(heatmap) -> np.ndarray:
    return np.round(np.clip(heatmap, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, heatmap) -> np.ndarray:
    """Binary P5 greymap with maxval 255; returns the quantized bytes written."""
    q = quantize(heatmap)
    if q.ndim != 2:
        raise DimensionError(f"heatmap must be 2-D, got shape {q.shape}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        f.write(q.tobytes())
    return q


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: PGM header ended early")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"{path}: PGM magic {fields[0]!r}, expected b'P5'")
    width, height, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1
    body = data[pos : pos + width * height]
    if len(body) != width * height:
        raise TruncatedFileError(f"{path}: expected {width * height} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def box_mask(spec, d, box) -> np.ndarray:
    """Cells whose receptive-field centre falls inside a ``(row, col, h, w)`` pixel box."""
    centers = spec.cell_centers(d)
    r, c, bh, bw = box
    rows = (centers >= r) & (centers < r + bh)
    cols = (centers >= c) & (centers < c + bw)
    return rows[:, None] & cols[None, :]


def localization_score(model, images) -> float:
    """Mean attention mass on cells inside each image's signature box."""
    images = [im for im in images]
    if not images:
        raise DomainError("localization score of an empty set is undefined")
    if any(im.signature_box is None for im in images):
        raise DomainError("every image needs a signature_box")
    a = attention_maps(model, stack_pixels(images))
    d = a.shape[-1]
    masses = [a[i][box_mask(model.config.extractor, d, im.signature_box)].sum() for i, im in enumerate(images)]
    return float(np.mean(masses))


def uniform_baseline(model, images) -> float:
    """Localization score of perfectly uniform attention: mean in-box cell fraction."""
    d = model.config.extractor.output_side(model.image_shape[0])
    fracs = [box_mask(model.config.extractor, d, im.signature_box).mean() for im in images]
    return float(np.mean(fracs))
