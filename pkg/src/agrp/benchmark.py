"""Controlled synthetic benchmark shared by the trend checks and the README.

Every run draws a fresh dataset from its seed, trains one variant and
reports test accuracy, re-ranking MAP and (for attention variants) the
in-box attention mass next to its uniform baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .data import NoisyDataset, gen_synthetic
from .evaluator import RankingResult, accuracy, localization_score, rerank, uniform_baseline
from .model import ExtractorSpec
from .trainer import TrainConfig, train

CLASSES = 5
PER_CLASS = 200
IMAGE_SIDE = 16
BACKGROUND = 0.85

EPOCHS = 15
LR0 = 2.0
LR_DROP_EPOCH = 10
LR_DROP_FACTOR = 0.1
CHANNELS = 8

# Each optimizer step sees the same number of images whatever the group
# size, so grouped runs take group_size times fewer instances per step.
IMAGES_PER_STEP = 16
# Negatives per epoch as a fraction of the positive images, spread over groups.
NEGATIVE_RATIO = 0.2


@dataclass(frozen=True)
class RunResult:
    variant: str
    group_size: int
    noise_level: float
    seed: int
    accuracy: float
    map: float
    localization: float | None
    baseline: float | None
    seconds: float
    ranking: RankingResult | None = field(default=None, repr=False, compare=False)


def dataset(noise_level: float, seed: int) -> NoisyDataset:
    return gen_synthetic(CLASSES, PER_CLASS, IMAGE_SIDE, noise_level, seed, background=BACKGROUND)


def config(variant: str, group_size: int = 2, seed: int = 0) -> TrainConfig:
    k = group_size if variant.startswith("RGT") else 1
    return TrainConfig(
        variant=variant,
        group_size=k,
        epochs=EPOCHS,
        lr0=LR0,
        lr_drop_epoch=LR_DROP_EPOCH,
        lr_drop_factor=LR_DROP_FACTOR,
        batch_instances=max(1, IMAGES_PER_STEP // k),
        negatives_per_epoch=int(NEGATIVE_RATIO * CLASSES * PER_CLASS / k),
        seed=seed,
        extractor=ExtractorSpec(channels=CHANNELS),
    ).resolved()


def run(variant: str, seed: int, noise_level: float = 0.4, group_size: int = 2, data=None) -> RunResult:
    data = data if data is not None else dataset(noise_level, seed)
    cfg = config(variant, group_size, seed)
    start = time.perf_counter()
    model, _ = train(cfg, data)
    loc = base = None
    if cfg.uses_attention:
        clean = [im for im in data.test if im.signature_box is not None]
        loc, base = localization_score(model, clean), uniform_baseline(model, clean)
    ranking = rerank(model, data.train)
    return RunResult(
        variant,
        cfg.group_size,
        noise_level,
        seed,
        accuracy(model, data.test),
        ranking.map,
        loc,
        base,
        time.perf_counter() - start,
        ranking,
    )
