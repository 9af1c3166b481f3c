"""SGD training over grouped instances for the six ablation variants."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import NoisyDataset, stack_pixels
from .errors import ConfigurationError, DivergenceError, EvaluationError
from .grouping import MAX_GROUP_SIZE, plan_epoch
from .model import ExtractorSpec, backward_groups, forward_groups, init_params

log = logging.getLogger(__name__)

# variant -> (random grouping, attention, hinge regularizer)
VARIANTS = {
    "AP": (False, False, False),
    "RGT": (True, False, False),
    "AP_AT": (False, True, False),
    "RGT_AT": (True, True, False),
    "AP_AT_R": (False, True, True),
    "RGT_AT_R": (True, True, True),
}

# the no-grouping counterpart used for group-size-1 sweep cells
UNGROUPED = {"RGT": "AP", "RGT_AT": "AP_AT", "RGT_AT_R": "AP_AT", "AP": "AP", "AP_AT": "AP_AT", "AP_AT_R": "AP_AT_R"}


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "RGT_AT_R"
    group_size: int = 2
    lam: float = 0.1
    epsilon: float = 0.1
    lr0: float = 0.001
    lr_drop_epoch: int = 5
    lr_drop_factor: float = 0.1
    epochs: int = 15
    batch_instances: int = 16
    negatives_per_epoch: int = 0
    seed: int = 0
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)

    @property
    def grouped(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def uses_attention(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def uses_regularizer(self) -> bool:
        return VARIANTS[self.variant][2]

    def resolved(self) -> "TrainConfig":
        """Validated copy with the variant rules applied.

        AP-family variants are forced to group size 1, variants without the
        regularizer to zero negatives.  RGT-family variants need K >= 2.
        """
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        cfg = self
        if not cfg.grouped:
            cfg = dataclasses.replace(cfg, group_size=1)
        elif not 2 <= cfg.group_size <= MAX_GROUP_SIZE:
            raise ConfigurationError(f"{cfg.variant} needs group size in [2, {MAX_GROUP_SIZE}], got {cfg.group_size}")
        if not cfg.uses_regularizer:
            cfg = dataclasses.replace(cfg, negatives_per_epoch=0)
        if cfg.lam < 0 or cfg.epsilon < 0:
            raise ConfigurationError("lambda and epsilon must be non-negative")
        if cfg.lr0 <= 0 or cfg.lr_drop_epoch < 1 or cfg.lr_drop_factor <= 0:
            raise ConfigurationError("learning-rate schedule must be positive")
        if cfg.epochs < 0 or cfg.batch_instances < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_instances >= 1")
        return cfg

    def lr_at(self, epoch_index: int) -> float:
        return self.lr0 * self.lr_drop_factor ** (epoch_index // self.lr_drop_epoch)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["extractor"] = self.extractor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("extractor"), dict):
            d["extractor"] = ExtractorSpec.from_dict(d["extractor"])
        return cls(**d)


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    config: TrainConfig
    class_count: int
    image_shape: tuple[int, ...]
    step: int = 0

    def copy(self) -> "ModelState":
        return dataclasses.replace(self, params={k: v.copy() for k, v in self.params.items()})


@dataclass
class EpochRecord:
    epoch: int
    l_class: float
    r_term: float
    total: float
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)


def epoch_seed(seed: int, epoch_index: int) -> int:
    """Independent but reproducible per-epoch seed."""
    return int(np.random.SeedSequence([int(seed), int(epoch_index)]).generate_state(1)[0])


def init_model(config: TrainConfig, class_count: int, image_shape, seed=None) -> ModelState:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    params = init_params(config.extractor, class_count, image_shape[-1], rng)
    return ModelState(params, config, class_count, tuple(image_shape))


def check_dataset(dataset: NoisyDataset, config: TrainConfig) -> None:
    if dataset.class_count < 2:
        raise ConfigurationError(f"training needs at least 2 classes, dataset has {dataset.class_count}")
    counts = np.bincount([im.given_label for im in dataset.train], minlength=dataset.class_count)
    for c, n in enumerate(counts):
        if n < config.group_size:
            raise ConfigurationError(f"class {c} has {n} images, fewer than group size {config.group_size}")


class _PixelCache:
    """Stacked pixel arrays of a dataset, built once per dataset object."""

    def __init__(self, dataset):
        self.train = stack_pixels(dataset.train)
        self.negatives = stack_pixels(dataset.negatives) if dataset.negatives else None


def _pixels(dataset) -> _PixelCache:
    cache = getattr(dataset, "_pixel_cache", None)
    if cache is None:
        cache = _PixelCache(dataset)
        dataset._pixel_cache = cache
    return cache


def instance_loss(model: ModelState, images, labels, deltas):
    """Objective of one minibatch and its gradients.

    ``images`` is ``(B, K, S, S, cin)``; ``labels`` holds class indices for
    positive instances (ignored where ``deltas == -1``).  Losses are
    averaged over all ``B`` instances: negatives contribute only through
    the hinge term.
    """
    cfg = model.config
    params = model.params
    B = images.shape[0]
    logits, cache = forward_groups(params, cfg.extractor, images, cfg.uses_attention, cfg.epsilon)
    pos = deltas > 0
    grad_logits = np.zeros_like(logits)
    l_class = 0.0
    ce_each = np.zeros(B)
    if pos.any():
        ce, g = losses.softmax_cross_entropy(logits[pos], labels[pos])
        ce_each[pos] = ce
        l_class = float(ce.sum()) / B
        grad_logits[pos] = g / B
    r_term = 0.0
    grad_u = None
    r_each = np.zeros(B)
    if cfg.uses_regularizer:
        r, gu = losses.attention_hinge(cache.trace.u, deltas)
        r_each = r
        r_term = float(r.sum()) / B
        grad_u = gu * (cfg.lam / B)
    breakdown = losses.combine(l_class, r_term, cfg.lam if cfg.uses_regularizer else 0.0)
    grads = backward_groups(params, cfg.extractor, cache, grad_logits, grad_u)
    return breakdown, grads, ce_each + (cfg.lam * r_each if cfg.uses_regularizer else 0.0)


def _gather(pix: _PixelCache, instances):
    ids = np.array([inst.member_ids for inst in instances])
    deltas = np.array([inst.delta for inst in instances], dtype=np.float64)
    labels = np.array([inst.label if inst.label is not None else 0 for inst in instances])
    pos = deltas > 0
    images = np.empty(ids.shape + pix.train.shape[1:])
    if pos.any():
        images[pos] = pix.train[ids[pos]]
    if (~pos).any():
        images[~pos] = pix.negatives[ids[~pos]]
    return images, labels, deltas


def train_epoch(model: ModelState, dataset: NoisyDataset, config: TrainConfig, epoch_index: int):
    """One pass over a fresh random grouping; updates ``model`` in place."""
    check_dataset(dataset, config)
    start = time.perf_counter()
    plan = plan_epoch(dataset, config.group_size, config.negatives_per_epoch, epoch_seed(config.seed, epoch_index))
    pix = _pixels(dataset)
    lr = config.lr_at(epoch_index)
    sums = np.zeros(3)
    n_seen = 0
    insts = plan.instances
    for start_i in range(0, len(insts), config.batch_instances):
        batch = insts[start_i : start_i + config.batch_instances]
        images, labels, deltas = _gather(pix, batch)
        try:
            # overflow shows up as a non-finite loss and is reported below
            with np.errstate(over="ignore", invalid="ignore"):
                breakdown, grads, each = instance_loss(model, images, labels, deltas)
        except EvaluationError as exc:
            raise DivergenceError(
                f"non-finite forward pass at epoch {epoch_index}, batch starting at instance {start_i}: {exc}",
                epoch=epoch_index,
                instance=start_i,
            ) from exc
        if not np.isfinite(breakdown.total):
            bad = int(np.argmin(np.isfinite(each)))
            raise DivergenceError(
                f"non-finite loss at epoch {epoch_index}, instance {start_i + bad}",
                epoch=epoch_index,
                instance=start_i + bad,
            )
        for name, g in grads.items():
            model.params[name] -= lr * g
        model.step += 1
        B = len(batch)
        sums += B * np.array([breakdown.l_class, breakdown.r_term, breakdown.total])
        n_seen += B
    for name, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"parameter {name} became non-finite in epoch {epoch_index}", epoch=epoch_index)
    means = sums / max(n_seen, 1)
    record = EpochRecord(epoch_index, *(float(v) for v in means), lr, time.perf_counter() - start)
    log.debug("epoch %d: %s", epoch_index, record)
    return model, record


def train(config: TrainConfig, dataset: NoisyDataset, model: ModelState | None = None):
    config = config.resolved()
    check_dataset(dataset, config)
    if model is None:
        model = init_model(config, dataset.class_count, dataset.image_shape)
    history = TrainHistory()
    for epoch in range(config.epochs):
        model, record = train_epoch(model, dataset, config, epoch)
        history.records.append(record)
    return model, history

