"""Experiment configuration documents for the command-line tools.

An experiment is one JSON object.  Training keys sit at the top level
(the same names as ``TrainConfig.to_dict``), next to::

    "dataset":      {"dir": path}
                  | {"synthetic": {classes, per_class, image_side, background, noise_level, seed}}
                  | {"idx": {images, labels, distractor_images, distractor_labels,
                             test_images?, test_labels?, noise_level, seed}}
    "output_dir":   where checkpoints, histories and CSVs go
    "group_sizes", "noise_levels", "seeds", "variants":   sweep axes

Missing keys take the defaults below; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import NoisyDataset, gen_synthetic, inject_noise, load_dataset, load_idx
from .errors import ConfigurationError
from .trainer import TrainConfig

SYNTHETIC_DEFAULTS = {
    "classes": 5,
    "per_class": 200,
    "image_side": 16,
    "background": 1.0,
    "noise_level": 0.4,
    "seed": 0,
}
IDX_KEYS = {"images", "labels", "distractor_images", "distractor_labels", "test_images", "test_labels", "noise_level", "seed"}
IDX_REQUIRED = {"images", "labels", "distractor_images", "distractor_labels"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")


def resolve_dataset_spec(spec) -> dict:
    """Validate a dataset source and fill defaults; returns a new dict."""
    _check_keys(spec, {"dir", "synthetic", "idx"}, "dataset")
    if len(spec) != 1:
        raise ConfigurationError("dataset needs exactly one of 'dir', 'synthetic', 'idx'")
    kind, body = next(iter(spec.items()))
    if kind == "dir":
        if not isinstance(body, str):
            raise ConfigurationError("dataset.dir must be a path string")
        return {"dir": body}
    if kind == "synthetic":
        _check_keys(body, SYNTHETIC_DEFAULTS, "dataset.synthetic")
        return {"synthetic": {**SYNTHETIC_DEFAULTS, **body}}
    _check_keys(body, IDX_KEYS, "dataset.idx")
    missing = IDX_REQUIRED - set(body)
    if missing:
        raise ConfigurationError(f"dataset.idx is missing {sorted(missing)}")
    return {"idx": {"noise_level": 0.0, "seed": 0, "test_images": None, "test_labels": None, **body}}


def build_dataset(spec: dict, noise_level=None, seed=None) -> NoisyDataset:
    """Materialize a resolved dataset source, optionally overriding noise level and seed."""
    kind, body = next(iter(spec.items()))
    if kind == "dir":
        if noise_level is not None and noise_level != load_dataset(body).noise_level:
            raise ConfigurationError("a stored dataset cannot be re-noised; use a synthetic or idx source")
        return load_dataset(body)
    xi = body["noise_level"] if noise_level is None else noise_level
    s = body["seed"] if seed is None else seed
    if kind == "synthetic":
        return gen_synthetic(body["classes"], body["per_class"], body["image_side"], xi, s, background=body["background"])
    clean = load_idx(body["images"], body["labels"])
    distractors = load_idx(body["distractor_images"], body["distractor_labels"])
    test = load_idx(body["test_images"], body["test_labels"]) if body["test_images"] else None
    return inject_noise(clean, xi, distractors, s, test=test)


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: dict = field(default_factory=lambda: {"synthetic": dict(SYNTHETIC_DEFAULTS)})
    output_dir: str = "runs/default"
    group_sizes: tuple[int, ...] = (1, 2, 3, 4)
    noise_levels: tuple[float, ...] = (0.2, 0.4, 0.6)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    variants: tuple[str, ...] = ("RGT_AT_R",)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("experiment config must be a JSON object")
        own = {"dataset", "output_dir", "group_sizes", "noise_levels", "seeds", "variants"}
        train_keys = set(TrainConfig().to_dict())
        _check_keys(d, own | train_keys, "experiment config")
        train = TrainConfig.from_dict({k: v for k, v in d.items() if k in train_keys})
        kwargs = {"train": train}
        if "dataset" in d:
            kwargs["dataset"] = resolve_dataset_spec(d["dataset"])
        if "output_dir" in d:
            kwargs["output_dir"] = str(d["output_dir"])
        for axis in ("group_sizes", "noise_levels", "seeds", "variants"):
            if axis in d:
                if not isinstance(d[axis], list) or not d[axis]:
                    raise ConfigurationError(f"{axis} must be a nonempty list")
                kwargs[axis] = tuple(d[axis])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        d.update(
            dataset=self.dataset,
            output_dir=self.output_dir,
            group_sizes=list(self.group_sizes),
            noise_levels=list(self.noise_levels),
            seeds=list(self.seeds),
            variants=list(self.variants),
        )
        return d

    def with_train(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def echo(self, directory) -> Path:
        """Write the resolved document next to the outputs it produced."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path
