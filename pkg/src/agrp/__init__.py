"""Noise-robust weakly supervised image classification.

Training images that share a (possibly wrong) label are randomly grouped;
an attention detector pools each group's feature maps so a single
correctly labelled member can carry the group, and a hinge regularizer
asks the detector to fire on real images and stay silent on negatives.
"""

from .data import LabeledImage, NoisyDataset, Truth, gen_synthetic, inject_noise, load_idx
from .grouping import group_label_accuracy, plan_epoch
from .trainer import VARIANTS, ModelState, TrainConfig, train

__all__ = [
    "LabeledImage",
    "ModelState",
    "NoisyDataset",
    "TrainConfig",
    "Truth",
    "VARIANTS",
    "gen_synthetic",
    "group_label_accuracy",
    "inject_noise",
    "load_idx",
    "plan_epoch",
    "train",
]
