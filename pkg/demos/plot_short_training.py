"""
A short training run
====================

Train a small three-level network on 64x64 textures and compare its
validation end-point error with the untrained (zero-field) model. The loss
stays near the zero-field value for several hundred iterations before the
network starts to match features; expect a few minutes on one CPU core.
"""

import logging

import matplotlib
matplotlib.use("Agg")

from superwarp.data import synthetic_dataset
from superwarp.network import ModelConfig, build_model
from superwarp.objectives import LossConfig
from superwarp.synthgen import SpatialParams
from superwarp.trainer import TrainConfig, evaluate, make_eval_set, train
from superwarp.viz import plot_curves

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = TrainConfig(
    total_iterations=2000,
    warmstart_iterations=100,
    lr_start=3e-4,
    lr_end=3e-6,
    validation_every=100,
    loss=LossConfig(multi_scale=True),
    model=ModelConfig(levels=3, features_per_level=[16, 24, 32]),
    spatial=SpatialParams(translate=2, scale=(0.95, 1.05), rotate=4, elastic=2, max_displacement=4),
)
textures = synthetic_dataset(16, (64, 64), seed=1)
val_set = make_eval_set(synthetic_dataset(4, (64, 64), seed=2), cfg.spatial, cfg.intensity, 8, seed=3)

print("untrained EPE:", evaluate(build_model(cfg.model), val_set)["epe"]["mean"])
record = train(cfg, textures, val_set)
print("final EPE:", record.validation[-1]["epe"])

plot_curves({"superwarp": record.validation}, "short_training.png", metrics=("epe",))
