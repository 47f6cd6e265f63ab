#!/usr/bin/env python3
"""Small end-to-end training run with the focal weighted cross-entropy.

Uses a narrow model and a handful of 32x32 scenes so it finishes in about
a minute; the full-scale recipe lives in the acceptance suite and the CLI.
"""

import numpy as np

from caim import (LossConfig, ModelConfig, SceneConfig, TrainConfig,
                  compute_class_ratios, generate_synthetic_scene,
                  init_model_params, split_dataset)
from caim.losses import class_weights
from caim.render import export_maps
from caim.refine import argmax_maps, predict
from caim.training import evaluate, train

# ------------------------------------------------------------------ data
scenes = []
for i in range(24):
    cube, _, lab = generate_synthetic_scene(SceneConfig(
        t_len=4, bands=3, height=32, width=32, n_objects=3,
        noise_std=0.04, seed=500 + i))
    scenes.append((cube, lab))
train_set, val_set, test_set = split_dataset(scenes, seed=1)
print(f"scenes: {len(train_set)} train / {len(val_set)} val / {len(test_set)} test")

# class fractions drive the loss weights; change pixels are the minority,
# so the default inverse-frequency mode up-weights them
loss_cfg = LossConfig(gamma=2.0)
loss_cfg.area_ratios, loss_cfg.moment_ratios = compute_class_ratios(train_set, 4)
print("area fractions:", np.round(loss_cfg.area_ratios, 3))
print("area weights  :", np.round(class_weights(loss_cfg.area_ratios,
                                                loss_cfg.class_weight_mode), 3))

# ----------------------------------------------------------------- train
model_cfg = ModelConfig(t_len=4, bands=3, channels=16, hidden=8,
                        extractor2_mid=16)
store = init_model_params(model_cfg, seed=0)
train_cfg = TrainConfig(learning_rate=1e-3, epochs=6, batch_size=4, seed=0)
log, history = train(store, model_cfg, train_set, val_set, train_cfg, loss_cfg)
for line in log:
    print(" ", line)

# ------------------------------------------------------------------ eval
report, test_loss = evaluate(store, model_cfg, test_set, loss_cfg)
print("test loss:", round(test_loss, 4))
for key, value in report.area.items():
    print(f"  area.{key}: {value:.2f}")
for key, value in report.moment.items():
    print(f"  moment.{key}: {value:.2f}")

# ------------------------------------------------------------------ maps
cube, labels = test_set[0]
pred, area = predict(cube, store, model_cfg)
moment_map, area_map = argmax_maps(pred, area)
files = export_maps([(area_map[0], moment_map[0])], [labels], "/tmp/caim_maps",
                    t_len=4)
print("rendered:", *map(str, files))
