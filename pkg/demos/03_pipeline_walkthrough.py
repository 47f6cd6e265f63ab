#!/usr/bin/env python3
"""Stage-by-stage forward pass, with the tensor shapes at every hand-off.

The pipeline turns a [T, B, bands, H, W] image stack into two aligned
outputs: a T-way moment distribution and a binary change-area distribution
per pixel. The area is read off the fused moment logits, so the two
predictions cannot contradict each other.
"""

import numpy as np

from caim import ModelConfig, SceneConfig, generate_synthetic_scene, init_model_params
from caim.encoder import adjacent_diff, boundary_enhance, encode, stack_time_batch, unstack_time_batch
from caim.moment import extractor1, extractor2, spatiotemporal
from caim.refine import argmax_maps, fuse_fine_moment, infer_area, temporal_cam
from caim.tensor import Tensor, no_grad

cfg = ModelConfig(t_len=6, bands=4, channels=32, hidden=16, extractor2_mid=32)
store = init_model_params(cfg, seed=0)

cube, _, labels = generate_synthetic_scene(
    SceneConfig(t_len=6, bands=4, height=64, width=64, n_objects=5, seed=9))
x = Tensor(np.ascontiguousarray(cube.images[None].transpose(1, 0, 2, 3, 4)))
print("input stack:", x.shape, "(T, B, bands, H, W)")

with no_grad():
    # 1. fold time into the batch and encode every frame in one pass
    feats = encode(stack_time_batch(x), store)
    print("encoded frames:", feats.shape, "(T*B, channels, H, W)")
    feats = unstack_time_batch(feats, cfg.t_len, 1)

    # 2. adjacent-frame difference magnitudes, then boundary sharpening
    diffs = adjacent_diff(feats)
    print("difference stack:", diffs.shape, "(T-1, B, C, H, W), min",
          float(diffs.data.min()))
    diffs = boundary_enhance(diffs, store)

    # 3. per-pixel temporal mixing (attention + recurrence)
    hidden = spatiotemporal(diffs, store, cfg.hidden, cfg.n_heads)
    print("per-step hidden states:", hidden.shape)

    # 4. two coarse moment readouts (logits feed the CAM refinement)
    logits1, coarse1 = extractor1(hidden, store)
    logits2, coarse2 = extractor2(hidden, store)
    print("coarse heads:", logits1.shape, logits2.shape)

    # 5. multiscale temporal CAM on each head, then fuse
    cams, auxes = [], []
    for branch_logits, branch in ((logits1, 1), (logits2, 2)):
        for s in cfg.cam_scales:
            cam, aux = temporal_cam(branch_logits, store[f"cam{branch}_s{s}.w"],
                                    store[f"cam{branch}_s{s}.b"], s)
            cams.append(cam)
            auxes.append(aux)
    pred = fuse_fine_moment(cams, auxes)
    print("fine moment:", pred.fine_moment.shape, "supplementary:",
          len(pred.moments))

    # 6. change area straight from the fused logits
    area = infer_area(pred.fused_logits)
    print("area probabilities:", area.probs.shape)

moment_map, area_map = argmax_maps(pred, area)
consistent = np.array_equal(area_map != 0, moment_map != 0)
print("area argmax agrees with (moment argmax != 0):", consistent)
print("note: the model is untrained here; see 04 for a trained run")
