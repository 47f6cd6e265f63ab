#!/usr/bin/env python3
"""Why the encoder folds time into the batch axis.

A shared per-frame encoder can be applied as a loop over time steps (the
siamese style) or as one pass over a [T*B, ...] stack. The math is
identical; the stacked form just spends less time on dispatch and small
intermediates. This script measures both and prints the parameter/FLOP
accounting for the full model.
"""

from caim.bench import bench_encoder, count_params, estimate_flops
from caim.refine import ModelConfig, init_model_params

print("equivalence + timing (stacked vs per-step loop)")
for (t, b, h, w) in ((2, 2, 32, 32), (4, 4, 32, 32), (8, 8, 64, 64)):
    entry = bench_encoder(t_len=t, batch=b, bands=4, height=h, width=w,
                          repeats=3, channels=32)
    print(f"  T={t} B={b} {h}x{w}: "
          f"diff={entry['equivalence_max_abs_diff']:.2e}  "
          f"fwd {entry['stacked_fwd_s'] * 1e3:7.1f} ms stacked vs "
          f"{entry['siamese_fwd_s'] * 1e3:7.1f} ms siamese  "
          f"(fwd+bwd {entry['stacked_fwdbwd_s'] * 1e3:7.1f} vs "
          f"{entry['siamese_fwdbwd_s'] * 1e3:7.1f})")

cfg = ModelConfig(t_len=6, bands=4)
store = init_model_params(cfg, seed=0)
print("\nmodel accounting (paper-default widths, 64x64 input)")
print("  parameters:", count_params(store))
for stage, flops in estimate_flops(cfg, batch=1, height=64, width=64).items():
    print(f"  flops.{stage}: {flops / 1e9:.3f} G")
