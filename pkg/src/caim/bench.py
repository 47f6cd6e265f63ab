"""Efficiency harness: stacked-vs-siamese encoder timing, parameters, FLOPs.

The stacked strategy folds time into the batch axis and encodes once; the
siamese strategy loops the shared encoder over time steps. Both use the
same parameters, so outputs must agree (checked in float64, where BLAS
accumulation-order noise sits far below the reported tolerance); only the
wall time differs. FLOPs count multiply-adds as 2 (convolutions
2*Cout*Cin/g*k^2*Hout*Wout, linear maps 2*in*out per row, attention and
recurrence itemized below); normalizations and activations are excluded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import encode, init_encoder_params, stack_time_batch, unstack_time_batch
from .errors import CaimError
from .tensor import ParamStore, Tensor, no_grad

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@dataclass
class BenchReport:
    entries: list = field(default_factory=list)
    param_count: int = 0
    flops: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def lines(self):
        out = ["# multiply-add counted as 2 FLOPs; norms/activations excluded"]
        out += [f"note={n}" for n in self.notes]
        out.append(f"param_count={self.param_count}")
        for key, v in self.flops.items():
            out.append(f"flops.{key}={v}")
        for e in self.entries:
            for key, v in e.items():
                out.append(f"bench.{e['label']}.{key}={v}")
        return out


def _median_time(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _single_worker():
    if threadpool_limits is not None:
        return threadpool_limits(limits=1)
    import contextlib
    return contextlib.nullcontext()


def bench_encoder(t_len, batch, bands, height, width, repeats=5, channels=64, seed=0):
    """Time stacked vs per-step encoding with shared parameters.

    Returns a dict with forward and forward+backward medians for both
    strategies plus the max-abs output difference (float64 check). Times are
    taken under a single BLAS worker to reduce variance.
    """
    rng = np.random.default_rng(seed)

    def build(dtype):
        store = ParamStore(seed=seed, dtype=dtype)
        init_encoder_params(store, bands, channels)
        x = rng.normal(size=(t_len, batch, bands, height, width)).astype(dtype)
        return store, x

    # value equivalence in float64
    store64, x64 = build(np.float64)
    with no_grad():
        stacked = encode(stack_time_batch(Tensor(x64)), store64)
        stacked = unstack_time_batch(stacked, t_len, batch)
        loops = [encode(Tensor(x64[t]), store64) for t in range(t_len)]
    diff64 = max(float(np.abs(stacked.data[t] - loops[t].data).max()) for t in range(t_len))

    store, x = build(np.float32)
    xt = Tensor(x)

    def stacked_fwd():
        with no_grad():
            encode(stack_time_batch(xt), store)

    def siamese_fwd():
        with no_grad():
            for t in range(t_len):
                encode(Tensor(x[t]), store)

    def stacked_fwdbwd():
        store.zero_grads()
        out = encode(stack_time_batch(xt), store)
        out.sum().backward()

    def siamese_fwdbwd():
        store.zero_grads()
        for t in range(t_len):
            out = encode(Tensor(x[t]), store)
            out.sum().backward()

    entry = {"label": f"T{t_len}_B{batch}_{height}x{width}",
             "t_len": t_len, "batch": batch, "height": height, "width": width,
             "equivalence_max_abs_diff": diff64}
    with _single_worker():
        entry["stacked_fwd_s"] = _median_time(stacked_fwd, repeats)
        entry["siamese_fwd_s"] = _median_time(siamese_fwd, repeats)
        entry["stacked_fwdbwd_s"] = _median_time(stacked_fwdbwd, repeats)
        entry["siamese_fwdbwd_s"] = _median_time(siamese_fwdbwd, repeats)
    for key in ("stacked_fwd_s", "siamese_fwd_s", "stacked_fwdbwd_s", "siamese_fwdbwd_s"):
        if not np.isfinite(entry[key]) or entry[key] <= 0:
            raise CaimError(f"benchmark produced invalid timing {key}={entry[key]}")
    return entry


def count_params(store):
    """Total trainable scalar count in a parameter store."""
    return store.n_scalars()


def _conv_flops(cout, cin, k, h, w, n=1, groups=1):
    return 2 * cout * (cin // groups) * k * k * h * w * n


def _linear_flops(n_rows, fin, fout):
    return 2 * n_rows * fin * fout


def estimate_flops(cfg, batch=1, height=64, width=64):
    """Analytic forward-pass FLOPs for one [T, batch, bands, H, W] input.

    Itemized per stage; see the module docstring for conventions.
    """
    t, b, c = cfg.t_len, batch, cfg.channels
    hid = cfg.hidden
    frames = t * b
    hw = height * width
    enc = (_conv_flops(c, cfg.bands, 3, height, width, frames)
           + _conv_flops(c, c, 3, height, width, frames)
           + _conv_flops(c, cfg.bands, 1, height, width, frames)
           + _conv_flops(c, c, 1, height, width, frames)
           + _conv_flops(c, c, 3, height, width, frames))
    boundary = _conv_flops((t - 1) * c, (t - 1) * c, 3, height, width, b,
                           groups=(t - 1) * c)
    tokens = b * hw
    tm1 = t - 1
    dh = c // cfg.n_heads
    attn = (_linear_flops(tokens * tm1, c, 3 * c)          # qkv projection
            + 2 * tokens * cfg.n_heads * tm1 * tm1 * dh * 2  # scores + weighted sum
            + _linear_flops(tokens * tm1, c, c)             # output projection
            + _linear_flops(tokens * tm1, c, cfg.ffn_mult * c)
            + _linear_flops(tokens * tm1, cfg.ffn_mult * c, c))
    lstm = _linear_flops(tokens * tm1, c, 4 * hid) + _linear_flops(tokens * tm1, hid, 4 * hid)
    ex1 = _conv_flops(2, hid, 1, height, width, tm1 * b)
    ex2 = (_conv_flops(cfg.extractor2_mid, tm1 * hid, 3, height, width, b)
           + _conv_flops(t, cfg.extractor2_mid, 3, height, width, b))
    cam = 0
    for s in cfg.cam_scales:
        rows = b * (height // s) * (width // s)
        cam += 2 * (_linear_flops(rows, s * s * t, t) + _linear_flops(b, s * s * t, t))
    items = {"encoder": enc, "boundary": boundary, "attention": attn,
             "lstm": lstm, "extractor1": ex1, "extractor2": ex2, "cam_heads": cam}
    items["total"] = sum(items.values())
    return items


def run_benchmark(cfg, shapes=((2, 2, 16, 16), (3, 2, 32, 32), (4, 1, 32, 32),
                               (6, 2, 64, 64), (8, 8, 64, 64)),
                  repeats=5, seed=0):
    """Full BenchReport: encoder timings over several shapes plus model
    parameter/FLOP accounting for ``cfg``."""
    from .refine import init_model_params

    report = BenchReport()
    report.notes.append("timings under a single BLAS worker; median of "
                        f"{repeats} runs after one warm-up")
    for (t_len, batch, h, w) in shapes:
        report.entries.append(bench_encoder(t_len, batch, cfg.bands, h, w,
                                            repeats=repeats, channels=cfg.channels,
                                            seed=seed))
    store = init_model_params(cfg, seed=seed)
    report.param_count = count_params(store)
    report.flops = estimate_flops(cfg)
    return report
