"""Stage 2: spatiotemporal correlation and the two coarse moment extractors.

The difference stack is reshaped so each pixel becomes one sequence of T-1
tokens; a transformer block mixes those tokens, an LSTM scans them and its
hidden state at every step feeds two heads. Head one compresses each step
to a (no-change, change) feature pair and assembles T-way logits as
[min over steps of no-change, change_1 .. change_{T-1}]. Head two
concatenates all steps channel-wise and treats the problem as T-way
segmentation with two 3x3 stages.

Both heads return their pre-softmax logits alongside the softmax output:
the CAM refinement stage consumes the logits, the probabilities are the
heads' own coarse predictions.
"""

from __future__ import annotations

from . import tensor as T
from .encoder import gn_groups
from .errors import ShapeError
from .kernels import (conv2d, conv2d_nhwc, group_norm, group_norm_nhwc,
                      lstm_seq, mhsa_block)
from .tensor import as_tensor


def init_spatiotemporal_params(store, channels=64, hidden=32, ffn_mult=2, prefix="st"):
    """Transformer block over the token width plus the LSTM recurrence."""
    c = channels
    store.param(f"{prefix}.ln1_g", (c,), init="ones")
    store.param(f"{prefix}.ln1_b", (c,), init="zeros")
    for gate in ("q", "k", "v"):
        store.param(f"{prefix}.w{gate}", (c, c), fan_in=c)
        store.param(f"{prefix}.b{gate}", (c,), init="zeros")
    store.param(f"{prefix}.wo", (c, c), fan_in=c)
    store.param(f"{prefix}.bo", (c,), init="zeros")
    store.param(f"{prefix}.ln2_g", (c,), init="ones")
    store.param(f"{prefix}.ln2_b", (c,), init="zeros")
    store.param(f"{prefix}.w1", (c, ffn_mult * c), fan_in=c)
    store.param(f"{prefix}.b1", (ffn_mult * c,), init="zeros")
    store.param(f"{prefix}.w2", (ffn_mult * c, c), fan_in=ffn_mult * c)
    store.param(f"{prefix}.b2", (c,), init="zeros")
    store.param(f"{prefix}.lstm_wx", (c, 4 * hidden), fan_in=c)
    store.param(f"{prefix}.lstm_wh", (hidden, 4 * hidden), fan_in=hidden)
    store.param(f"{prefix}.lstm_b", (4 * hidden,), init="zeros")


def _mhsa_params(store, prefix):
    keys = ("ln1_g", "ln1_b", "wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo",
            "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
    return {k: store[f"{prefix}.{k}"] for k in keys}


def spatiotemporal(dp, store, hidden=32, n_heads=4, prefix="st"):
    """[T-1, B, C, H, W] -> [T-1, B, hidden, H, W], pixels independent.

    Each pixel's T-1 feature vectors form one token sequence; the sequence
    passes through the attention block and then the LSTM, whose hidden state
    at every step is returned.
    """
    dp = as_tensor(dp)
    if dp.ndim != 5:
        raise ShapeError("spatiotemporal expects [T-1, B, C, H, W]")
    tm1, b, c, h, w = dp.shape
    tokens = dp.transpose(1, 3, 4, 0, 2).reshape(b * h * w, tm1, c)
    mixed = mhsa_block(tokens, _mhsa_params(store, prefix), n_heads)
    hid = lstm_seq(mixed, store[f"{prefix}.lstm_wx"], store[f"{prefix}.lstm_wh"],
                   store[f"{prefix}.lstm_b"], hidden)
    return hid.reshape(b, h, w, tm1, hidden).transpose(3, 0, 4, 1, 2)


def init_extractor1_params(store, hidden=32, prefix="ex1"):
    """1x1 compression of each step's features to (no-change, change)."""
    store.param(f"{prefix}.w", (2, hidden, 1, 1))
    store.param(f"{prefix}.gn_g", (2,), init="ones")
    store.param(f"{prefix}.gn_b", (2,), init="zeros")


def assemble_moment_logits(no_change, change):
    """T-way logits from per-step (no-change, change) feature pairs.

    no_change, change: [T-1, B, H, W]. Class 0's logit is the minimum
    no-change feature across steps (gradient reaches only the minimizing
    step, earliest on ties); class i's logit is step i's change feature.
    """
    no_change = as_tensor(no_change)
    change = as_tensor(change)
    tm1, b, h, w = no_change.shape
    nc_min = T.tmin(no_change, axis=0).reshape(b, 1, h, w)
    ch = change.transpose(1, 0, 2, 3)  # [B, T-1, H, W]
    return T.concatenate([nc_min, ch], axis=1)


def extractor1(hf, store, prefix="ex1"):
    """Adjacent-pair head: (logits, probs), both [B, T, H, W].

    Per step, a 1x1 conv + GroupNorm yields a no-change and a change feature;
    :func:`assemble_moment_logits` turns the pairs into T-way logits.
    """
    hf = as_tensor(hf)
    if hf.ndim != 5:
        raise ShapeError("extractor1 expects [T-1, B, hidden, H, W]")
    tm1, b, c, h, w = hf.shape
    if tm1 < 1:
        raise ShapeError("extractor1 needs at least one difference step")
    x = hf.reshape(tm1 * b, c, h, w)
    z = conv2d(x, store[f"{prefix}.w"])
    z = group_norm(z, 1, store[f"{prefix}.gn_g"], store[f"{prefix}.gn_b"])
    z = z.reshape(tm1, b, 2, h, w)
    logits = assemble_moment_logits(z[:, :, 0], z[:, :, 1])
    return logits, T.softmax(logits, axis=1)


def init_extractor2_params(store, t_len, hidden=32, mid=64, prefix="ex2"):
    """Two 3x3 stages mapping the stacked steps to T channels."""
    store.param(f"{prefix}.c1.w", (mid, (t_len - 1) * hidden, 3, 3))
    store.param(f"{prefix}.c1.gn_g", (mid,), init="ones")
    store.param(f"{prefix}.c1.gn_b", (mid,), init="zeros")
    store.param(f"{prefix}.c2.w", (t_len, mid, 3, 3))
    store.param(f"{prefix}.c2.b", (t_len,), init="zeros")


def extractor2(hf, store, prefix="ex2"):
    """Segmentation head: (logits, probs), both [B, T, H, W].

    Steps and channels are concatenated, then 3x3 conv + GroupNorm + ReLU
    and a final 3x3 conv down to T channels.
    """
    hf = as_tensor(hf)
    if hf.ndim != 5:
        raise ShapeError("extractor2 expects [T-1, B, hidden, H, W]")
    tm1, b, c, h, w = hf.shape
    w1 = store[f"{prefix}.c1.w"]
    if w1.shape[1] != tm1 * c:
        raise ShapeError(
            f"extractor2 expects {w1.shape[1]} stacked channels, got {tm1 * c}")
    # channels-last internally: [T-1, B, C, H, W] -> [B, H, W, (T-1)*C]
    x = hf.transpose(1, 3, 4, 0, 2).reshape(b, h, w, tm1 * c)
    y = conv2d_nhwc(x, w1, padding=1)
    y = group_norm_nhwc(y, gn_groups(w1.shape[0]),
                        store[f"{prefix}.c1.gn_g"], store[f"{prefix}.c1.gn_b"])
    y = T.relu(y)
    logits = conv2d_nhwc(y, store[f"{prefix}.c2.w"], store[f"{prefix}.c2.b"],
                         padding=1).transpose(0, 3, 1, 2)
    return logits, T.softmax(logits, axis=1)
