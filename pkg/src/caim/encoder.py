"""Stage 1: spatial encoding, adjacent differencing, boundary enhancement.

The encoder is applied once to all frames by folding the time axis into the
batch axis (a [T, B, C, H, W] stack becomes [T*B, C, H, W]); because every
operator inside works per sample, this is numerically equivalent to looping
the shared encoder over time steps, just faster. No stage here changes the
spatial resolution.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .kernels import conv2d, conv2d_nhwc, group_norm, group_norm_nhwc
from .tensor import as_tensor


def gn_groups(channels):
    """Largest group count <= 8 that divides the channel count."""
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


def stack_time_batch(x):
    """[T, B, C, H, W] -> [T*B, C, H, W]; frame (t, b) lands at row t*B + b."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError("stack_time_batch expects [T, B, C, H, W]")
    t, b, c, h, w = x.shape
    return x.reshape(t * b, c, h, w)


def unstack_time_batch(x, t_len, batch):
    """Inverse of :func:`stack_time_batch`."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[0] != t_len * batch:
        raise ShapeError(
            f"cannot unstack {x.shape} into t_len={t_len}, batch={batch}")
    return x.reshape(t_len, batch, *x.shape[1:])


def init_encoder_params(store, in_channels, channels=64, prefix="enc"):
    """Two-branch encoder weights: 3x3 pair, 1x1 pair, 3x3 fusion.

    Every convolution is normalization-followed, so none carries a bias.
    """
    def conv(name, cin, cout, k):
        store.param(f"{prefix}.{name}.w", (cout, cin, k, k))
        store.param(f"{prefix}.{name}.gn_g", (cout,), init="ones")
        store.param(f"{prefix}.{name}.gn_b", (cout,), init="zeros")

    conv("b1c1", in_channels, channels, 3)
    conv("b1c2", channels, channels, 3)
    conv("b2c1", in_channels, channels, 1)
    conv("b2c2", channels, channels, 1)
    conv("fuse", channels, channels, 3)


def _cgr(x, store, name, k):
    """conv -> GroupNorm -> ReLU on channels-last activations."""
    w = store[f"{name}.w"]
    y = conv2d_nhwc(x, w, padding=(1 if k == 3 else 0))
    y = group_norm_nhwc(y, gn_groups(w.shape[0]),
                        store[f"{name}.gn_g"], store[f"{name}.gn_b"])
    return T.relu(y)


# per-chunk activation budget for the encoder chain; every stage is
# per-sample, so processing the folded stack in frame chunks is exact while
# keeping the working set cache-resident even for large T*B
_ENCODE_CHUNK_BYTES = 8 << 20


def _encode_chunk(xh, store, prefix):
    e1 = _cgr(_cgr(xh, store, f"{prefix}.b1c1", 3), store, f"{prefix}.b1c2", 3)
    e2 = _cgr(_cgr(xh, store, f"{prefix}.b2c1", 1), store, f"{prefix}.b2c2", 1)
    return _cgr(e1 + e2, store, f"{prefix}.fuse", 3)


def encode(x, store, prefix="enc"):
    """Batch-stacked two-branch encoder: [T*B, C, H, W] -> [T*B, channels, H, W].

    Branch one stacks two 3x3 stages for local context, branch two stacks two
    1x1 stages for cross-band mixing; their sum passes through a 3x3 fusion
    stage. Every stage is conv -> GroupNorm -> ReLU. Internally the chain
    runs channels-last and in frame chunks (cheaper im2col, cache-resident
    intermediates); the interface stays NCHW.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("encode expects a stacked [T*B, C, H, W] input")
    n, _, h, w = x.shape
    channels = store[f"{prefix}.fuse.w"].shape[0]
    xh = x.transpose(0, 2, 3, 1)
    per_frame = h * w * channels * x.data.itemsize
    step = max(1, min(n, int(_ENCODE_CHUNK_BYTES // max(per_frame, 1))))
    if step >= n:
        out = _encode_chunk(xh, store, prefix)
    else:
        chunks = [_encode_chunk(xh[lo:min(lo + step, n)], store, prefix)
                  for lo in range(0, n, step)]
        out = T.concatenate(chunks, axis=0)
    return out.transpose(0, 3, 1, 2)


def _adjacent_delta(e):
    """x[1:] - x[:-1] along axis 0 as one primitive (no temporary slices)."""
    out_data = e.data[1:] - e.data[:-1]
    shape = e.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[1:] += g
        gx[:-1] -= g
        T._accum(e, gx)

    return T._make(out_data, (e,), backward)


def adjacent_diff(e, signed=False):
    """Adjacent-frame feature differences: [T, B, C, H, W] -> [T-1, B, C, H, W].

    Slot i holds |e[i+1] - e[i]| (magnitude of change between frames);
    ``signed=True`` keeps the raw difference instead.
    """
    e = as_tensor(e)
    if e.ndim != 5:
        raise ShapeError("adjacent_diff expects [T, B, C, H, W]")
    if e.shape[0] < 2:
        raise ShapeError("adjacent_diff needs at least two time steps")
    d = _adjacent_delta(e)
    return d if signed else T.tabs(d)


def init_boundary_params(store, t_len, channels=64, prefix="bnd"):
    """One raw 3x3 kernel per channel of the [B, (T-1)*C, H, W] stack, no bias."""
    store.param(f"{prefix}.w", ((t_len - 1) * channels, 1, 3, 3), fan_in=9)


_CENTER = np.zeros((1, 1, 3, 3))
_CENTER[0, 0, 1, 1] = 1.0
_OFF = 1.0 - _CENTER


def effective_boundary_kernel(raw):
    """Center-difference kernel: off-center taps copied from the raw weights,
    center tap set to minus their sum. Equivalent to weighting each
    (neighbor - center) difference, so any constant patch maps to zero."""
    raw = as_tensor(raw)
    off = raw * _OFF.astype(raw.dtype)
    s = off.sum(axis=(2, 3), keepdims=True)
    return off - _CENTER.astype(raw.dtype) * s


def boundary_enhance(d, store, prefix="bnd"):
    """Depthwise center-difference convolution added back onto its input.

    Input [T-1, B, C, H, W] is flattened to [B, (T-1)*C, H, W]; each channel
    keeps its own kernel (groups == channels), so time slices never mix.
    Constant regions produce zero response wherever the window stays inside
    the image (zero padding keeps the spatial size; the one-pixel border
    sees the padding).
    """
    d = as_tensor(d)
    if d.ndim != 5:
        raise ShapeError("boundary_enhance expects [T-1, B, C, H, W]")
    tm1, b, c, h, w = d.shape
    raw = store[f"{prefix}.w"]
    if raw.shape[0] != tm1 * c:
        raise ShapeError(
            f"boundary kernels cover {raw.shape[0]} channels, input stack has {tm1 * c}")
    khat = effective_boundary_kernel(raw)
    x = d.transpose(1, 0, 2, 3, 4).reshape(b, tm1 * c, h, w)
    y = conv2d(x, khat, padding=1, groups=tm1 * c) + x
    return y.reshape(b, tm1, c, h, w).transpose(1, 0, 2, 3, 4)
