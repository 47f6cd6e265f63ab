"""Network operator kernels with reverse-mode gradients.

Every operator here takes and returns :class:`~caim.tensor.Tensor` and
registers a hand-derived backward closure. Convolutions go through an
im2col GEMM (grouped and depthwise layouts get dedicated paths); the
input gradient of a stride-1 "same" convolution is itself a convolution
with the spatially flipped, channel-transposed kernel. All operators are
validated against central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, GradCheckError, ShapeError
from .tensor import Tensor, _accum, _make, as_tensor, grad_enabled, no_grad

__all__ = [
    "conv2d", "conv2d_nhwc", "group_norm", "group_norm_nhwc", "layer_norm",
    "lstm_seq", "mhsa_block", "bilinear_upsample", "space_to_depth",
    "depth_to_space", "grad_check",
]


# -- convolution -----------------------------------------------------------


def _im2col(xp, k, n_rows, n_cols):
    """[N,C,Hp,Wp] -> [N*n_rows*n_cols, C*k*k] patch matrix (stride 1)."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    v = v.transpose(0, 2, 3, 1, 4, 5)  # [N, H', W', C, k, k]
    return np.ascontiguousarray(v).reshape(xp.shape[0] * n_rows * n_cols, -1)


def _conv_raw(x, w, padding):
    """Stride-1 cross-correlation on raw arrays, groups == 1."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    h_out = h + 2 * padding - k + 1
    w_out = wd + 2 * padding - k + 1
    cols = _im2col(xp, k, h_out, w_out)
    rows = cols @ w.reshape(c_out, -1).T
    return rows.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2), cols


def _conv_grads_raw(g, x, w, padding, need_x, need_w, cols=None):
    """Gradients of the stride-1 grouped==1 path.

    ``cols`` may carry the forward pass's im2col matrix to avoid rebuilding
    it for the weight gradient.
    """
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    gw = gx = None
    if need_w:
        if cols is None:
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
            cols = _im2col(xp, k, g.shape[2], g.shape[3])
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g_rows.T @ cols).reshape(w.shape)
    if need_x:
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv_raw(g, w_flip, k - 1 - padding)
    return gx, gw


def _depthwise_raw(x, w, padding):
    """Depthwise stride-1 path: 9 (or 1) shifted multiply-adds."""
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    h_out = h + 2 * padding - k + 1
    w_out = wd + 2 * padding - k + 1
    out = np.zeros((n, c, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += w[:, 0, i, j][None, :, None, None] * xp[:, :, i:i + h_out, j:j + w_out]
    return out, xp


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation, zero padding, kernels 1x1 or 3x3.

    x: [N, Cin, H, W]; weight: [Cout, Cin/groups, k, k]; bias: [Cout] or None.
    Spatial size is preserved for (k=3, p=1, s=1) and (k=1, p=0, s=1).
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c_in, h, wd = x.shape
    c_out, c_in_g, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ConfigError(f"conv2d supports square kernels of size 1 or 3, got {k}x{k2}")
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(f"weight expects {c_in_g * groups} input channels, input has {c_in}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError("input smaller than kernel")

    xd, wdat = x.data, weight.data
    depthwise = groups == c_in and c_out == c_in and groups > 1
    keep_cols = grad_enabled() and weight.requires_grad
    cols_cache = None

    if depthwise:
        out_data, xp = _depthwise_raw(xd, wdat, padding)
    elif groups == 1:
        out_data, cols = _conv_raw(xd, wdat, padding)
        if keep_cols:
            cols_cache = cols
        del cols
    else:
        cig, cog = c_in // groups, c_out // groups
        pieces = [_conv_raw(xd[:, g * cig:(g + 1) * cig], wdat[g * cog:(g + 1) * cog], padding)[0]
                  for g in range(groups)]
        out_data = np.concatenate(pieces, axis=1)

    if stride > 1:
        full = out_data
        out_data = np.ascontiguousarray(full[:, :, ::stride, ::stride])
        full_shape = full.shape
    else:
        full_shape = out_data.shape

    has_bias = bias is not None
    if has_bias:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[None, :, None, None]

    h_full, w_full = full_shape[2], full_shape[3]

    def backward(g):
        if stride > 1:
            gf = np.zeros((n, c_out, h_full, w_full), dtype=g.dtype)
            gf[:, :, ::stride, ::stride] = g
        else:
            gf = g
        if has_bias:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if depthwise:
            if weight.requires_grad:
                gw = np.empty_like(wdat)
                for i in range(k):
                    for j in range(k):
                        gw[:, 0, i, j] = np.einsum(
                            "nchw,nchw->c", gf, xp[:, :, i:i + h_full, j:j + w_full])
                _accum(weight, gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + h_full, j:j + w_full] += \
                            wdat[:, 0, i, j][None, :, None, None] * gf
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
                _accum(x, gx)
        elif groups == 1:
            gx, gw = _conv_grads_raw(gf, xd, wdat, padding,
                                     x.requires_grad, weight.requires_grad,
                                     cols=cols_cache)
            if gw is not None:
                _accum(weight, gw)
            if gx is not None:
                _accum(x, gx)
        else:
            cig, cog = c_in // groups, c_out // groups
            gx_parts, gw_parts = [], []
            for gi in range(groups):
                gxi, gwi = _conv_grads_raw(
                    gf[:, gi * cog:(gi + 1) * cog], xd[:, gi * cig:(gi + 1) * cig],
                    wdat[gi * cog:(gi + 1) * cog], padding,
                    x.requires_grad, weight.requires_grad)
                gx_parts.append(gxi)
                gw_parts.append(gwi)
            if weight.requires_grad:
                _accum(weight, np.concatenate(gw_parts, axis=0))
            if x.requires_grad:
                _accum(x, np.concatenate(gx_parts, axis=1))

    parents = (x, weight, bias) if has_bias else (x, weight)
    return _make(out_data, parents, backward)


# -- channels-last convolution path ------------------------------------------
#
# The encoder chain runs in [N, H, W, C] layout internally: the im2col
# gather then copies whole C-length rows (contiguous) instead of single
# floats, and each GEMM's output is already laid out for the next stage.
# Semantics match conv2d/group_norm exactly; groups == 1 only.


# patch-matrix chunks stay below this size so a folded [T*B, ...] batch
# never materializes a cache-thrashing multi-hundred-MB im2col buffer
_COLS_CHUNK_BYTES = 48 << 20


def _nhwc_cols(xp, k, lo, hi, h_out, w_out):
    """Patch matrix for samples lo:hi of a padded [N, Hp, Wp, C] array."""
    c = xp.shape[3]
    if k == 1:
        return np.ascontiguousarray(xp[lo:hi]).reshape((hi - lo) * h_out * w_out, c)
    v = np.lib.stride_tricks.sliding_window_view(xp[lo:hi], (k, k), axis=(1, 2))
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)) \
             .reshape((hi - lo) * h_out * w_out, k * k * c)


def _nhwc_chunk(n, h_out, w_out, k, c, itemsize):
    per_sample = h_out * w_out * k * k * c * itemsize
    return max(1, min(n, int(_COLS_CHUNK_BYTES // max(per_sample, 1))))


def _nhwc_conv_raw(xh, w, padding, want_cols=False):
    """Chunked stride-1 cross-correlation on [N, H, W, C] raw arrays.

    Returns (out, cols) where cols is the full patch matrix only when
    ``want_cols`` is set and it fits the chunk budget, else None.
    """
    n, h, wd, c = xh.shape
    c_out, c_in, k, _ = w.shape
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) \
        if padding else xh
    h_out = h + 2 * padding - k + 1
    w_out = wd + 2 * padding - k + 1
    w2 = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k * c_in, c_out)
    step = _nhwc_chunk(n, h_out, w_out, k, c, xh.itemsize)
    out = np.empty((n, h_out, w_out, c_out), dtype=xh.dtype)
    keep = want_cols and step >= n
    cols_all = None
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        cols = _nhwc_cols(xp, k, lo, hi, h_out, w_out)
        out[lo:hi] = (cols @ w2).reshape(hi - lo, h_out, w_out, c_out)
        if keep:
            cols_all = cols
    return out, cols_all


def _nhwc_weight_grad(xh, g, k, padding):
    """Chunked dW accumulation: sum over chunks of cols^T @ g_rows."""
    n, h, wd, c = xh.shape
    c_out = g.shape[3]
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) \
        if padding else xh
    h_out, w_out = g.shape[1], g.shape[2]
    step = _nhwc_chunk(n, h_out, w_out, k, c, xh.itemsize)
    gw2 = np.zeros((k * k * c, c_out), dtype=xh.dtype)
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        cols = _nhwc_cols(xp, k, lo, hi, h_out, w_out)
        gw2 += cols.T @ g[lo:hi].reshape(-1, c_out)
    return gw2


def conv2d_nhwc(x, weight, bias=None, padding=0):
    """conv2d for [N, H, W, C] activations (groups == 1, stride 1).

    Same math as :func:`conv2d` up to layout; weights keep their
    [Cout, Cin, k, k] shape so checkpoints are layout-independent. Large
    stacks are processed in sample chunks (identical results, bounded
    temporaries).
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    n, h, wd, c_in = x.shape
    c_out, c_in_w, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ConfigError(f"conv2d_nhwc supports square kernels of size 1 or 3, got {k}x{k2}")
    if c_in_w != c_in:
        raise ShapeError(f"weight expects {c_in_w} input channels, input has {c_in}")
    xd, wdat = x.data, weight.data
    out_data, cols_cache = _nhwc_conv_raw(
        xd, wdat, padding, want_cols=grad_enabled() and weight.requires_grad)
    has_bias = bias is not None
    if has_bias:
        bias = as_tensor(bias)
        out_data = out_data + bias.data

    def backward(g):
        if has_bias:
            _accum(bias, g.sum(axis=(0, 1, 2)))
        if weight.requires_grad:
            if cols_cache is not None:
                gw2 = cols_cache.T @ g.reshape(-1, c_out)
            else:
                gw2 = _nhwc_weight_grad(xd, g, k, padding)
            _accum(weight, gw2.reshape(k, k, c_in, c_out).transpose(3, 2, 0, 1))
        if x.requires_grad:
            w_flip = np.ascontiguousarray(
                wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _nhwc_conv_raw(np.ascontiguousarray(g), w_flip, k - 1 - padding)
            _accum(x, gx)

    parents = (x, weight, bias) if has_bias else (x, weight)
    return _make(out_data, parents, backward)


def group_norm_nhwc(x, n_groups, gamma, beta, eps=1e-5):
    """group_norm for [N, H, W, C] activations; same statistics as the
    [N, C, H, W] version (per sample, per channel group, over all pixels).
    Moments come from single-pass einsum sums (E[x^2] - mu^2, clamped at 0)."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    n, h, w, c = x.shape
    if c % n_groups:
        raise ConfigError(f"channel count {c} not divisible by n_groups={n_groups}")
    cg = c // n_groups
    m = h * w * cg

    xg = x.data.reshape(n, h * w, n_groups, cg)
    s1 = np.einsum("npgc->ng", xg)
    s2 = np.einsum("npgc,npgc->ng", xg, xg)
    mu = (s1 / m)[:, None, :, None]
    var = np.maximum(s2 / m - (s1 / m) ** 2, 0.0)[:, None, :, None]
    inv = 1.0 / np.sqrt(var + eps)
    # fold normalization and affine into one scale/shift pair so the big
    # activation array is traversed twice instead of five times
    scale = inv * gamma.data.reshape(n_groups, cg)
    shift = beta.data.reshape(n_groups, cg) - mu * scale
    out_data = (xg * scale + shift).reshape(n, h, w, c)

    def backward(g):
        xhat = ((xg - mu) * inv)
        g4 = g.reshape(n, h * w, n_groups, cg)
        _accum(gamma, np.einsum("npgc,npgc->gc", g4, xhat).reshape(c))
        _accum(beta, g.sum(axis=(0, 1, 2)))
        if not x.requires_grad:
            return
        ghat = g4 * gamma.data.reshape(n_groups, cg)
        mean_g = (np.einsum("npgc->ng", ghat) / m)[:, None, :, None]
        mean_gx = (np.einsum("npgc,npgc->ng", ghat, xhat) / m)[:, None, :, None]
        gx = inv * (ghat - mean_g - xhat * mean_gx)
        _accum(x, gx.reshape(n, h, w, c))

    return _make(out_data, (x, gamma, beta), backward)


# -- normalization ---------------------------------------------------------


def group_norm(x, n_groups, gamma, beta, eps=1e-5):
    """Per-(sample, group) standardization with per-channel affine.

    Statistics are taken over each sample's group slice, so the result does
    not depend on what else is in the batch.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError("group_norm expects [N, C, H, W]")
    n, c, h, w = x.shape
    if c % n_groups:
        raise ConfigError(f"channel count {c} not divisible by n_groups={n_groups}")
    m = (c // n_groups) * h * w

    xg = x.data.reshape(n, n_groups, m)
    s1 = np.einsum("ngm->ng", xg)
    s2 = np.einsum("ngm,ngm->ng", xg, xg)
    mu = (s1 / m)[:, :, None]
    var = np.maximum(s2 / m - (s1 / m) ** 2, 0.0)[:, :, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        _accum(gamma, np.einsum("nchw,nchw->c", g, xhat))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        ghat = (g * gamma.data[None, :, None, None]).reshape(n, n_groups, m)
        xh = xhat.reshape(n, n_groups, m)
        mean_g = (np.einsum("ngm->ng", ghat) / m)[:, :, None]
        mean_gx = (np.einsum("ngm,ngm->ng", ghat, xh) / m)[:, :, None]
        gx = inv * (ghat - mean_g - xh * mean_gx)
        _accum(x, gx.reshape(n, c, h, w))

    return _make(out_data, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize over the last axis with per-feature affine."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data
    m = x.shape[-1]
    red = tuple(range(x.ndim - 1))

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))
        if not x.requires_grad:
            return
        ghat = g * gamma.data
        mean_g = ghat.mean(axis=-1, keepdims=True)
        mean_gx = (ghat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (ghat - mean_g - xhat * mean_gx))

    return _make(out_data, (x, gamma, beta), backward)


# -- recurrence and attention -----------------------------------------------


def lstm_seq(x, wx, wh, b, hidden):
    """Gated recurrence over axis 1; returns the hidden state of every step.

    x: [N, T, Cin]; wx: [Cin, 4*hidden]; wh: [hidden, 4*hidden]; b: [4*hidden].
    Gate slot order is input, forget, cell, output; initial state is zero.
    Implemented as one fused node: the input projection is a single GEMM and
    the backward pass runs standard backpropagation through time.
    """
    x = as_tensor(x)
    wx, wh, b = as_tensor(wx), as_tensor(wh), as_tensor(b)
    if x.ndim != 3:
        raise ShapeError("lstm_seq expects [N, T, C]")
    n, t_len, c_in = x.shape
    if wx.shape != (c_in, 4 * hidden) or wh.shape != (hidden, 4 * hidden):
        raise ShapeError("lstm weight shapes do not match the hidden size")
    hd = hidden
    xd, wxd, whd = x.data, wx.data, wh.data

    x2 = xd.reshape(n * t_len, c_in)
    zx = (x2 @ wxd + b.data).reshape(n, t_len, 4 * hd)

    gi = np.empty((n, t_len, hd), dtype=xd.dtype)
    gf = np.empty_like(gi)
    gg = np.empty_like(gi)
    go = np.empty_like(gi)
    cs = np.empty_like(gi)       # cell state per step
    tc = np.empty_like(gi)       # tanh(cell) per step
    hs = np.empty_like(gi)

    h = None
    c = None
    for t in range(t_len):
        z = zx[:, t] if h is None else zx[:, t] + h @ whd
        gi[:, t] = 1.0 / (1.0 + np.exp(-z[:, :hd]))
        gf[:, t] = 1.0 / (1.0 + np.exp(-z[:, hd:2 * hd]))
        gg[:, t] = np.tanh(z[:, 2 * hd:3 * hd])
        go[:, t] = 1.0 / (1.0 + np.exp(-z[:, 3 * hd:]))
        c = gi[:, t] * gg[:, t] if c is None else gf[:, t] * c + gi[:, t] * gg[:, t]
        cs[:, t] = c
        tc[:, t] = np.tanh(c)
        h = go[:, t] * tc[:, t]
        hs[:, t] = h

    def backward(g):
        dz = np.empty((n, t_len, 4 * hd), dtype=g.dtype)
        dh_next = np.zeros((n, hd), dtype=g.dtype)
        dc_next = np.zeros((n, hd), dtype=g.dtype)
        for t in range(t_len - 1, -1, -1):
            i, f, gg_t, o = gi[:, t], gf[:, t], gg[:, t], go[:, t]
            dh = g[:, t] + dh_next
            dct = dh * o * (1.0 - tc[:, t] * tc[:, t]) + dc_next
            c_prev = cs[:, t - 1] if t > 0 else 0.0
            dz[:, t, :hd] = dct * gg_t * i * (1.0 - i)
            dz[:, t, hd:2 * hd] = dct * c_prev * f * (1.0 - f)
            dz[:, t, 2 * hd:3 * hd] = dct * i * (1.0 - gg_t * gg_t)
            dz[:, t, 3 * hd:] = dh * tc[:, t] * o * (1.0 - o)
            dh_next = dz[:, t] @ whd.T
            dc_next = dct * f
        dz2 = dz.reshape(n * t_len, 4 * hd)
        if x.requires_grad:
            _accum(x, (dz2 @ wxd.T).reshape(n, t_len, c_in))
        if wx.requires_grad:
            _accum(wx, x2.T @ dz2)
        if b.requires_grad:
            _accum(b, dz2.sum(axis=0))
        if wh.requires_grad:
            # wh sees h_{t-1}, i.e. steps 0..T-2 feeding gates 1..T-1
            h_prev = hs[:, :t_len - 1].reshape(-1, hd)
            _accum(wh, h_prev.T @ dz[:, 1:].reshape(-1, 4 * hd))

    return _make(hs, (x, wx, wh, b), backward)


def mhsa_block(x, params, n_heads, return_attn=False):
    """One pre-norm transformer encoder block over the middle axis.

    x: [N, T, C]. ``params`` is a mapping with keys ln1_g, ln1_b, wq, wk,
    wv, bq, bk, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2. No positional
    encoding, so the block is equivariant to permutations of the T axis.
    """
    x = as_tensor(x)
    n, t_len, c = x.shape
    if c % n_heads:
        raise ConfigError(f"model width {c} not divisible by n_heads={n_heads}")
    dh = c // n_heads

    h = layer_norm(x, params["ln1_g"], params["ln1_b"])

    def heads(w, bias):
        proj = T.matmul(h, w) + bias  # [N, T, C]
        return proj.reshape(n, t_len, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(params["wq"], params["bq"])
    k = heads(params["wk"], params["bk"])
    v = heads(params["wv"], params["bv"])
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)  # rows sum to 1
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t_len, c)
    x = x + T.matmul(ctx, params["wo"]) + params["bo"]

    h2 = layer_norm(x, params["ln2_g"], params["ln2_b"])
    y = T.relu(T.matmul(h2, params["w1"]) + params["b1"])
    out = x + T.matmul(y, params["w2"]) + params["b2"]
    if return_attn:
        return out, attn
    return out


# -- resampling -------------------------------------------------------------

_INTERP_CACHE = {}


def _interp_matrix(n_out, n_in):
    """1-D bilinear weights, half-pixel-centered (align_corners=False)."""
    key = (n_out, n_in)
    if key in _INTERP_CACHE:
        return _INTERP_CACHE[key]
    idx = np.arange(n_out)
    src = (idx + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    t = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[idx, i0] += 1.0 - t
    m[idx, i1] += t
    _INTERP_CACHE[key] = m
    return m


def bilinear_upsample(x, h_out, w_out):
    """Bilinear interpolation of [N,C,h,w] up to [N,C,h_out,w_out]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("bilinear_upsample expects [N, C, H, W]")
    n, c, h, w = x.shape
    if h_out < h or w_out < w:
        raise ConfigError("bilinear_upsample does not downscale")
    ry = _interp_matrix(h_out, h).astype(x.dtype)
    rx = _interp_matrix(w_out, w).astype(x.dtype)

    tmp = x.data @ rx.T  # [N, C, h, W]
    out_data = (tmp.transpose(0, 1, 3, 2) @ ry.T).transpose(0, 1, 3, 2)

    def backward(g):
        gt = (g.transpose(0, 1, 3, 2) @ ry).transpose(0, 1, 3, 2)  # [N, C, h, W]
        _accum(x, gt @ rx)

    return _make(out_data, (x,), backward)


def space_to_depth(x, s):
    """Move s x s spatial blocks into channels: [N,C,H,W] -> [N,s*s*C,H/s,W/s].

    Output channel b*C + c holds original channel c at sub-pixel offset b,
    with b enumerating (dy, dx) in row-major order. Inverse of
    :func:`depth_to_space`.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if s < 1:
        raise ConfigError("block size must be >= 1")
    if h % s or w % s:
        raise ShapeError(f"spatial dims ({h}, {w}) not divisible by s={s}")
    hs, ws = h // s, w // s
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, hs, s, ws, s).transpose(0, 3, 5, 1, 2, 4)
    ).reshape(n, s * s * c, hs, ws)

    def backward(g):
        gx = g.reshape(n, s, s, c, hs, ws).transpose(0, 3, 4, 1, 5, 2).reshape(n, c, h, w)
        _accum(x, np.ascontiguousarray(gx))

    return _make(out_data, (x,), backward)


def depth_to_space(x, s):
    """Inverse of :func:`space_to_depth`."""
    x = as_tensor(x)
    n, c2, hs, ws = x.shape
    if s < 1:
        raise ConfigError("block size must be >= 1")
    if c2 % (s * s):
        raise ShapeError(f"channel count {c2} not divisible by s*s={s * s}")
    c = c2 // (s * s)
    out_data = np.ascontiguousarray(
        x.data.reshape(n, s, s, c, hs, ws).transpose(0, 3, 4, 1, 5, 2)
    ).reshape(n, c, hs * s, ws * s)

    def backward(g):
        gx = g.reshape(n, c, hs, s, ws, s).transpose(0, 3, 5, 1, 2, 4).reshape(n, c2, hs, ws)
        _accum(x, np.ascontiguousarray(gx))

    return _make(out_data, (x,), backward)


# -- verification ------------------------------------------------------------


def grad_check(fn, inputs, tolerance=1e-4, step=1e-5, max_elems=64, seed=0):
    """Compare reverse-mode gradients against central finite differences.

    ``fn(*inputs)`` must be pure and return a Tensor; it is reduced to a
    scalar through a fixed random projection so gradients are generic.
    ``inputs`` should be float64 tensors. Large inputs are spot-checked on
    ``max_elems`` deterministic sample positions. Returns a report dict with
    the max relative error; raises :class:`GradCheckError` on non-finite
    values.
    """
    rng = np.random.default_rng(seed)
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)  # FD loop perturbs a flat view
        t.requires_grad = True
        t.grad = None

    out = fn(*inputs)
    proj = rng.uniform(-1.0, 1.0, size=out.shape)

    def loss_value():
        with no_grad():
            return float(np.sum(fn(*inputs).data * proj))

    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("forward pass produced non-finite values")
    loss = T.tsum(out * Tensor(proj))
    loss.backward()

    max_rel = 0.0
    n_checked = 0
    per_input = []
    for t in inputs:
        if t.grad is None:
            raise GradCheckError("no gradient reached an input")
        if not np.all(np.isfinite(t.grad)):
            raise GradCheckError("non-finite analytic gradient")
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        if flat.size <= max_elems:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=max_elems, replace=False)
        worst = 0.0
        for i in picks:
            keep = flat[i]
            flat[i] = keep + step
            up = loss_value()
            flat[i] = keep - step
            down = loss_value()
            flat[i] = keep
            numeric = (up - down) / (2.0 * step)
            analytic = gflat[i]
            scale = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / scale)
        per_input.append({"shape": t.shape, "n_checked": int(picks.size), "max_rel_error": worst})
        max_rel = max(max_rel, worst)
        n_checked += int(picks.size)
    return {
        "max_rel_error": max_rel,
        "n_checked": n_checked,
        "tolerance": tolerance,
        "passed": max_rel <= tolerance,
        "per_input": per_input,
    }
