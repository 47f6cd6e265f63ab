import math

import numpy as np
import pytest

from caim import kernels as K
from caim import tensor as T
from caim.errors import ConfigError, GradCheckError, ShapeError
from caim.tensor import Tensor


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def conv_loop_oracle(x, w, b, padding):
    """Direct six-loop convolution."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for o in range(cout):
            for yy in range(ho):
                for xx in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for c in range(cin):
                        for dy in range(k):
                            for dx in range(k):
                                acc += w[o, c, dy, dx] * xp[ni, c, yy + dy, xx + dx]
                    out[ni, o, yy, xx] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = rand((2, 3, 8, 8), seed=1)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = K.conv2d(t64(x), t64(w), padding=1)
        assert np.abs(out.data - x).max() == 0

    def test_all_ones_kernel_constant_field(self):
        v = 0.7
        x = np.full((1, 1, 6, 6), v)
        w = np.ones((1, 1, 3, 3))
        out = K.conv2d(t64(x), t64(w), padding=1)
        assert abs(out.data[0, 0, 3, 3] - 9 * v) < 1e-12  # interior pixel

    def test_against_loop_oracle(self):
        x = rand((4, 3, 5, 5), seed=2)
        w = rand((6, 3, 3, 3), seed=3)
        b = rand((6,), seed=4)
        out = K.conv2d(t64(x), t64(w), t64(b), padding=1)
        ref = conv_loop_oracle(x, w, b, 1)
        assert np.abs(out.data - ref).max() <= 1e-6

    def test_1x1_against_loop_oracle(self):
        x = rand((2, 4, 3, 3), seed=5)
        w = rand((5, 4, 1, 1), seed=6)
        out = K.conv2d(t64(x), t64(w))
        ref = conv_loop_oracle(x, w, None, 0)
        assert np.abs(out.data - ref).max() <= 1e-9

    def test_grouped_against_loop_oracle(self):
        x = rand((2, 4, 5, 5), seed=7)
        w = rand((6, 2, 3, 3), seed=8)  # 2 groups
        out = K.conv2d(t64(x), t64(w), padding=1, groups=2)
        ref = np.concatenate([
            conv_loop_oracle(x[:, :2], w[:3], None, 1),
            conv_loop_oracle(x[:, 2:], w[3:], None, 1)], axis=1)
        assert np.abs(out.data - ref).max() <= 1e-9

    def test_stride_two_subsamples(self):
        x = rand((1, 2, 8, 8), seed=9)
        w = rand((3, 2, 3, 3), seed=10)
        out = K.conv2d(t64(x), t64(w), padding=1, stride=2)
        ref = conv_loop_oracle(x, w, None, 1)[:, :, ::2, ::2]
        assert np.abs(out.data - ref).max() <= 1e-9

    def test_shape_and_config_errors(self):
        x = t64(rand((1, 4, 5, 5)))
        with pytest.raises(ConfigError):
            K.conv2d(x, t64(rand((2, 4, 5, 5))))  # 5x5 kernel unsupported
        with pytest.raises(ShapeError):
            K.conv2d(x, t64(rand((2, 3, 3, 3))), padding=1)  # channel mismatch
        with pytest.raises(ShapeError):
            K.conv2d(x, t64(rand((3, 4, 3, 3))), padding=1, groups=3)

    def test_gradients(self):
        rep = K.grad_check(lambda x, w, b: K.conv2d(x, w, b, padding=1),
                           [t64(rand((2, 3, 5, 5), 11)), t64(rand((4, 3, 3, 3), 12)),
                            t64(rand((4,), 13))])
        assert rep["max_rel_error"] <= 1e-6

    def test_depthwise_gradients(self):
        rep = K.grad_check(lambda x, w: K.conv2d(x, w, padding=1, groups=5),
                           [t64(rand((2, 5, 4, 4), 14)), t64(rand((5, 1, 3, 3), 15))])
        assert rep["max_rel_error"] <= 1e-6

    def test_stride_gradients(self):
        rep = K.grad_check(lambda x, w: K.conv2d(x, w, padding=1, stride=2),
                           [t64(rand((1, 2, 6, 6), 16)), t64(rand((3, 2, 3, 3), 17))])
        assert rep["max_rel_error"] <= 1e-6


class TestGroupNorm:
    def test_standardizes_each_group(self):
        x = rand((3, 8, 5, 5), seed=20)
        out = K.group_norm(t64(x), 4, t64(np.ones(8)), t64(np.zeros(8)))
        grouped = out.data.reshape(3, 4, 2 * 25)
        assert np.abs(grouped.mean(axis=2)).max() <= 1e-6
        assert np.abs(grouped.var(axis=2) - 1).max() <= 1e-4

    def test_constant_input_maps_to_zero(self):
        x = np.full((2, 4, 3, 3), 5.0)
        out = K.group_norm(t64(x), 2, t64(np.ones(4)), t64(np.zeros(4)))
        assert np.abs(out.data).max() <= 1e-3  # eps-regularized

    def test_batch_size_independence(self):
        x = rand((1, 8, 4, 4), seed=21)
        big = np.repeat(x, 8, axis=0)
        g, b = t64(np.ones(8)), t64(np.zeros(8))
        out1 = K.group_norm(t64(x), 4, g, b)
        out8 = K.group_norm(t64(big), 4, g, b)
        for i in range(8):
            assert np.abs(out8.data[i] - out1.data[0]).max() <= 1e-12

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ConfigError):
            K.group_norm(t64(rand((1, 6, 2, 2))), 4, t64(np.ones(6)), t64(np.zeros(6)))

    def test_gradients(self):
        rep = K.grad_check(
            lambda x, g, b: K.group_norm(x, 2, g, b),
            [t64(rand((2, 4, 3, 3), 22)), t64(rand((4,), 23)), t64(rand((4,), 24))])
        assert rep["max_rel_error"] <= 1e-6


class TestLstm:
    def test_zero_weights_give_zero_hidden(self):
        hid = 3
        x = t64(rand((2, 4, 5), 30))
        out = K.lstm_seq(x, t64(np.zeros((5, 4 * hid))), t64(np.zeros((hid, 4 * hid))),
                         t64(np.zeros(4 * hid)), hid)
        assert not out.data.any()

    def test_output_shape(self):
        hid = 4
        out = K.lstm_seq(t64(rand((3, 6, 2), 31)), t64(rand((2, 16), 32)),
                         t64(rand((4, 16), 33)), t64(rand((16,), 34)), hid)
        assert out.shape == (3, 6, 4)

    def test_single_step_manual_gate_oracle(self):
        # 1 sample, 1 step, 2 inputs, hidden size 1: evaluate the gate
        # equations by hand with plain math functions.
        hid = 1
        x = np.array([[[0.3, -0.7]]])
        wx = rand((2, 4), 35, scale=0.8)
        wh = rand((1, 4), 36)
        b = rand((4,), 37, scale=0.3)
        out = K.lstm_seq(t64(x), t64(wx), t64(wh), t64(b), hid)
        gates = x[0, 0] @ wx + b  # h0 = 0 so wh does not contribute
        sig = lambda v: 1.0 / (1.0 + math.exp(-v))
        i, f, g, o = sig(gates[0]), sig(gates[1]), math.tanh(gates[2]), sig(gates[3])
        c = i * g
        h = o * math.tanh(c)
        assert abs(out.data[0, 0, 0] - h) <= 1e-6

    def test_gradients(self):
        hid = 3
        rep = K.grad_check(
            lambda x, wx, wh, b: K.lstm_seq(x, wx, wh, b, hid),
            [t64(rand((2, 4, 5), 38)), t64(rand((5, 12), 39) * 0.5),
             t64(rand((3, 12), 40) * 0.5), t64(rand((12,), 41) * 0.5)])
        assert rep["max_rel_error"] <= 1e-6

    def test_single_step_gradients(self):
        # T=1 means the recurrent weights never engage; their grad is zero
        hid = 2
        x = t64(rand((3, 1, 4), 42))
        wx = t64(rand((4, 8), 43) * 0.5)
        wh = Tensor(rand((2, 8), 44) * 0.5, requires_grad=True)
        b = t64(rand((8,), 45) * 0.5)
        out = K.lstm_seq(x, wx, wh, b, hid)
        out.sum().backward()
        assert not wh.grad.any()
        rep = K.grad_check(lambda x, wx, b: K.lstm_seq(x, wx, Tensor(wh.data), b, hid),
                           [x.detach(), wx.detach(), b.detach()])
        assert rep["max_rel_error"] <= 1e-6


def mhsa_params(c, seed=50, scale=0.4):
    rng = np.random.default_rng(seed)
    mk = lambda *shape: Tensor(rng.normal(size=shape) * scale)
    return {
        "ln1_g": Tensor(np.ones(c)), "ln1_b": Tensor(np.zeros(c)),
        "wq": mk(c, c), "wk": mk(c, c), "wv": mk(c, c),
        "bq": mk(c), "bk": mk(c), "bv": mk(c),
        "wo": mk(c, c), "bo": mk(c),
        "ln2_g": Tensor(np.ones(c)), "ln2_b": Tensor(np.zeros(c)),
        "w1": mk(c, 2 * c), "b1": mk(2 * c),
        "w2": mk(2 * c, c), "b2": mk(c),
    }


class TestMhsa:
    def test_single_token_attends_to_itself(self):
        p = mhsa_params(4)
        out, attn = K.mhsa_block(t64(rand((2, 1, 4), 51)), p, 2, return_attn=True)
        assert np.allclose(attn.data, 1.0)
        assert out.shape == (2, 1, 4)

    def test_permutation_equivariance(self):
        p = mhsa_params(6)
        x = rand((2, 5, 6), 52)
        perm = [3, 0, 4, 1, 2]
        out = K.mhsa_block(t64(x), p, 3)
        out_perm = K.mhsa_block(t64(x[:, perm]), p, 3)
        assert np.abs(out.data[:, perm] - out_perm.data).max() <= 1e-10

    def test_attention_rows_sum_to_one(self):
        p = mhsa_params(4)
        _, attn = K.mhsa_block(t64(rand((3, 4, 4), 53)), p, 2, return_attn=True)
        assert np.abs(attn.data.sum(axis=-1) - 1).max() <= 1e-10

    def test_attention_weights_match_direct_oracle(self):
        c, heads = 4, 1
        p = mhsa_params(c, seed=54)
        x = rand((1, 3, c), 55)
        _, attn = K.mhsa_block(t64(x), p, heads, return_attn=True)
        # oracle: softmax(Q K^T / sqrt(d)) from the same pre-norm projections
        mu = x.mean(-1, keepdims=True)
        xn = (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
        q = xn @ p["wq"].data + p["bq"].data
        k = xn @ p["wk"].data + p["bk"].data
        scores = q[0] @ k[0].T / np.sqrt(c)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        ref = e / e.sum(-1, keepdims=True)
        assert np.abs(attn.data[0, 0] - ref).max() <= 1e-6

    def test_width_must_divide_heads(self):
        with pytest.raises(ConfigError):
            K.mhsa_block(t64(rand((1, 2, 6), 56)), mhsa_params(6), 4)

    def test_gradients(self):
        p = mhsa_params(4, seed=57)
        for t in p.values():
            t.data = t.data.astype(np.float64)
        rep = K.grad_check(lambda x: K.mhsa_block(x, p, 2), [t64(rand((2, 3, 4), 58))])
        assert rep["max_rel_error"] <= 1e-6


class TestBilinear:
    def test_constant_preserved(self):
        out = K.bilinear_upsample(t64(np.full((2, 3, 4, 4), 2.5)), 9, 11)
        assert np.abs(out.data - 2.5).max() <= 1e-12

    def test_identity_when_same_size(self):
        x = rand((1, 2, 5, 5), 60)
        out = K.bilinear_upsample(t64(x), 5, 5)
        assert np.abs(out.data - x).max() <= 1e-12

    def test_2x2_to_4x4_against_formula_oracle(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = K.bilinear_upsample(t64(x), 4, 4)

        def sample(img, y, x_):
            # evaluate the half-pixel-centered interpolation formula directly
            h, w = img.shape
            sy = (y + 0.5) * h / 4 - 0.5
            sx = (x_ + 0.5) * w / 4 - 0.5
            y0, x0 = math.floor(sy), math.floor(sx)
            ty, tx = sy - y0, sx - x0
            y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            top = img[y0c, x0c] * (1 - tx) + img[y0c, x1c] * tx
            bot = img[y1c, x0c] * (1 - tx) + img[y1c, x1c] * tx
            return top * (1 - ty) + bot * ty

        ref = np.array([[sample(x[0, 0], y, xx) for xx in range(4)] for y in range(4)])
        assert np.abs(out.data[0, 0] - ref).max() <= 1e-12

    def test_downscale_rejected(self):
        with pytest.raises(ConfigError):
            K.bilinear_upsample(t64(rand((1, 1, 4, 4), 61)), 2, 4)

    def test_gradients(self):
        rep = K.grad_check(lambda x: K.bilinear_upsample(x, 7, 9),
                           [t64(rand((2, 2, 3, 4), 62))])
        assert rep["max_rel_error"] <= 1e-8


class TestSpaceToDepth:
    def test_s1_identity(self):
        x = rand((2, 3, 4, 4), 70)
        out = K.space_to_depth(t64(x), 1)
        assert np.array_equal(out.data, x)

    def test_inverse_pair(self):
        x = rand((2, 3, 6, 8), 71)
        rt = K.depth_to_space(K.space_to_depth(t64(x), 2), 2)
        assert np.array_equal(rt.data, x)
        rt = K.space_to_depth(K.depth_to_space(t64(rand((1, 8, 3, 3), 72)), 2), 2)
        assert rt.shape == (1, 8, 3, 3)

    def test_2x2_enumeration(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = K.space_to_depth(t64(x), 2)
        assert out.shape == (1, 4, 1, 1)
        assert np.array_equal(out.data.ravel(), [1, 2, 3, 4])

    def test_channel_layout_subpixel_outer(self):
        # two channels: block b*C+c must hold channel c at sub-offset b
        x = np.arange(2 * 4 * 4, dtype=np.float64).reshape(1, 2, 4, 4)
        out = K.space_to_depth(t64(x), 2).data
        for b, (dy, dx) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            for c in range(2):
                assert np.array_equal(out[0, b * 2 + c], x[0, c, dy::2, dx::2])

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            K.space_to_depth(t64(rand((1, 1, 5, 4), 73)), 2)

    def test_gradients(self):
        rep = K.grad_check(lambda x: K.depth_to_space(K.space_to_depth(x, 2), 2),
                           [t64(rand((2, 2, 4, 6), 74))])
        assert rep["max_rel_error"] <= 1e-7


class TestChannelsLastPath:
    def test_conv_matches_nchw_layout(self):
        x = rand((2, 3, 5, 6), seed=90)  # NCHW
        w = rand((4, 3, 3, 3), seed=91)
        b = rand((4,), seed=92)
        ref = K.conv2d(t64(x), t64(w), t64(b), padding=1)
        out = K.conv2d_nhwc(t64(x.transpose(0, 2, 3, 1)), t64(w), t64(b), padding=1)
        assert np.abs(out.data.transpose(0, 3, 1, 2) - ref.data).max() <= 1e-12

    def test_1x1_conv_matches(self):
        x = rand((2, 4, 3, 5), seed=93)
        w = rand((6, 4, 1, 1), seed=94)
        ref = K.conv2d(t64(x), t64(w))
        out = K.conv2d_nhwc(t64(x.transpose(0, 2, 3, 1)), t64(w))
        assert np.abs(out.data.transpose(0, 3, 1, 2) - ref.data).max() <= 1e-12

    def test_group_norm_matches_nchw_layout(self):
        x = rand((3, 8, 4, 5), seed=95)
        g, b = rand((8,), 96), rand((8,), 97)
        ref = K.group_norm(t64(x), 4, t64(g), t64(b))
        out = K.group_norm_nhwc(t64(x.transpose(0, 2, 3, 1)), 4, t64(g), t64(b))
        assert np.abs(out.data.transpose(0, 3, 1, 2) - ref.data).max() <= 1e-10

    def test_gradients(self):
        rep = K.grad_check(
            lambda x, w, b: K.conv2d_nhwc(x, w, b, padding=1),
            [t64(rand((2, 4, 5, 3), 98)), t64(rand((4, 3, 3, 3), 99)),
             t64(rand((4,), 100))])
        assert rep["max_rel_error"] <= 1e-6
        rep = K.grad_check(
            lambda x, g, b: K.group_norm_nhwc(x, 2, g, b),
            [t64(rand((2, 3, 3, 4), 101)), t64(rand((4,), 102)),
             t64(rand((4,), 103))])
        assert rep["max_rel_error"] <= 1e-6


class TestGradCheckHarness:
    def test_linear_op_is_nearly_exact(self):
        rep = K.grad_check(lambda x: x * 3.0 + 1.0, [t64(rand((4, 4), 80))])
        assert rep["max_rel_error"] <= 1e-8

    def test_conv_groupnorm_composite(self):
        g = t64(np.ones(4))
        b = t64(np.zeros(4))
        rep = K.grad_check(
            lambda x, w: K.group_norm(K.conv2d(x, w, padding=1), 2, g, b),
            [t64(rand((2, 3, 4, 4), 81)), t64(rand((4, 3, 3, 3), 82))])
        assert rep["max_rel_error"] <= 1e-4

    def test_relu_away_from_kink(self):
        x = rand((5, 5), 83)
        x = np.where(np.abs(x) < 1e-2, 0.3, x)
        rep = K.grad_check(lambda x: T.relu(x), [t64(x)])
        assert rep["max_rel_error"] <= 1e-6

    def test_non_finite_forward_raises(self):
        with np.errstate(invalid="ignore"):
            with pytest.raises(GradCheckError):
                K.grad_check(lambda x: T.tlog(x), [t64(np.array([-1.0, 2.0]))])
