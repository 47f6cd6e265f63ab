#!/usr/bin/env python3
"""Tour of the differentiable substrate every network stage is built on.

Tensors wrap numpy arrays and record a reverse-mode graph; backward() fills
.grad on every parameter. grad_check compares those gradients against
central finite differences, which is how the whole operator set is kept
honest.
"""

import numpy as np

from caim import Tensor, conv2d, grad_check, group_norm, softmax
from caim.kernels import bilinear_upsample, lstm_seq, mhsa_block, space_to_depth
from caim.tensor import ParamStore

rng = np.random.default_rng(0)

# ------------------------------------------------------------- gradients
x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
y = (x * x).sum()
y.backward()
print("d(sum x^2)/dx == 2x:", np.allclose(x.grad, 2 * x.data))

# ------------------------------------------------------------------ conv
img = Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float64))
ident = np.zeros((3, 3, 3, 3))
for c in range(3):
    ident[c, c, 1, 1] = 1.0
out = conv2d(img, Tensor(ident), padding=1)
print("identity 3x3 kernel reproduces the input:",
      np.abs(out.data - img.data).max() == 0)

report = grad_check(lambda a, w: conv2d(a, w, padding=1),
                    [Tensor(rng.normal(size=(2, 3, 6, 6))),
                     Tensor(rng.normal(size=(4, 3, 3, 3)))])
print(f"conv2d finite-difference check: max rel err {report['max_rel_error']:.2e}")

# ------------------------------------------------------------- group norm
feat = Tensor(rng.normal(size=(2, 8, 5, 5)) * 7 + 3)
normed = group_norm(feat, 4, Tensor(np.ones(8)), Tensor(np.zeros(8)))
per_group = normed.data.reshape(2, 4, -1)
print("group means ~0:", np.abs(per_group.mean(axis=2)).max() < 1e-6,
      " group vars ~1:", np.abs(per_group.var(axis=2) - 1).max() < 1e-3)

# ---------------------------------------------------------------- softmax
probs = softmax(Tensor(np.array([[1.0, 2.0, 3.0]])), axis=1)
print("softmax([1,2,3]):", np.round(probs.data[0], 5))

# --------------------------------------------------- sequence operators
tokens = Tensor(rng.normal(size=(4, 5, 8)))   # 4 sequences, 5 steps, width 8
store = ParamStore(seed=1)
hid = lstm_seq(tokens, store.param("wx", (8, 16), fan_in=8),
               store.param("wh", (4, 16), fan_in=4),
               store.param("b", (16,), init="zeros"), hidden=4)
print("lstm hidden states:", hid.shape)

attn_params = {"ln1_g": store.param("g1", (8,), init="ones"),
               "ln1_b": store.param("bln1", (8,), init="zeros"),
               "ln2_g": store.param("g2", (8,), init="ones"),
               "ln2_b": store.param("bln2", (8,), init="zeros"),
               "wo": store.param("wo", (8, 8), fan_in=8),
               "bo": store.param("bo", (8,), init="zeros"),
               "w1": store.param("w1", (8, 16), fan_in=8),
               "b1": store.param("bf1", (16,), init="zeros"),
               "w2": store.param("w2", (16, 8), fan_in=16),
               "b2": store.param("bf2", (8,), init="zeros")}
for gate in ("q", "k", "v"):
    attn_params[f"w{gate}"] = store.param(f"w{gate}", (8, 8), fan_in=8)
    attn_params[f"b{gate}"] = store.param(f"b{gate}", (8,), init="zeros")
mixed, weights = mhsa_block(tokens, attn_params, n_heads=2, return_attn=True)
print("attention rows sum to one:",
      np.abs(weights.data.sum(axis=-1) - 1).max() < 1e-6)

# -------------------------------------------------------- spatial movers
tiny = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
folded = space_to_depth(tiny, 2)
print("space_to_depth moves the 2x2 block into channels:", folded.data.ravel())
up = bilinear_upsample(tiny, 4, 4)
print("bilinear 2x2 -> 4x4:\n", up.data[0, 0])
