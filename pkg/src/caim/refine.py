"""Stage 3: multiscale temporal CAM refinement, fusion and area inference.

Each coarse head's pre-softmax logit map is refolded at scales 2 and 4
(space-to-depth), every coarse pixel row is scored against a small fully
connected layer's weights, the scores are min-max normalized per sample and
class, and the map is bilinearly upsampled back. The four resulting maps
are summed into the fused moment logits; the binary change area is read
off those same logits, so a pixel's predicted area and predicted moment can
never disagree: class 0's logit is carried over as the no-change score and
the maximum over classes 1..T-1 is the change score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TsiCube
from .encoder import (adjacent_diff, boundary_enhance, encode,
                      init_boundary_params, init_encoder_params,
                      stack_time_batch, unstack_time_batch)
from .errors import ConfigError, ShapeError
from .kernels import bilinear_upsample, space_to_depth
from .moment import (extractor1, extractor2, init_extractor1_params,
                     init_extractor2_params, init_spatiotemporal_params,
                     spatiotemporal)
from .tensor import ParamStore, Tensor, as_tensor, no_grad

NORM_EPS = 1e-8


@dataclass
class ModelConfig:
    t_len: int = 6
    bands: int = 4
    channels: int = 64
    hidden: int = 32
    n_heads: int = 4
    ffn_mult: int = 2
    extractor2_mid: int = 64
    cam_scales: tuple = (2, 4)
    signed_diff: bool = False

    def __post_init__(self):
        if self.t_len < 2:
            raise ConfigError("t_len must be >= 2")
        if self.channels % self.n_heads:
            raise ConfigError("channels must be divisible by n_heads")
        if any(s < 1 for s in self.cam_scales):
            raise ConfigError("cam scales must be positive")


@dataclass
class MomentPrediction:
    """All moment outputs of one forward pass.

    fine_moment: [B, T, H, W] probabilities (softmax of fused_logits);
    moments: four supplementary [B, T, H, W] probability maps, one per CAM;
    fused_logits: [B, T, H, W] sum of the four CAMs before the softmax;
    aux_class_probs: four [B, T] per-sample class distributions from the
    CAM heads' pooled classifier path.
    """

    fine_moment: Tensor
    moments: list
    fused_logits: Tensor
    aux_class_probs: list = field(default_factory=list)


@dataclass
class AreaPrediction:
    """probs: [B, 2, H, W]; channel 0 = no change, channel 1 = change.
    ``logits`` keeps the pre-softmax score pair so argmax decisions can be
    taken on exactly the values the moment head saw."""

    probs: Tensor
    logits: Tensor = None


def init_cam_head_params(store, t_len, scales=(2, 4), prefix="cam"):
    """One FC head per (coarse branch, scale): weight [T, s*s*T], bias [T]."""
    for branch in (1, 2):
        for s in scales:
            n_in = s * s * t_len
            store.param(f"{prefix}{branch}_s{s}.w", (t_len, n_in), fan_in=n_in)
            store.param(f"{prefix}{branch}_s{s}.b", (t_len,), init="zeros")


def temporal_cam(coarse, fc_w, fc_b, s):
    """Class-activation map of one coarse logit map at one scale.

    coarse: [B, T, H, W] pre-softmax logits, H and W divisible by s.
    Returns (cam [B, T, H, W], aux [B, T]): the per-pixel activation scores
    against the head's weights, min-max normalized to [0, 1] per (sample,
    class) and upsampled back; and the softmax of the head applied to the
    sample-pooled features.
    """
    coarse = as_tensor(coarse)
    if coarse.ndim != 4:
        raise ShapeError("temporal_cam expects [B, T, H, W]")
    b, t_len, h, w = coarse.shape
    if h % s or w % s:
        raise ShapeError(f"spatial size {h}x{w} not divisible by scale {s}")
    fc_w = as_tensor(fc_w)
    fc_b = as_tensor(fc_b)

    folded = space_to_depth(coarse, s)  # [B, s*s*T, H/s, W/s]
    hs, ws = h // s, w // s
    rows = folded.transpose(0, 2, 3, 1).reshape(b * hs * ws, s * s * t_len)

    pooled = rows.reshape(b, hs * ws, s * s * t_len).mean(axis=1)  # [B, s*s*T]
    aux = T.softmax(T.matmul(pooled, fc_w.transpose()) + fc_b, axis=1)

    scores = T.matmul(rows, fc_w.transpose())  # [B*hs*ws, T]
    sc = scores.reshape(b, hs * ws, t_len)
    mn = T.tmin(sc, axis=1).reshape(b, 1, t_len)
    mx = T.tmax(sc, axis=1).reshape(b, 1, t_len)
    normed = (sc - mn) / (mx - mn + NORM_EPS)
    cam_small = normed.reshape(b, hs, ws, t_len).transpose(0, 3, 1, 2)
    return bilinear_upsample(cam_small, h, w), aux


def fuse_fine_moment(cams, auxes=None):
    """Sum four CAMs into fused logits; softmax each and the sum.

    The order of the four maps does not matter for the fused output.
    """
    if len(cams) != 4:
        raise ShapeError(f"expected four CAMs, got {len(cams)}")
    shapes = {tuple(c.shape) for c in cams}
    if len(shapes) != 1:
        raise ShapeError(f"CAM shapes differ: {sorted(shapes)}")
    moments = [T.softmax(c, axis=1) for c in cams]
    fused = cams[0] + cams[1] + cams[2] + cams[3]
    return MomentPrediction(
        fine_moment=T.softmax(fused, axis=1),
        moments=moments,
        fused_logits=fused,
        aux_class_probs=list(auxes) if auxes else [],
    )


def infer_area(fused_logits):
    """Binary change scores from the fused moment logits.

    Per pixel with logits m: the no-change score is m[0] and the change
    score is max(m[1:]); a softmax over the pair gives the area
    probabilities. Because both views read the same logits, argmax(area)
    says "change" exactly when argmax(moment) is a nonzero class (ties
    resolve to the lower index in both).
    """
    fused_logits = as_tensor(fused_logits)
    if fused_logits.ndim != 4 or fused_logits.shape[1] < 2:
        raise ShapeError("infer_area expects [B, T, H, W] with T >= 2")
    no_change = fused_logits[:, 0:1]
    change = T.tmax(fused_logits[:, 1:], axis=1, keepdims=True)
    pair = T.concatenate([no_change, change], axis=1)
    return AreaPrediction(probs=T.softmax(pair, axis=1), logits=pair)


def init_model_params(cfg, seed=0, dtype=None):
    """Fresh ParamStore with every stage registered in a fixed order."""
    kwargs = {} if dtype is None else {"dtype": dtype}
    store = ParamStore(seed=seed, **kwargs)
    init_encoder_params(store, cfg.bands, cfg.channels)
    init_boundary_params(store, cfg.t_len, cfg.channels)
    init_spatiotemporal_params(store, cfg.channels, cfg.hidden, cfg.ffn_mult)
    init_extractor1_params(store, cfg.hidden)
    init_extractor2_params(store, cfg.t_len, cfg.hidden, cfg.extractor2_mid)
    init_cam_head_params(store, cfg.t_len, cfg.cam_scales)
    return store


def forward(x, store, cfg):
    """Full pipeline on a [T, B, C, H, W] tensor; used by training (keeps
    the graph) and by :func:`predict` (under no_grad)."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError("forward expects [T, B, C, H, W]")
    t_len, batch = x.shape[0], x.shape[1]
    if t_len != cfg.t_len:
        raise ShapeError(f"model built for t_len={cfg.t_len}, input has {t_len}")

    feats = encode(stack_time_batch(x), store)
    feats = unstack_time_batch(feats, t_len, batch)
    diffs = adjacent_diff(feats, signed=cfg.signed_diff)
    diffs = boundary_enhance(diffs, store)
    hid = spatiotemporal(diffs, store, cfg.hidden, cfg.n_heads)
    logits1, _ = extractor1(hid, store)
    logits2, _ = extractor2(hid, store)

    cams, auxes = [], []
    for branch_logits, branch in ((logits1, 1), (logits2, 2)):
        for s in cfg.cam_scales:
            cam, aux = temporal_cam(branch_logits,
                                    store[f"cam{branch}_s{s}.w"],
                                    store[f"cam{branch}_s{s}.b"], s)
            cams.append(cam)
            auxes.append(aux)
    pred = fuse_fine_moment(cams, auxes)
    return pred, infer_area(pred.fused_logits)


def _as_batch(cube):
    if isinstance(cube, TsiCube):
        return cube.images[None]
    arr = np.asarray(cube, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise ShapeError("predict expects a TsiCube, [T,C,H,W] or [B,T,C,H,W]")
    return arr


def predict(cube, store, cfg):
    """Inference entry point; deterministic for fixed parameters.

    Accepts a TsiCube, a [T, C, H, W] array or a [B, T, C, H, W] batch.
    Returns (MomentPrediction, AreaPrediction) without gradient graphs.
    """
    batch = _as_batch(cube)
    scale = max(cfg.cam_scales)
    if batch.shape[3] % scale or batch.shape[4] % scale:
        raise ShapeError(f"spatial size must be divisible by {scale}")
    x = np.ascontiguousarray(batch.transpose(1, 0, 2, 3, 4))
    with no_grad():
        return forward(Tensor(x), store, cfg)


def argmax_maps(pred, area):
    """Per-pixel argmax grids as numpy: (moment [B,H,W] u16, area [B,H,W] u8).

    Decisions are taken on the pre-softmax logits (same ordering as the
    probabilities); np.argmax resolves ties toward the lower class index.
    """
    moment = np.argmax(pred.fused_logits.data, axis=1).astype(np.uint16)
    area_logits = area.logits.data if area.logits is not None else area.probs.data
    area_map = np.argmax(area_logits, axis=1).astype(np.uint8)
    return moment, area_map
