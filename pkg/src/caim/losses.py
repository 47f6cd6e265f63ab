"""Focal weighted cross-entropy and the combined training objective.

Per pixel with true-class probability p, the loss is
``w * (1 - p)**gamma * -log(p + eps)`` averaged over all pixels, where w is
a class weight derived from the training-set class fractions. Three weight
modes are available; the default turns the raw fractions into normalized
inverse frequencies so rare change pixels are up-weighted rather than
drowned out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ChangeLabels
from .errors import ConfigError, ShapeError
from .tensor import as_tensor, gather_class

WEIGHT_MODES = ("inverse_frequency", "complement", "literal_ratio")
RATIO_FLOOR = 1e-6


@dataclass
class LossConfig:
    gamma: float = 2.0
    class_weight_mode: str = "inverse_frequency"
    eps: float = 1e-12
    area_ratios: np.ndarray = None
    moment_ratios: np.ndarray = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.class_weight_mode not in WEIGHT_MODES:
            raise ConfigError(
                f"class_weight_mode must be one of {WEIGHT_MODES}, got {self.class_weight_mode!r}")
        for name in ("area_ratios", "moment_ratios"):
            r = getattr(self, name)
            if r is not None:
                r = np.asarray(r, dtype=np.float64)
                if abs(r.sum() - 1.0) > 1e-6:
                    raise ConfigError(f"{name} must sum to 1, got {r.sum()}")
                setattr(self, name, r)


def class_weights(ratios, mode):
    """Per-class weights from raw class fractions.

    literal_ratio: w = r. complement: w = 1 - r. inverse_frequency:
    w = (1/max(r, floor)) normalized to sum to 1.
    """
    r = np.asarray(ratios, dtype=np.float64)
    if mode == "literal_ratio":
        return r.copy()
    if mode == "complement":
        return 1.0 - r
    if mode == "inverse_frequency":
        inv = 1.0 / np.maximum(r, RATIO_FLOOR)
        return inv / inv.sum()
    raise ConfigError(f"unknown class_weight_mode {mode!r}")


def fwcl(pred_probs, labels, cfg, ratios=None):
    """Focal weighted cross-entropy over [B, K, H, W] probabilities.

    ``labels`` is an integer [B, H, W] grid of true classes. ``ratios``
    supplies the class fractions for the weight computation; when None,
    all classes weigh 1. Returns a scalar Tensor (mean over all pixels).
    """
    pred_probs = as_tensor(pred_probs)
    if pred_probs.ndim != 4:
        raise ShapeError("fwcl expects [B, K, H, W] probabilities")
    k = pred_probs.shape[1]
    lab = np.asarray(labels)
    if lab.shape != (pred_probs.shape[0],) + pred_probs.shape[2:]:
        raise ShapeError(f"labels {lab.shape} do not match predictions {pred_probs.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ConfigError(f"labels must lie in [0, {k}), found [{lab.min()}, {lab.max()}]")
    lab = lab.astype(np.int64)

    p_true = gather_class(pred_probs, lab)  # [B, H, W]
    nll = -T.tlog(p_true + cfg.eps)
    if cfg.gamma > 0:
        nll = ((1.0 - p_true) ** cfg.gamma) * nll
    if ratios is not None:
        w = class_weights(ratios, cfg.class_weight_mode).astype(pred_probs.dtype)
        nll = T.Tensor(w[lab]) * nll
    return nll.mean()


def stack_labels(labels):
    """Normalize labels to (moment [B,H,W], area [B,H,W]) integer arrays.

    Accepts one ChangeLabels, a list of them, or a pre-stacked
    (moment, area) pair.
    """
    if isinstance(labels, ChangeLabels):
        labels = [labels]
    if isinstance(labels, (list, tuple)) and labels and isinstance(labels[0], ChangeLabels):
        moment = np.stack([l.moment for l in labels]).astype(np.int64)
        area = np.stack([l.area for l in labels]).astype(np.int64)
        return moment, area
    moment, area = labels
    return np.asarray(moment, dtype=np.int64), np.asarray(area, dtype=np.int64)


def total_loss(pred, area, labels, cfg):
    """Combined objective: fine moment + area + mean of the four
    supplementary moment losses. Returns (scalar Tensor, per-term dict)."""
    moment_labels, area_labels = stack_labels(labels)
    l_moment = fwcl(pred.fine_moment, moment_labels, cfg, cfg.moment_ratios)
    l_area = fwcl(area.probs, area_labels, cfg, cfg.area_ratios)
    sup = [fwcl(m, moment_labels, cfg, cfg.moment_ratios) for m in pred.moments]
    total = l_moment + l_area + (sup[0] + sup[1] + sup[2] + sup[3]) * 0.25
    parts = {
        "moment": float(l_moment.data),
        "area": float(l_area.data),
        **{f"moment_sup{i + 1}": float(s.data) for i, s in enumerate(sup)},
        "total": float(total.data),
    }
    return total, parts


def compute_class_ratios(dataset, t_len):
    """Class fractions over every pixel of a [(cube, labels), ...] dataset.

    Returns (area_ratios [2], moment_ratios [t_len]); computed once before
    training.
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("cannot compute class ratios of an empty dataset")
    area_counts = np.zeros(2, dtype=np.int64)
    moment_counts = np.zeros(t_len, dtype=np.int64)
    for _, labels in dataset:
        area_counts += np.bincount(labels.area.ravel().astype(np.int64), minlength=2)[:2]
        mc = np.bincount(labels.moment.ravel().astype(np.int64), minlength=t_len)
        if mc.size > t_len:
            raise ConfigError("moment label outside the configured time range")
        moment_counts += mc
    total = area_counts.sum()
    return area_counts / total, moment_counts / total
