"""Composite objective: focal + dice segmentation loss on the aggregated
map, cosine cross-entropy classification against the unfused final-group
text anchor, and the inference-time image score."""

from __future__ import annotations

import numpy as np

from .config import LossConfig
from .errors import ConfigurationError, TrainingError
from .tensor import (NORM_FLOOR, Tensor, clip, concat, log, matmul, maximum_const,
                     reshape, softmax, sqrt, tmean, tsum)

CLAMP_EPS = 1e-7


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def focal_loss(pred, target, gamma=2.0, alpha=0.25):
    """Mean focal term; predictions are clamped away from exact 0/1."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ConfigurationError(
            f"pred shape {pred.data.shape} != target shape {target.shape}")
    p = clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = ((1.0 - p) ** gamma) * log(p) * (-alpha)
    neg = (p ** gamma) * log(1.0 - p) * (alpha - 1.0)
    return tmean(pos * target + neg * (1.0 - target))


def dice_loss(pred, target, smooth=1.0):
    """1 - (2*overlap + smooth) / (mass_pred + mass_target + smooth)."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ConfigurationError(
            f"pred shape {pred.data.shape} != target shape {target.shape}")
    inter = tsum(pred * target)
    denom = tsum(pred) + float(target.sum())
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def seg_loss(pred, target, cfg: LossConfig):
    """Weighted focal + dice on the (upsampled) aggregated map."""
    return (focal_loss(pred, target, cfg.focal_gamma, cfg.focal_alpha) * cfg.lambda_focal
            + dice_loss(pred, target, cfg.dice_smooth) * cfg.lambda_dice)


def _cosine_rows(v, t):
    """Cosine similarity between (B, C) rows and a (C,) vector -> (B, 1)."""
    b, c = v.data.shape
    t2 = reshape(t, (1, c))
    dot = tsum(v * t2, axis=1, keepdims=True)
    nv = sqrt(maximum_const(tsum(v * v, axis=1, keepdims=True), NORM_FLOOR))
    nt = sqrt(maximum_const(tsum(t * t), NORM_FLOOR))
    return dot / (nv * nt)


def cls_probs(v_cls, anchor, temperature):
    """Two-way softmax over cosine similarities to the anchor pair: (B, 2)."""
    t_normal, t_abnormal = anchor
    sims = concat([_cosine_rows(v_cls, t_normal), _cosine_rows(v_cls, t_abnormal)], axis=1)
    return softmax(sims * (1.0 / temperature), axis=-1)


def cls_loss(v_cls, anchor, temperature, labels):
    """Cross-entropy of the anchor-pair softmax against the image labels."""
    labels = np.asarray(labels)
    probs = cls_probs(v_cls, anchor, temperature)
    onehot = np.zeros((labels.shape[0], 2))
    onehot[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    picked = tsum(probs * onehot, axis=1)
    return -tmean(log(clip(picked, CLAMP_EPS * CLAMP_EPS, 1.0)))


def total_loss(seg, cls, cfg: LossConfig):
    for part, label in ((seg, "seg"), (cls, "cls")):
        val = part.data if isinstance(part, Tensor) else part
        if not np.all(np.isfinite(val)):
            raise TrainingError(f"non-finite {label} loss")
    return seg + cls * cfg.lambda_cls


def image_score(p_abnormal, upsampled_map):
    """Mean of the classification probability and the map's pixel maximum."""
    p_abnormal = np.asarray(p_abnormal, dtype=np.float64)
    m = np.asarray(upsampled_map, dtype=np.float64)
    peak = m.reshape(m.shape[0], -1).max(axis=1) if m.ndim == 3 else m.max()
    return 0.5 * (p_abnormal + peak)


def model_loss(model, images, masks, labels, cfg: LossConfig, fusion=None, outputs=None):
    """Total, segmentation, and classification losses for one batch."""
    out = outputs if outputs is not None else model.forward(images, fusion=fusion)
    seg = seg_loss(out.amap.upsampled, masks, cfg)
    cls = cls_loss(out.v_cls, out.anchor, model.config.temperature, labels)
    return total_loss(seg, cls, cfg), seg, cls, out
