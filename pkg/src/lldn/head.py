"""Confidence and classification heads, and their losses."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DICE_EPS = 1e-12
N_CLS = 7


def init_head(rng, c_out: int = 64, n_cls: int = N_CLS, dtype=np.float32) -> dict:
    p = {}
    for name, n_last in (("conf", 1), ("cls", n_cls)):
        p[f"head.{name}1.w"] = ad.glorot(rng, (c_out, 2 * c_out), c_out, 2 * c_out, dtype)
        p[f"head.{name}1.b"] = np.zeros(2 * c_out, dtype)
        p[f"head.{name}2.w"] = ad.glorot(rng, (2 * c_out, n_last), 2 * c_out, n_last, dtype)
        p[f"head.{name}2.b"] = np.zeros(n_last, dtype)
    return p


def head_forward(features: Tensor, w: dict):
    """``(B, H, W, C_out)`` features to ``(confidence, cls_probs, conf_logits, cls_logits)``.

    Confidence is ``(B, H, W)`` after a grid-wise sigmoid; class
    probabilities are ``(B, H, W, N_cls)`` after a grid-wise softmax.
    """
    c = w["head.conf1.w"].shape[0]
    if features.shape[-1] != c:
        raise ad.ShapeError("head_forward", f"feature channels {features.shape[-1]} vs head input {c}")
    h = ad.relu(ad.linear(features, w["head.conf1.w"], w["head.conf1.b"]))
    conf_logits = ad.linear(h, w["head.conf2.w"], w["head.conf2.b"])
    conf_logits = ad.reshape(conf_logits, conf_logits.shape[:-1])
    h = ad.relu(ad.linear(features, w["head.cls1.w"], w["head.cls1.b"]))
    cls_logits = ad.linear(h, w["head.cls2.w"], w["head.cls2.b"])
    return ad.sigmoid(conf_logits), ad.softmax(cls_logits, axis=-1), conf_logits, cls_logits


def soft_dice_loss(conf_pred: Tensor, conf_label) -> Tensor:
    """``1 - 2 sum(x*y) / (sum(x^2) + sum(y^2) + eps)``, averaged over a leading batch axis.

    A 2-D prediction is treated as a single map.
    """
    label = np.asarray(conf_label, dtype=conf_pred.dtype)
    if label.shape != conf_pred.shape:
        raise ad.ShapeError("soft_dice_loss", f"prediction {conf_pred.shape} vs label {label.shape}")
    pred = conf_pred if conf_pred.ndim == 3 else ad.reshape(conf_pred, (1, *conf_pred.shape))
    lab = label if label.ndim == 3 else label[None]
    y = Tensor(lab)
    num = ad.sum_reduce(ad.mul(pred, y), axis=(1, 2))
    den = ad.add(ad.sum_reduce(ad.square(pred), axis=(1, 2)),
                 Tensor((lab * lab).sum(axis=(1, 2)) + DICE_EPS))
    ratio = ad.div(num, den)
    return ad.sub(Tensor(np.ones((), dtype=pred.dtype)), ad.scale(ad.mean_reduce(ratio), 2.0))


def cross_entropy_loss(cls_logits: Tensor, cls_label) -> Tensor:
    """Mean over grids of ``-log softmax(logits)[label]``."""
    labels = np.asarray(cls_label)
    n_cls = cls_logits.shape[-1]
    if labels.shape != cls_logits.shape[:-1]:
        raise ad.ShapeError("cross_entropy_loss", f"logits {cls_logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in 0..{n_cls - 1}")
    onehot = np.eye(n_cls, dtype=cls_logits.dtype)[labels.astype(np.int64)]
    picked = ad.sum_reduce(ad.mul(ad.log_softmax(cls_logits, axis=-1), Tensor(onehot)))
    return ad.scale(picked, -1.0 / max(labels.size, 1))


def total_loss(dice: Tensor, ce: Tensor) -> Tensor:
    if not (math.isfinite(float(dice.data)) and math.isfinite(float(ce.data))):
        raise FloatingPointError("non-finite loss term")
    return ad.add(dice, ce)


def confidence_label(cls_label) -> np.ndarray:
    return (np.asarray(cls_label) > 0).astype(np.float64)
