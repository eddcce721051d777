"""Masked reconstruction, dynamic-weighted segmentation, and their blend.

The blend is ``λ·L_rec + (1-λ)·L_seg``. The object weight is
``α = l · S_img / S_obj`` clamped to ``[1, α_max]`` on foreground pixels and
1 elsewhere; both the BCE and the soft-IoU sums are weighted per pixel and
the BCE is normalised by ``Σ W``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .backbone import MaskPlan, patchify
from .tensor import Tensor, as_tensor, reshape, sigmoid
from .tensor.core import make_result


@dataclass
class LossWeights:
    lam: float = 0.1
    l: float = 1.0  # noqa: E741
    alpha_max: float = 20.0

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.l <= 0:
            raise ValueError(f"area-scaling constant l must be > 0, got {self.l}")
        if self.alpha_max < 1:
            raise ValueError(f"alpha_max must be >= 1, got {self.alpha_max}")


@dataclass
class WeightMap:
    W: np.ndarray
    alpha: Optional[float]  # None when the mask has no foreground
    alpha_raw: Optional[Fraction] = None


def _check_binary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool and not np.isin(m, (0, 1)).all():
        raise ValueError("ground-truth mask must be binary (values 0/1)")
    return m.astype(bool)


def dynamic_weight(gt_mask: np.ndarray, weights: LossWeights = LossWeights(), dtype=np.float64) -> WeightMap:
    """Area-inverse foreground weight map.

    ``alpha_raw`` is the exact pre-clamp rational ``l·S_img/S_obj`` when
    ``l`` is rational-representable (always, for floats).
    """
    m = _check_binary(gt_mask)
    s_img = m.size
    s_obj = int(m.sum())
    if s_obj == 0:
        return WeightMap(np.ones(m.shape, dtype), None, None)
    raw = Fraction(weights.l) * Fraction(s_img, s_obj)
    alpha = float(min(max(float(raw), 1.0), weights.alpha_max))
    return WeightMap(np.where(m, alpha, 1.0).astype(dtype), alpha, raw)


def bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise ``max(z,0) - z·g + log(1 + e^{-|z|})``."""
    x = z.data
    g = np.asarray(target, dtype=x.dtype)
    out = np.maximum(x, 0) - x * g + np.log1p(np.exp(-np.abs(x)))

    def bw(grad):
        e = np.exp(-np.abs(x))
        p = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
        return (grad * (p - g),)

    return make_result(out, (z,), "bce_with_logits", bw)


def seg_loss(logits: Tensor, gt: np.ndarray, wm: Union[WeightMap, np.ndarray, Sequence[WeightMap]]) -> Tensor:
    """Weighted BCE (normalised by ΣW) plus weighted soft-IoU loss; batch-averaged.

    Accepts ``1×H×W`` logits with an ``H×W`` mask, or ``B×1×H×W`` with ``B×H×W``.
    """
    z = logits
    gt = np.asarray(gt)
    if z.ndim == 3:
        z = reshape(z, (1,) + z.shape)
        gt = gt[None]
    if isinstance(wm, WeightMap):
        W = wm.W[None]
    elif isinstance(wm, np.ndarray):
        W = wm if wm.ndim == 3 else wm[None]
    else:
        W = np.stack([w.W for w in wm])
    b, c, h, w = z.shape
    if c != 1 or gt.shape != (b, h, w) or W.shape != (b, h, w):
        raise ValueError(f"seg_loss: logits {logits.shape}, gt {gt.shape}, W {W.shape} do not match")
    z = reshape(z, (b, h, w))
    g = gt.astype(z.dtype)
    W = W.astype(z.dtype)
    axes = (1, 2)
    bce = (bce_with_logits(z, g) * W).sum(axis=axes) / W.sum(axis=axes)
    p = sigmoid(z)
    inter = (p * (W * g)).sum(axis=axes)
    union = ((p + g - p * g) * W).sum(axis=axes)
    iou = 1.0 - inter / union
    return (bce + iou).mean()


def _plans_mask(plans: Sequence[MaskPlan], n_tokens: int) -> np.ndarray:
    m = np.zeros((len(plans), n_tokens), dtype=bool)
    for i, p in enumerate(plans):
        m[i, p.masked_indices] = True
    return m


def recon_loss(I_rec: Tensor, I_gt, plan: Union[MaskPlan, Sequence[MaskPlan]], patch: int) -> Tensor:
    """MSE over pixels of masked patches only; 0 when nothing is masked."""
    rec = I_rec
    gt = as_tensor(I_gt, dtype=rec.dtype)
    plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
    if rec.ndim == 3:
        rec = reshape(rec, (1,) + rec.shape)
        gt = reshape(gt, (1,) + gt.shape)
    if rec.shape != gt.shape:
        raise ValueError(f"recon_loss: shapes {rec.shape} and {gt.shape} differ")
    rt = patchify(rec, patch)
    gtk = patchify(gt, patch).data
    mask = _plans_mask(plans, rt.shape[1])
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=rec.dtype))
    diff = rt - gtk
    per_token = (diff * diff).mean(axis=-1)
    return (per_token * mask.astype(rec.dtype)).sum() / float(count)


def total_loss(l_seg, l_rec, lam: float):
    """``λ·l_rec + (1-λ)·l_seg``.

    The convex blend keeps the total on the scale of its parts; the additive
    form ``l_seg + λ·l_rec`` differs only by a rescaling of the step size.
    """
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return l_rec * lam + l_seg * (1 - lam)
