"""Segmentation quality metrics and topology diagnostics.

Definitions follow the usual salient/camouflaged-object evaluation toolkits:

* structure measure: ``0.5·S_object + 0.5·S_region``; an all-background
  ground truth scores ``1 - mean(pred)``, an all-foreground one ``mean(pred)``.
* weighted F-measure: distance-weighted errors, 7×7 Gaussian (σ = 5),
  β² = 1. An empty ground truth scores 1 if the prediction is all zero and
  0 otherwise.
* mean E-measure: enhanced-alignment score averaged over the 256 thresholds
  ``t_k = k/256, k = 1..256`` (``pred >= t_k``), normalised by the pixel
  count so a perfect prediction scores exactly 1.

Connectivity is 8-connected throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage
from skimage.morphology import thin

EPS = np.spacing(1.0)
N_THRESHOLDS = 256
EIGHT = np.ones((3, 3), dtype=bool)
METRIC_NAMES = ("s_alpha", "f_beta_w", "mean_e", "mae", "iou", "skeleton_recall", "cc_delta")


def _pred(pred) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("prediction values must lie in [0, 1]")
    return p


def _gt(gt) -> np.ndarray:
    g = np.asarray(gt)
    if g.dtype != bool:
        if not np.isin(g, (0, 1)).all():
            raise ValueError("ground truth must be binary")
        g = g.astype(bool)
    return g


def _same_shape(p: np.ndarray, g: np.ndarray) -> None:
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")


def mae(pred, gt) -> float:
    p, g = _pred(pred), _gt(gt)
    _same_shape(p, g)
    return float(np.mean(np.abs(p - g)))


def miou(pred, gt, threshold: float = 0.5) -> float:
    """IoU of ``pred >= threshold`` against ``gt``; 1 when both are empty."""
    p = np.asarray(pred, dtype=np.float64) >= threshold
    g = _gt(gt)
    _same_shape(p, g)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


# -- structure measure -------------------------------------------------------


def _s_object_region(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mean / (mean * mean + 1 + std + EPS)


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x = p.mean()
    y = g.mean()
    sx = np.sum((p - x) ** 2) / (n - 1 + EPS)
    sy = np.sum((g - y) ** 2) / (n - 1 + EPS)
    sxy = np.sum((p - x) * (g - y)) / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / beta
    return 1.0 if beta == 0 else 0.0


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    p, g = _pred(pred), _gt(gt)
    _same_shape(p, g)
    total = g.size
    n_fg = np.count_nonzero(g)
    if n_fg == 0:
        return float(1 - p.mean())
    if n_fg == total:
        return float(p.mean())
    # object-aware term, area-weighted over foreground / background
    obj = (n_fg * _s_object_region(p[g]) + (total - n_fg) * _s_object_region(1 - p[~g])) / total
    # region-aware term: split at the (rounded) foreground centroid
    h, w = g.shape
    cy, cx = np.argwhere(g).mean(axis=0).round()
    cy, cx = int(cy) + 1, int(cx) + 1
    quads = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    region = 0.0
    for rs, cs in quads:
        gp, gg = p[rs, cs], g[rs, cs].astype(np.float64)
        if gp.size:
            region += gp.size * _ssim(gp, gg)
    region /= total
    return float(max(0.0, alpha * obj + (1 - alpha) * region))


# -- weighted F-measure ------------------------------------------------------


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def weighted_f(pred, gt, beta2: float = 1.0) -> float:
    p, g = _pred(pred), _gt(gt)
    _same_shape(p, g)
    if not g.any():
        return 1.0 if not p.any() else 0.0
    dist, idx = ndimage.distance_transform_edt(~g, return_indices=True)
    err = np.abs(p - g)
    # background errors are taken at the nearest foreground pixel
    et = err.copy()
    bg = ~g
    et[bg] = err[idx[0][bg], idx[1][bg]]
    ea = ndimage.convolve(et, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(g & (ea < err), ea, err)
    importance = np.where(bg, 2 - np.exp(np.log(0.5) / 5 * dist), 1.0)
    ew = min_e * importance
    tpw = np.count_nonzero(g) - ew[g].sum()
    fpw = ew[bg].sum()
    recall = 1 - ew[g].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


# -- mean E-measure ----------------------------------------------------------


def _enhanced(phi_p, phi_g) -> np.ndarray:
    # alignment is 0 when both bias terms vanish; exact 1 when they agree
    denom = np.asarray(phi_p * phi_p + phi_g * phi_g, dtype=np.float64)
    num = 2 * phi_p * phi_g
    align = np.divide(num, denom, out=np.zeros(np.broadcast(num, denom).shape), where=denom > 0)
    return (align + 1) ** 2 / 4


def e_measure_curve(pred, gt, n_thresholds: int = N_THRESHOLDS) -> np.ndarray:
    """E-measure at each threshold ``k/n, k = 1..n``."""
    p, g = _pred(pred), _gt(gt)
    _same_shape(p, g)
    total = g.size
    n_fg = np.count_nonzero(g)
    thresholds = np.arange(1, n_thresholds + 1) / n_thresholds
    fg_vals = np.sort(p[g])
    bg_vals = np.sort(p[~g])
    # counts of predicted-foreground pixels (pred >= t) inside gt fg / gt bg
    tp = fg_vals.size - np.searchsorted(fg_vals, thresholds, side="left")
    fp = bg_vals.size - np.searchsorted(bg_vals, thresholds, side="left")
    pred_fg = tp + fp
    pred_bg = total - pred_fg
    if n_fg == 0:
        return pred_bg / total
    if n_fg == total:
        return pred_fg / total
    fn = n_fg - tp
    tn = pred_bg - fn
    mu_p = pred_fg / total
    mu_g = n_fg / total
    s = (tp * _enhanced(1 - mu_p, 1 - mu_g) + fp * _enhanced(1 - mu_p, -mu_g)
         + fn * _enhanced(-mu_p, 1 - mu_g) + tn * _enhanced(-mu_p, -mu_g))
    return s / total


def mean_e(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).mean())


# -- topology ----------------------------------------------------------------


def skeletonize(mask) -> np.ndarray:
    """Morphological thinning to a one-pixel-wide, connectivity-preserving skeleton."""
    m = _gt(mask)
    if not m.any():
        return np.zeros_like(m)
    return thin(m).astype(bool)


def skeleton_recall(pred_binary, gt_skeleton) -> float:
    p = _gt(pred_binary)
    s = _gt(gt_skeleton)
    _same_shape(p, s)
    n = np.count_nonzero(s)
    if n == 0:
        return 1.0
    return np.count_nonzero(p & s) / n


def n_components(mask) -> int:
    return int(ndimage.label(_gt(mask), structure=EIGHT)[1])


def cc_delta(pred_binary, gt_binary) -> int:
    return n_components(pred_binary) - n_components(gt_binary)


# -- reports -----------------------------------------------------------------


@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, image_id: str, pred, gt, gt_skeleton: Optional[np.ndarray] = None,
            threshold: float = 0.5) -> dict:
        rec = {"id": image_id, **evaluate_pair(pred, gt, gt_skeleton, threshold)}
        self.records.append(rec)
        return rec

    def aggregate(self) -> dict[str, float]:
        if not self.records:
            return {k: float("nan") for k in METRIC_NAMES}
        return {k: float(np.mean([r[k] for r in self.records])) for k in METRIC_NAMES}

    def to_tsv(self) -> str:
        lines = ["\t".join(("id",) + METRIC_NAMES)]
        for r in self.records:
            lines.append("\t".join([r["id"]] + [_fmt(r[k]) for k in METRIC_NAMES]))
        agg = self.aggregate()
        lines.append("\t".join(["MEAN"] + [_fmt(agg[k]) for k in METRIC_NAMES]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        agg = self.aggregate()
        head = f"{'id':<12}" + "".join(f"{k:>16}" for k in METRIC_NAMES)
        rows = [head, "-" * len(head)]
        for r in self.records:
            rows.append(f"{r['id']:<12}" + "".join(f"{_fmt(r[k]):>16}" for k in METRIC_NAMES))
        rows.append("-" * len(head))
        rows.append(f"{'mean':<12}" + "".join(f"{_fmt(agg[k]):>16}" for k in METRIC_NAMES))
        if self.config:
            rows.append("")
            rows += [f"# {k} = {v}" for k, v in self.config.items()]
        return "\n".join(rows) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def evaluate_pair(pred, gt, gt_skeleton: Optional[np.ndarray] = None, threshold: float = 0.5) -> dict:
    p = _pred(pred)
    g = _gt(gt)
    skel = skeletonize(g) if gt_skeleton is None else _gt(gt_skeleton)
    pb = p >= threshold
    return {
        "s_alpha": s_measure(p, g),
        "f_beta_w": weighted_f(p, g),
        "mean_e": mean_e(p, g),
        "mae": mae(p, g),
        "iou": miou(p, g, threshold),
        "skeleton_recall": skeleton_recall(pb, skel),
        "cc_delta": cc_delta(pb, g),
    }


def evaluate_many(pairs: Iterable[tuple[str, np.ndarray, np.ndarray, Optional[np.ndarray]]]) -> EvalReport:
    report = EvalReport()
    for image_id, pred, gt, skel in pairs:
        report.add(image_id, pred, gt, skel)
    return report
