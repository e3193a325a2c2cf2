"""Evaluation metrics for predicted frames, depth and BEV instances"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stoch_future.errors import InvalidInputError, ShapeError
from stoch_future.models import MetricReport

PSNR_INF = math.inf
SSIM_WINDOW = 7
FILL_VALUE = 0.5
DEPTH_METRIC_NAMES = ('abs_rel', 'sq_rel', 'rmse', 'rmse_log', 'a1', 'a2', 'a3')

# metrics where a lower value is better
DISTANCE_METRICS = {'abs_rel', 'sq_rel', 'rmse', 'rmse_log', 'ged', 'mse'}


def _check_shapes(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ============================================================================
# Frame metrics
# ============================================================================

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB

    Returns:
        10 * log10(peak^2 / MSE); PSNR_INF when the frames are identical
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b, 'psnr')
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def _as_channels(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise ShapeError(f"ssim expects [H, W] or [C, H, W], got {x.shape}")
    return x


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """
    Structural similarity with a uniform window

    Local means, variances and covariance are taken over every fully
    contained ``window`` x ``window`` patch (population statistics); the
    SSIM map is averaged over positions and channels.

    Args:
        a: [H, W] or [C, H, W]
        b: Same shape as ``a``
        peak: Dynamic range
        window: Window side

    Returns:
        Mean SSIM in [-1, 1]
    """
    a, b = _as_channels(a), _as_channels(b)
    _check_shapes(a, b, 'ssim')
    if a.shape[1] < window or a.shape[2] < window:
        raise InvalidInputError(f"image {a.shape[1:]} is smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def local_mean(x: np.ndarray) -> np.ndarray:
        return sliding_window_view(x, (window, window), axis=(1, 2)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def per_frame(metric: Callable[[np.ndarray, np.ndarray], float], pred: np.ndarray,
              gt: np.ndarray) -> List[float]:
    """Apply a frame metric along the leading time axis"""
    if pred.shape[0] != gt.shape[0]:
        raise ShapeError(f"time axes differ: {pred.shape[0]} vs {gt.shape[0]}")
    return [float(metric(pred[t], gt[t])) for t in range(pred.shape[0])]


def best_of_n(samples: Sequence[np.ndarray], gt: np.ndarray,
              metric: Callable[[np.ndarray, np.ndarray], float],
              selector: str = 'max') -> Tuple[int, float, List[float]]:
    """
    Pick the sample with the best mean-over-frames score

    Args:
        samples: Predicted sequences [T, ...]
        gt: Ground-truth sequence [T, ...]
        metric: Frame metric
        selector: 'max' for similarities, 'min' for distances

    Returns:
        (sample index, mean score, per-frame scores of that sample)
    """
    if not samples:
        raise InvalidInputError("best_of_n needs at least one sample")
    if selector not in ('max', 'min'):
        raise InvalidInputError(f"Unknown selector: {selector}")
    best = None
    for i, sample in enumerate(samples):
        values = per_frame(metric, sample, gt)
        score = float(np.mean(values))
        better = best is None or (score > best[1] if selector == 'max' else score < best[1])
        if better:
            best = (i, score, values)
    return best


# ============================================================================
# Segmentation and panoptic metrics
# ============================================================================

def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of binary masks; 1 when both are empty"""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    _check_shapes(a, b, 'iou')
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class PQStat:
    """Panoptic quality accumulator of one frame"""
    iou: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: 'PQStat') -> 'PQStat':
        self.iou += other.iou
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def empty(self) -> bool:
        return self.tp + self.fp + self.fn == 0

    @property
    def pq(self) -> float:
        # PQ = sum of TP IoU / (TP + FP/2 + FN/2)
        if self.empty:
            return 1.0
        return self.iou / (self.tp + 0.5 * self.fp + 0.5 * self.fn)


def vpq_frames(pred: np.ndarray, gt: np.ndarray,
               horizon: Optional[int] = None) -> List[Optional[PQStat]]:
    """
    Per-frame panoptic statistics with temporally consistent matching

    A (pred, gt) pair with IoU > 0.5 is a true positive only if neither id
    has been matched to a different partner at an earlier frame; a track
    switch counts as one false positive plus one false negative. Id 0 is
    background.

    Returns:
        One PQStat per frame, None for frames empty in both maps
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ShapeError(f"vpq needs aligned [T, H, W] id maps, got {pred.shape} and {gt.shape}")
    length = pred.shape[0] if horizon is None else min(horizon, pred.shape[0])

    pred_partner: Dict[int, int] = {}
    gt_partner: Dict[int, int] = {}
    stats: List[Optional[PQStat]] = []
    for t in range(length):
        pred_ids = [int(i) for i in np.unique(pred[t]) if i != 0]
        gt_ids = [int(i) for i in np.unique(gt[t]) if i != 0]
        stat = PQStat()
        matched_pred, matched_gt = set(), set()
        for g in gt_ids:
            gt_mask = gt[t] == g
            for p in pred_ids:
                if p in matched_pred:
                    continue
                overlap = iou(pred[t] == p, gt_mask)
                if overlap <= 0.5:
                    continue
                matched_pred.add(p)
                matched_gt.add(g)
                consistent = pred_partner.get(p, g) == g and gt_partner.get(g, p) == p
                if consistent:
                    pred_partner.setdefault(p, g)
                    gt_partner.setdefault(g, p)
                    stat += PQStat(iou=overlap, tp=1)
                else:
                    stat += PQStat(fp=1, fn=1)
                break
        stat += PQStat(fp=len(set(pred_ids) - matched_pred), fn=len(set(gt_ids) - matched_gt))
        stats.append(None if stat.empty else stat)
    return stats


def vpq(pred: np.ndarray, gt: np.ndarray, horizon: Optional[int] = None) -> float:
    """
    Video panoptic quality: mean over frames of the per-frame PQ

    Frames empty in both maps are skipped; a fully empty pair scores 1.
    """
    stats = [s for s in vpq_frames(pred, gt, horizon) if s is not None]
    if not stats:
        return 1.0
    return float(np.mean([s.pq for s in stats]))


def ged(samples: Sequence[np.ndarray], gt: np.ndarray,
        distance: Callable[[np.ndarray, np.ndarray], float]) -> float:
    """
    Generalized energy distance against a single ground truth

    GED = 2/N sum_i d(Y_i, y) - 1/N^2 sum_ij d(Y_i, Y_j)
    """
    n = len(samples)
    if n < 2:
        raise InvalidInputError("ged needs at least two samples")
    to_gt = sum(distance(s, gt) for s in samples)
    pairwise = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                pairwise += distance(samples[i], samples[j])
    return float(2.0 * to_gt / n - pairwise / (n * n))


def vpq_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - VPQ, the GED distance between instance sequences"""
    return 1.0 - vpq(a, b)


# ============================================================================
# Depth
# ============================================================================

def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None) -> Dict[str, float]:
    """
    Standard depth error and accuracy measures on valid pixels

    No median scaling is applied; the synthetic world has absolute scale.

    Returns:
        Dict with abs_rel, sq_rel, rmse, rmse_log, a1, a2, a3
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt, 'depth_metrics')
    mask = np.ones(gt.shape, dtype=bool) if valid is None else np.asarray(valid).astype(bool)
    _check_shapes(mask, gt, 'depth_metrics mask')
    if not mask.any():
        raise InvalidInputError("depth_metrics: empty valid mask")
    p, g = pred[mask], gt[mask]
    if np.any(g <= 0):
        raise InvalidInputError("depth_metrics: ground-truth depth must be positive")
    p = np.maximum(p, 1e-6)

    ratio = np.maximum(p / g, g / p)
    return {
        'abs_rel': float(np.mean(np.abs(p - g) / g)),
        'sq_rel': float(np.mean((p - g) ** 2 / g)),
        'rmse': float(np.sqrt(np.mean((p - g) ** 2))),
        'rmse_log': float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        'a1': float(np.mean(ratio < 1.25)),
        'a2': float(np.mean(ratio < 1.25 ** 2)),
        'a3': float(np.mean(ratio < 1.25 ** 3)),
    }


# ============================================================================
# Regions
# ============================================================================

def fg_bg_eval(pred: np.ndarray, gt: np.ndarray, fg_masks: np.ndarray,
               metric: Callable[[np.ndarray, np.ndarray], float],
               name: str = 'metric') -> Tuple[MetricReport, MetricReport]:
    """
    Evaluate foreground and background separately

    Pixels outside the evaluated region are set to gray (0.5) in both the
    prediction and the ground truth before the metric is applied.

    Args:
        pred: [T, C, H, W] predicted frames
        gt: [T, C, H, W] ground-truth frames
        fg_masks: [T, 1, H, W] or [T, H, W] foreground masks
        metric: Frame metric
        name: Report name

    Returns:
        (foreground report, background report), one sequence each
    """
    _check_shapes(pred, gt, 'fg_bg_eval')
    masks = np.asarray(fg_masks).astype(bool)
    if masks.ndim == 3:
        masks = masks[:, None]
    if masks.shape[0] != pred.shape[0] or masks.shape[2:] != pred.shape[2:]:
        raise ShapeError(f"fg masks {masks.shape} are not aligned with frames {pred.shape}")
    masks = np.broadcast_to(masks, pred.shape)

    def region(keep: np.ndarray) -> List[float]:
        p = np.where(keep, pred, FILL_VALUE)
        g = np.where(keep, gt, FILL_VALUE)
        return per_frame(metric, p, g)

    return (MetricReport(name, [region(masks)], region='foreground'),
            MetricReport(name, [region(~masks)], region='background'))


def region_crop(array: np.ndarray, fraction: float = 0.3) -> np.ndarray:
    """Centered crop covering ``fraction`` of each of the last two axes"""
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"region fraction must lie in (0, 1], got {fraction}")
    height, width = array.shape[-2:]
    crop_h = max(1, int(round(fraction * height)))
    crop_w = max(1, int(round(fraction * width)))
    top = (height - crop_h) // 2
    left = (width - crop_w) // 2
    return array[..., top:top + crop_h, left:left + crop_w]
