"""BEV label losses and instance post-processing

Decoded label heads (segmentation logits, center heatmap, offsets, future
flow) are turned into temporally consistent instance id maps:

    1. centers are heatmap peaks above a fraction of the frame maximum,
       at least ``separation`` cells apart
    2. every foreground pixel joins the center nearest to pixel + offset
    3. ids carry over by moving the previous centers along the future flow
       and greedily matching them to the new centers within ``radius``
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from stoch_future import tensorcore as tc
from stoch_future.errors import ShapeError
from stoch_future.tensorcore import Tensor

LABEL_CHANNELS = 7
DEFAULT_LABEL_WEIGHTS = {'seg': 1.0, 'center': 1.0, 'offset': 0.5, 'flow': 0.5}


# ============================================================================
# Supervised label losses
# ============================================================================

def label_losses(heads: Dict[str, Tensor], target: np.ndarray,
                 weights: Optional[Dict[str, float]] = None) -> Dict[str, Tensor]:
    """
    Weighted supervised losses of one frame batch

    Segmentation uses pixel-averaged cross-entropy and the center heatmap a
    mean squared error; offsets and future flow use an L1 loss averaged
    over foreground pixels only.

    Args:
        heads: Output of ``decode_labels`` ('segmentation', 'center',
            'offset', 'flow')
        target: Label stack [B, 7, H, W] (seg one-hot, center, offset, flow)
        weights: Per-loss weights, keys 'seg', 'center', 'offset', 'flow'

    Returns:
        Dict of scalar tensors keyed 'seg', 'center', 'offset', 'flow'
    """
    weights = dict(DEFAULT_LABEL_WEIGHTS, **(weights or {}))
    if target.ndim != 4 or target.shape[1] != LABEL_CHANNELS:
        raise ShapeError(f"label target must be [B, {LABEL_CHANNELS}, H, W], got {target.shape}")
    seg_logits = heads['segmentation']
    if seg_logits.shape[2:] != target.shape[2:]:
        raise ShapeError(f"label heads {seg_logits.shape} do not match target {target.shape}")

    one_hot = Tensor(target[:, 0:2])
    log_probs = tc.log_softmax(seg_logits, axis=1)
    seg = -tc.tmean(tc.tsum(log_probs * one_hot, axis=1))
    center = tc.tmean(tc.square(heads['center'] - Tensor(target[:, 2:3])))

    fg = target[:, 1:2]
    count = max(float(fg.sum()) * 2.0, 1.0)
    fg_t = Tensor(fg)
    offset = tc.tsum(tc.tabs(heads['offset'] - Tensor(target[:, 3:5])) * fg_t) / count
    flow = tc.tsum(tc.tabs(heads['flow'] - Tensor(target[:, 5:7])) * fg_t) / count
    return {
        'seg': seg * weights['seg'],
        'center': center * weights['center'],
        'offset': offset * weights['offset'],
        'flow': flow * weights['flow'],
    }


# ============================================================================
# Post-processing
# ============================================================================

@dataclass
class TrackedCenter:
    """Instance center with its persistent id"""
    instance_id: int
    position: Tuple[float, float]


def find_centers(heatmap: np.ndarray, threshold: float = 0.1,
                 separation: int = 2) -> List[Tuple[int, int]]:
    """
    Local maxima of a center heatmap

    Args:
        heatmap: [H, W] heatmap
        threshold: Fraction of the frame maximum a peak must exceed
        separation: Minimum Chebyshev distance between accepted peaks

    Returns:
        (row, col) peaks, strongest first
    """
    peak_value = float(heatmap.max()) if heatmap.size else 0.0
    if peak_value <= 0.0:
        return []
    window = 2 * separation + 1
    local_max = ndimage.maximum_filter(heatmap, size=window, mode='constant', cval=-np.inf)
    candidates = np.argwhere((heatmap == local_max) & (heatmap > threshold * peak_value))
    order = np.argsort(-heatmap[candidates[:, 0], candidates[:, 1]], kind='stable')

    accepted: List[Tuple[int, int]] = []
    for row, col in candidates[order]:
        if all(max(abs(row - r), abs(col - c)) > separation for r, c in accepted):
            accepted.append((int(row), int(col)))
    return accepted


def assign_instances(foreground: np.ndarray, offsets: np.ndarray,
                     centers: Sequence[Tuple[float, float]],
                     ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Group foreground pixels by their offset-voted center

    Args:
        foreground: Boolean [H, W] mask
        offsets: [2, H, W] (dx, dy) pointing from each pixel to its center
        centers: (row, col) centers
        ids: Id per center (defaults to 1..n)

    Returns:
        int32 [H, W] id map, 0 for background
    """
    height, width = foreground.shape
    result = np.zeros((height, width), dtype=np.int32)
    if not centers:
        return result
    ids = list(ids) if ids is not None else list(range(1, len(centers) + 1))
    rows, cols = np.nonzero(foreground)
    if rows.size == 0:
        return result
    voted_x = cols + offsets[0, rows, cols]
    voted_y = rows + offsets[1, rows, cols]
    center_array = np.asarray(centers, dtype=np.float64)
    distance = ((voted_y[:, None] - center_array[None, :, 0]) ** 2
                + (voted_x[:, None] - center_array[None, :, 1]) ** 2)
    nearest = np.argmin(distance, axis=1)
    result[rows, cols] = np.asarray(ids, dtype=np.int32)[nearest]
    return result


def match_centers(previous: Sequence[TrackedCenter], flow: np.ndarray,
                  centers: Sequence[Tuple[int, int]], radius: float,
                  next_id: int) -> Tuple[List[TrackedCenter], int]:
    """
    Carry ids from the previous frame onto new centers

    Previous centers are moved by the future flow sampled at their own
    position; pairs are matched greedily by increasing distance up to
    ``radius``. Unmatched centers receive fresh ids.

    Returns:
        (tracked centers aligned with ``centers``, next free id)
    """
    height, width = flow.shape[1:]
    moved = []
    for item in previous:
        row = min(max(int(round(item.position[0])), 0), height - 1)
        col = min(max(int(round(item.position[1])), 0), width - 1)
        moved.append((item.position[0] + flow[1, row, col], item.position[1] + flow[0, row, col]))

    pairs = []
    for i, (pr, pc) in enumerate(moved):
        for j, (cr, cc) in enumerate(centers):
            distance = math.hypot(pr - cr, pc - cc)
            if distance <= radius:
                pairs.append((distance, i, j))
    pairs.sort()

    assigned: Dict[int, int] = {}
    used = set()
    for _, i, j in pairs:
        if i in used or j in assigned:
            continue
        used.add(i)
        assigned[j] = previous[i].instance_id

    tracked = []
    for j, position in enumerate(centers):
        if j not in assigned:
            assigned[j] = next_id
            next_id += 1
        tracked.append(TrackedCenter(assigned[j], (float(position[0]), float(position[1]))))
    return tracked, next_id


def instance_postprocess(segmentation: np.ndarray, centers: np.ndarray, offsets: np.ndarray,
                         flow: np.ndarray, threshold: float = 0.1, separation: int = 2,
                         radius: float = 3.0) -> np.ndarray:
    """
    Per-frame instance id maps with ids tracked through time

    Args:
        segmentation: [T, H, W] binary foreground, or [T, 2, H, W] logits
        centers: [T, 1, H, W] or [T, H, W] center heatmaps
        offsets: [T, 2, H, W]
        flow: [T, 2, H, W] future flow
        threshold: Peak threshold as a fraction of each frame's maximum
        separation: Minimum peak separation in cells
        radius: Matching radius in cells

    Returns:
        int32 [T, H, W]; an empty scene yields an all-zero map
    """
    if segmentation.ndim == 4:
        foreground = segmentation[:, 1] > segmentation[:, 0]
    else:
        foreground = segmentation > 0
    heat = centers[:, 0] if centers.ndim == 4 else centers
    length = foreground.shape[0]
    if not (heat.shape[0] == offsets.shape[0] == flow.shape[0] == length):
        raise ShapeError("label heads are not time-aligned")

    maps = np.zeros(foreground.shape, dtype=np.int32)
    tracked: List[TrackedCenter] = []
    next_id = 1
    for t in range(length):
        peaks = find_centers(heat[t], threshold, separation)
        # peaks outside the predicted foreground are spurious
        peaks = [p for p in peaks if foreground[t][p]]
        previous_flow = flow[t - 1] if t > 0 else np.zeros_like(flow[0])
        tracked, next_id = match_centers(tracked, previous_flow, peaks, radius, next_id)
        maps[t] = assign_instances(foreground[t], offsets[t], [c.position for c in tracked],
                                   [c.instance_id for c in tracked])
    return maps
