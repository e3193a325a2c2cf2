"""Property-based tests for evaluation metrics"""

import math

import numpy as np
from hypothesis import given, settings, strategies as st

from stoch_future.evalmetrics import (best_of_n, ged, iou, psnr, region_crop, vpq,
                                      vpq_distance)


@st.composite
def frame_pair_strategy(draw):
    """Generate two frames of the same shape with values in [0, 1]"""
    height = draw(st.integers(min_value=1, max_value=8))
    width = draw(st.integers(min_value=1, max_value=8))
    seed = draw(st.integers(min_value=0, max_value=2**31 - 1))
    rng = np.random.default_rng(seed)
    return rng.random((height, width)), rng.random((height, width))


@st.composite
def instance_map_strategy(draw):
    """Generate an instance id sequence [T, H, W] with ids 0..3"""
    length = draw(st.integers(min_value=1, max_value=3))
    size = draw(st.integers(min_value=2, max_value=6))
    seed = draw(st.integers(min_value=0, max_value=2**31 - 1))
    return np.random.default_rng(seed).integers(0, 4, size=(length, size, size))


@given(pair=frame_pair_strategy())
@settings(max_examples=100)
def test_psnr_is_symmetric(pair):
    """
    For any two frames, PSNR does not depend on argument order
    """
    a, b = pair

    assert psnr(a, b) == psnr(b, a)


@given(pair=frame_pair_strategy())
@settings(max_examples=50)
def test_psnr_of_identical_frames_is_infinite(pair):
    """
    For any frame, PSNR against itself is the infinite sentinel
    """
    a, _ = pair

    assert math.isinf(psnr(a, a.copy()))


@given(pair=frame_pair_strategy(), threshold=st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=100)
def test_iou_is_bounded_and_symmetric(pair, threshold):
    """
    For any two masks, IoU lies in [0, 1] and is symmetric
    """
    a, b = (m > threshold for m in pair)

    value = iou(a, b)

    assert 0.0 <= value <= 1.0
    assert value == iou(b, a)
    assert iou(a, a) == 1.0


@given(ids=instance_map_strategy(), offset=st.integers(min_value=1, max_value=50))
@settings(max_examples=100)
def test_vpq_ignores_relabeling(ids, offset):
    """
    For any instance sequence, a consistent renaming of the ids scores VPQ 1
    """
    renamed = np.where(ids > 0, ids + offset, 0)

    assert vpq(renamed, ids) == 1.0


@given(ids=instance_map_strategy(), count=st.integers(min_value=2, max_value=4))
@settings(max_examples=50)
def test_ged_of_exact_samples_vanishes(ids, count):
    """
    For any ground truth, N copies of it have zero energy distance
    """
    assert ged([ids.copy() for _ in range(count)], ids, vpq_distance) == 0.0


@given(pairs=st.lists(frame_pair_strategy(), min_size=1, max_size=4))
@settings(max_examples=50)
def test_best_of_n_never_loses_to_a_sample(pairs):
    """
    For any sample set, the best-of-N score is at least each sample's mean score
    """
    shape = pairs[0][0].shape
    gt = pairs[0][1][None]
    samples = [a[None] for a, _ in pairs if a.shape == shape]

    index, score, values = best_of_n(samples, gt, lambda p, g: -float(np.mean((p - g) ** 2)))

    assert 0 <= index < len(samples)
    assert score == float(np.mean(values))
    for sample in samples:
        assert score >= -float(np.mean((sample - gt) ** 2))


@given(size=st.integers(min_value=1, max_value=40),
       fraction=st.floats(min_value=0.01, max_value=1.0))
@settings(max_examples=100)
def test_region_crop_is_centered(size, fraction):
    """
    For any grid and fraction, the crop keeps leading axes and stays centered
    """
    grid = np.arange(2 * size * size).reshape(2, size, size)

    crop = region_crop(grid, fraction)

    assert crop.shape[0] == 2
    side = crop.shape[1]
    assert crop.shape == (2, side, side)
    assert 1 <= side <= size
    top = (size - side) // 2
    assert crop[0, 0, 0] == grid[0, top, top]
