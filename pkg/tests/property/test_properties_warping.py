"""Property-based tests for sampling, warping and rigid motion"""

import numpy as np
from hypothesis import given, settings, strategies as st

from stoch_future.tensorcore import Tensor
from stoch_future.warpgeom import (PoseSE3, blend, compose_poses, matrix_to_se3, se3_to_matrix,
                                   warp_by_flow)


@st.composite
def image_strategy(draw):
    """Generate a small [C, H, W] image with values in [0, 1]"""
    channels = draw(st.integers(min_value=1, max_value=3))
    height = draw(st.integers(min_value=2, max_value=7))
    width = draw(st.integers(min_value=2, max_value=7))
    seed = draw(st.integers(min_value=0, max_value=2**31 - 1))
    return np.random.default_rng(seed).random((channels, height, width))


@st.composite
def pose_strategy(draw):
    """Generate a rigid motion with a rotation angle well below pi"""
    translation = draw(st.lists(st.floats(min_value=-5.0, max_value=5.0), min_size=3,
                                max_size=3))
    axis = np.array(draw(st.lists(st.floats(min_value=-1.0, max_value=1.0), min_size=3,
                                  max_size=3)))
    angle = draw(st.floats(min_value=0.0, max_value=2.5))
    norm = np.linalg.norm(axis)
    rotation = axis / norm * angle if norm > 1e-3 else np.zeros(3)
    return PoseSE3(np.array(translation), rotation)


@given(image=image_strategy())
@settings(max_examples=100)
def test_zero_flow_is_identity(image):
    """
    For any image, warping by a zero flow returns the image
    """
    flow = np.zeros((2,) + image.shape[1:])

    warped = warp_by_flow(Tensor(image), Tensor(flow))

    np.testing.assert_allclose(warped.data, image, atol=1e-12)


@given(image=image_strategy(), dx=st.integers(min_value=-3, max_value=3),
       dy=st.integers(min_value=-3, max_value=3))
@settings(max_examples=100)
def test_integer_flow_shifts_pixels(image, dx, dy):
    """
    For any integer flow, each in-bounds target pixel copies its shifted source pixel
    """
    _, height, width = image.shape
    flow = np.zeros((2, height, width))
    flow[0], flow[1] = dx, dy

    warped = warp_by_flow(Tensor(image), Tensor(flow)).data

    for y in range(height):
        for x in range(width):
            if 0 <= x + dx < width and 0 <= y + dy < height:
                np.testing.assert_allclose(warped[:, y, x], image[:, y + dy, x + dx], atol=1e-12)


@given(image=image_strategy(), weight=st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=50)
def test_blend_stays_between_operands(image, weight):
    """
    For any mask in [0, 1], the blend lies between its two operands
    """
    other = 1.0 - image
    mask = np.full((1,) + image.shape[1:], weight)

    mixed = blend(Tensor(image), Tensor(other), Tensor(mask)).data

    low = np.minimum(image, other) - 1e-12
    high = np.maximum(image, other) + 1e-12
    assert np.all((mixed >= low) & (mixed <= high))


@given(pose=pose_strategy())
@settings(max_examples=100)
def test_pose_matrix_round_trip(pose):
    """
    For any rotation angle below pi, the axis-angle form survives the 4x4 matrix
    """
    restored = matrix_to_se3(se3_to_matrix(pose))

    np.testing.assert_allclose(restored.translation, pose.translation, atol=1e-9)
    np.testing.assert_allclose(restored.rotation, pose.rotation, atol=1e-6)


@given(pose=pose_strategy())
@settings(max_examples=50)
def test_rotation_matrix_is_orthonormal(pose):
    """
    For any pose, the rotation block is orthonormal with determinant one
    """
    rot = se3_to_matrix(pose)[:3, :3]

    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(rot) - 1.0) < 1e-9


@given(pose=pose_strategy())
@settings(max_examples=50)
def test_identity_is_neutral_for_composition(pose):
    """
    For any pose, composing with the identity leaves it unchanged
    """
    composed = compose_poses(pose, PoseSE3.identity())

    np.testing.assert_allclose(se3_to_matrix(composed), se3_to_matrix(pose), atol=1e-6)
