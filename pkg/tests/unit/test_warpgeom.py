"""Unit tests for sampling, flow warping and depth/pose geometry"""

import numpy as np
import pytest

from stoch_future import tensorcore as tc
from stoch_future.errors import InvalidInputError, ShapeError
from stoch_future.tensorcore import Tensor
from stoch_future.warpgeom import (DEPTH_MAX, DEPTH_MIN, CameraIntrinsics, PoseSE3, bilinear_sample,
                                   blend, compose_poses, compose_residual, depth_activation,
                                   flow_activation, identity_grid, matrix_to_se3,
                                   rotation_matrices, se3_to_matrix, warp_by_depth_pose,
                                   warp_by_flow)


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(size=(1, 2, 5, 6))


def test_identity_grid_channels():
    """Test channel 0 is x (column) and channel 1 is y (row)"""
    grid = identity_grid(3, 4)

    assert grid.shape == (2, 3, 4)
    assert grid[0, 2, 3] == 3.0
    assert grid[1, 2, 3] == 2.0


def test_zero_flow_is_identity(image):
    """Test that warping by zero flow returns the source"""
    out = warp_by_flow(Tensor(image), Tensor(np.zeros((1, 2, 5, 6))))

    np.testing.assert_allclose(out.data, image)


def test_integer_flow_shifts_and_clamps(image):
    """Test that flow +1 in x reads the right neighbour, clamped at the border"""
    flow = np.zeros((1, 2, 5, 6))
    flow[:, 0] = 1.0

    out = warp_by_flow(Tensor(image), Tensor(flow)).data

    np.testing.assert_allclose(out[..., :-1], image[..., 1:])
    np.testing.assert_allclose(out[..., -1], image[..., -1])


def test_bilinear_midpoint_averages():
    """Test that sampling halfway between pixels averages them"""
    img = np.array([[[0.0, 2.0], [4.0, 6.0]]])
    coords = np.array([[[0.5]], [[0.5]]])

    out = bilinear_sample(Tensor(img), Tensor(coords))

    np.testing.assert_allclose(out.data, [[[3.0]]])


def test_bilinear_coords_shape_checked(image):
    """Test that coordinates need two channels"""
    with pytest.raises(ShapeError):
        bilinear_sample(Tensor(image), Tensor(np.zeros((1, 3, 5, 6))))


def test_flow_shape_checked(image):
    """Test that flow must match the source grid"""
    with pytest.raises(ShapeError):
        warp_by_flow(Tensor(image), Tensor(np.zeros((1, 2, 4, 6))))


def test_compose_residual_warps_static_prediction(image):
    """Test that the residual flow is applied to the static prediction"""
    flow = np.zeros((1, 2, 5, 6))
    flow[:, 1] = 1.0

    out = compose_residual(Tensor(image), Tensor(flow)).data

    np.testing.assert_allclose(out[:, :, :-1], image[:, :, 1:])


def test_blend_extremes(image):
    """Test that mask 1 selects a and mask 0 selects b"""
    a, b = Tensor(image), Tensor(np.zeros_like(image))

    np.testing.assert_allclose(blend(a, b, Tensor(np.ones_like(image))).data, image)
    np.testing.assert_allclose(blend(a, b, Tensor(np.zeros_like(image))).data, 0.0)


def test_blend_rejects_mask_outside_unit_interval(image):
    """Test that mask values outside [0, 1] are rejected"""
    mask = np.full_like(image, 1.5)

    with pytest.raises(InvalidInputError):
        blend(Tensor(image), Tensor(image), Tensor(mask))


def test_rotation_matrices_are_orthonormal():
    """Test R R^T = I and det R = 1, matching Rodrigues' formula"""
    rotation = np.array([[0.1, -0.2, 0.3], [0.0, 0.0, 0.0]])

    mats = rotation_matrices(Tensor(rotation)).data

    for i in range(2):
        np.testing.assert_allclose(mats[i] @ mats[i].T, np.eye(3), atol=1e-9)
        assert np.linalg.det(mats[i]) == pytest.approx(1.0)
    expected = se3_to_matrix(PoseSE3(np.zeros(3), rotation[0]))[:3, :3]
    np.testing.assert_allclose(mats[0], expected, atol=1e-9)


def test_se3_round_trip_and_composition():
    """Test matrix conversion round trip and composing a pose with its inverse"""
    pose = PoseSE3([0.5, -0.1, 0.2], [0.05, 0.1, -0.02])
    matrix = se3_to_matrix(pose)

    back = matrix_to_se3(matrix)
    inverse = matrix_to_se3(np.linalg.inv(matrix))
    identity = compose_poses(pose, inverse)

    np.testing.assert_allclose(back.to_vector(), pose.to_vector(), atol=1e-9)
    np.testing.assert_allclose(identity.to_vector(), np.zeros(6), atol=1e-9)


def test_identity_pose_reproduces_previous_frame():
    """Test that zero motion gives zero rigid flow and an unchanged frame"""
    rng = np.random.default_rng(1)
    prev = rng.uniform(size=(1, 1, 6, 8))
    depth = np.full((1, 1, 6, 8), 5.0)
    intrinsics = CameraIntrinsics(fx=6.0, fy=6.0, cx=3.5, cy=2.5)

    static, flow, valid = warp_by_depth_pose(Tensor(prev), Tensor(depth), tc.zeros((1, 3)),
                                             tc.zeros((1, 3)), intrinsics)

    np.testing.assert_allclose(static.data, prev, atol=1e-8)
    np.testing.assert_allclose(flow.data, 0.0, atol=1e-8)
    assert valid.all()


def test_forward_motion_flows_toward_principal_point():
    """Test that moving forward samples the previous frame closer to the centre"""
    depth = np.full((1, 1, 5, 5), 5.0)
    intrinsics = CameraIntrinsics(fx=4.0, fy=4.0, cx=2.0, cy=2.0)
    translation = Tensor(np.array([[0.0, 0.0, 1.0]]))

    _, flow, _ = warp_by_depth_pose(Tensor(np.zeros((1, 1, 5, 5))), Tensor(depth), translation,
                                    tc.zeros((1, 3)), intrinsics)

    # x = 4 lies right of cx = 2; it reads from 2 + 2 * 5 / 6
    assert flow.data[0, 0, 2, 4] == pytest.approx(2.0 * 5.0 / 6.0 - 2.0)
    assert flow.data[0, 0, 2, 0] > 0.0
    assert flow.data[0, 0, 2, 2] == pytest.approx(0.0)


@pytest.mark.parametrize('tx, depth_value', [(0.5, 4.0), (-0.3, 2.5), (1.0, 8.0)])
def test_sideways_translation_gives_uniform_flow(tx, depth_value):
    """Test that an x-translation over constant depth shifts every pixel by fx * t / d"""
    intrinsics = CameraIntrinsics(fx=6.0, fy=5.0, cx=3.5, cy=2.5)
    depth = np.full((1, 1, 6, 8), depth_value)
    translation = Tensor(np.array([[tx, 0.0, 0.0]]))

    _, flow, valid = warp_by_depth_pose(Tensor(np.zeros((1, 1, 6, 8))), Tensor(depth),
                                        translation, tc.zeros((1, 3)), intrinsics)

    np.testing.assert_allclose(flow.data[0, 0], 6.0 * tx / depth_value, atol=1e-10)
    np.testing.assert_allclose(flow.data[0, 1], 0.0, atol=1e-10)
    assert valid.all()


def test_depth_must_be_positive():
    """Test that non-positive depth is rejected"""
    intrinsics = CameraIntrinsics(fx=4.0, fy=4.0, cx=2.0, cy=2.0)

    with pytest.raises(InvalidInputError):
        warp_by_depth_pose(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))),
                           tc.zeros((1, 3)), tc.zeros((1, 3)), intrinsics)


def test_intrinsics_require_positive_focal_length():
    """Test intrinsics validation"""
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0)


def test_activations_respect_bounds():
    """Test depth and flow activation ranges"""
    x = Tensor(np.array([-30.0, 0.0, 30.0]))

    depth = depth_activation(x).data
    flow = flow_activation(x, 8, 6).data

    assert np.all(depth >= DEPTH_MIN) and np.all(depth <= DEPTH_MAX)
    assert np.all(np.abs(flow) <= 4.0)
