"""Differentiable geometry: sampling, flow warping, SE(3) poses, depth+pose warping

Conventions:
    * Flow fields are [2, H, W] (or [B, 2, H, W]) in pixel units, channel 0
      horizontal (x, column) and channel 1 vertical (y, row).
    * Warping is backward: each target pixel reads its source location
      ``grid + flow`` from the source image.
    * Out-of-bounds coordinates are clamped to the border.
    * A pose maps target-camera coordinates into source (previous) camera
      coordinates.  Example: camera moves forward by 1 unit between frames,
      so a target point at depth 5 sits at depth 6 in the previous camera;
      the pose translation is (0, 0, +1).
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.errors import InvalidInputError, NumericalError, ShapeError
from stoch_future.tensorcore import Tensor

DEPTH_MIN = 1.0
DEPTH_MAX = 50.0
POSE_SCALE = 0.01
PROJECTION_EPS = 1e-3
_ROTATION_EPS = 1e-12

# Maps an axis-angle row vector r to the flattened skew matrix [r]_x.
_SKEW_BASIS = np.zeros((3, 9))
_SKEW_BASIS[0, 5], _SKEW_BASIS[0, 7] = -1.0, 1.0
_SKEW_BASIS[1, 2], _SKEW_BASIS[1, 6] = 1.0, -1.0
_SKEW_BASIS[2, 1], _SKEW_BASIS[2, 3] = -1.0, 1.0


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units"""
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"Focal lengths must be positive: fx={self.fx}, fy={self.fy}")

    def to_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @classmethod
    def from_array(cls, values) -> 'CameraIntrinsics':
        return cls(*[float(v) for v in values])


@dataclass
class PoseSE3:
    """Rigid motion as translation plus axis-angle rotation"""
    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> 'PoseSE3':
        return cls(np.zeros(3), np.zeros(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation])

    @classmethod
    def from_vector(cls, vector) -> 'PoseSE3':
        vector = np.asarray(vector, dtype=np.float64)
        return cls(vector[:3], vector[3:6])


def identity_grid(height: int, width: int) -> np.ndarray:
    """Pixel coordinates [2, H, W]; channel 0 is x (column), channel 1 is y (row)"""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing='ij')
    return np.stack([xs, ys])


def _rodrigues(rotation: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(rotation))
    if theta < _ROTATION_EPS:
        return np.eye(3)
    axis = rotation / theta
    skew = np.array([[0.0, -axis[2], axis[1]],
                     [axis[2], 0.0, -axis[0]],
                     [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(theta) * skew + (1.0 - np.cos(theta)) * (skew @ skew)


def se3_to_matrix(pose: PoseSE3) -> np.ndarray:
    """4x4 homogeneous transform; rotation via Rodrigues' formula"""
    matrix = np.eye(4)
    matrix[:3, :3] = _rodrigues(pose.rotation)
    matrix[:3, 3] = pose.translation
    return matrix


def matrix_to_se3(matrix: np.ndarray) -> PoseSE3:
    """Inverse of ``se3_to_matrix`` for rotation angles below pi"""
    rot = matrix[:3, :3]
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < 1e-12:
        rotation = np.zeros(3)
    else:
        axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
        rotation = axis * theta / (2.0 * np.sin(theta))
    return PoseSE3(matrix[:3, 3].copy(), rotation)


def compose_poses(first: PoseSE3, second: PoseSE3) -> PoseSE3:
    """Pose of applying ``second`` then ``first`` (matrix product first @ second)"""
    return matrix_to_se3(se3_to_matrix(first) @ se3_to_matrix(second))


def rotation_matrices(rotation: Tensor) -> Tensor:
    """
    Differentiable Rodrigues map for a batch of axis-angle vectors

    Args:
        rotation: [B, 3]

    Returns:
        [B, 3, 3]
    """
    batch = rotation.shape[0]
    skew = tc.reshape(tc.matmul(rotation, Tensor(_SKEW_BASIS)), (batch, 3, 3))
    theta = tc.sqrt(tc.tsum(tc.square(rotation), axis=1) + _ROTATION_EPS)
    theta = tc.reshape(theta, (batch, 1, 1))
    first = tc.sin(theta) / theta
    second = (1.0 - tc.cos(theta)) / tc.square(theta)
    return Tensor(np.eye(3)) + first * skew + second * tc.matmul(skew, skew)


def _batched(x: Tensor, rank: int) -> Tuple[Tensor, bool]:
    if x.ndim == rank:
        return x, False
    if x.ndim == rank - 1:
        return tc.reshape(x, (1,) + x.shape), True
    raise ShapeError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")


def bilinear_sample(img: Tensor, coords: Tensor) -> Tensor:
    """
    Sample ``img`` at per-target-pixel coordinates with bilinear weights

    Args:
        img: [C, H, W] or [B, C, H, W]
        coords: [2, Ho, Wo] or [B, 2, Ho, Wo], channel 0 x, channel 1 y

    Returns:
        [C, Ho, Wo] or [B, C, Ho, Wo]
    """
    img = tc.as_tensor(img)
    coords = tc.as_tensor(coords)
    img_b, squeeze = _batched(img, 4)
    coords_b, _ = _batched(coords, 4)
    if np.any(np.isnan(coords_b.data)):
        raise NumericalError("NaN sampling coordinates")
    batch, channels, height, width = img_b.shape
    if coords_b.shape[0] != batch or coords_b.shape[1] != 2:
        raise ShapeError(f"coords shape {coords.shape} incompatible with image {img.shape}")

    x = coords_b.data[:, 0]
    y = coords_b.data[:, 1]
    xc = np.clip(x, 0.0, width - 1)
    yc = np.clip(y, 0.0, height - 1)
    x0 = np.clip(np.floor(xc), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = xc - x0
    wy = yc - y0
    bidx = np.arange(batch)[:, None, None]

    # advanced indexing puts the channel axis last: [B, Ho, Wo, C]
    ia = img_b.data[bidx, :, y0, x0]
    ib = img_b.data[bidx, :, y0, x1]
    ic = img_b.data[bidx, :, y1, x0]
    id_ = img_b.data[bidx, :, y1, x1]
    wa = ((1 - wx) * (1 - wy))[..., None]
    wb = (wx * (1 - wy))[..., None]
    wc = ((1 - wx) * wy)[..., None]
    wd = (wx * wy)[..., None]
    out = (wa * ia + wb * ib + wc * ic + wd * id_).transpose(0, 3, 1, 2)

    inside_x = (x >= 0) & (x <= width - 1)
    inside_y = (y >= 0) & (y <= height - 1)

    def _backward(g):
        gt = g.transpose(0, 2, 3, 1)
        grad_img = np.zeros_like(img_b.data)
        for yy, xx, w in ((y0, x0, wa), (y0, x1, wb), (y1, x0, wc), (y1, x1, wd)):
            np.add.at(grad_img, (bidx, slice(None), yy, xx), w * gt)
        dx = (1 - wy)[..., None] * (ib - ia) + wy[..., None] * (id_ - ic)
        dy = (1 - wx)[..., None] * (ic - ia) + wx[..., None] * (id_ - ib)
        grad_coords = np.stack([(dx * gt).sum(axis=-1) * inside_x,
                                (dy * gt).sum(axis=-1) * inside_y], axis=1)
        return grad_img, grad_coords

    result = tc.apply_op('bilinear_sample', (img_b, coords_b), out, _backward)
    if squeeze:
        result = tc.reshape(result, result.shape[1:])
    return result


def warp_by_flow(src: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``src`` by a target-indexed flow field"""
    src = tc.as_tensor(src)
    flow = tc.as_tensor(flow)
    if flow.shape[-3] != 2 or flow.shape[-2:] != src.shape[-2:]:
        raise ShapeError(f"flow shape {flow.shape} incompatible with source {src.shape}")
    grid = identity_grid(src.shape[-2], src.shape[-1])
    return bilinear_sample(src, flow + Tensor(grid))


def compose_residual(static_pred: Tensor, residual_flow: Tensor) -> Tensor:
    """Warp the static prediction (not the previous frame) by the residual flow"""
    return warp_by_flow(static_pred, residual_flow)


def blend(a: Tensor, b: Tensor, mask: Tensor) -> Tensor:
    """mask * a + (1 - mask) * b with mask values in [0, 1]"""
    a, b, mask = tc.as_tensor(a), tc.as_tensor(b), tc.as_tensor(mask)
    if np.any(mask.data < 0.0) or np.any(mask.data > 1.0):
        raise InvalidInputError("blend mask must lie in [0, 1]")
    if a.shape != b.shape:
        raise ShapeError(f"blend operands differ: {a.shape} vs {b.shape}")
    return mask * a + (1.0 - mask) * b


def warp_by_depth_pose(prev: Tensor, depth: Tensor, translation: Tensor, rotation: Tensor,
                       intrinsics: CameraIntrinsics) -> Tuple[Tensor, Tensor, np.ndarray]:
    """
    Inverse-warp the previous frame using target depth and relative pose

    Args:
        prev: Previous frame [B, C, H, W]
        depth: Target-frame depth [B, 1, H, W], strictly positive
        translation: [B, 3], target camera -> previous camera
        rotation: [B, 3] axis-angle, target camera -> previous camera
        intrinsics: Camera intrinsics

    Returns:
        (static prediction [B, C, H, W], rigid flow [B, 2, H, W],
        validity mask [B, 1, H, W] of pixels projecting in front of the camera)
    """
    prev = tc.as_tensor(prev)
    depth = tc.as_tensor(depth)
    if np.any(depth.data <= 0):
        raise InvalidInputError("depth must be strictly positive")
    batch, _, height, width = prev.shape
    if depth.shape != (batch, 1, height, width):
        raise ShapeError(f"depth shape {depth.shape} incompatible with frame {prev.shape}")
    k = intrinsics
    grid = identity_grid(height, width).reshape(2, -1)
    rays = np.stack([(grid[0] - k.cx) / k.fx, (grid[1] - k.cy) / k.fy,
                     np.ones(height * width)])

    depth_flat = tc.reshape(depth, (batch, 1, height * width))
    points = Tensor(rays) * depth_flat
    moved = tc.matmul(rotation_matrices(rotation), points) + tc.reshape(translation, (batch, 3, 1))
    z = moved[:, 2:3, :]
    valid = (z.data > PROJECTION_EPS).reshape(batch, 1, height, width)
    z_safe = tc.maximum(z, PROJECTION_EPS)
    u = moved[:, 0:1, :] / z_safe * k.fx + k.cx
    v = moved[:, 1:2, :] / z_safe * k.fy + k.cy
    coords = tc.reshape(tc.concat([u, v], axis=1), (batch, 2, height, width))
    static = bilinear_sample(prev, coords)
    rigid_flow = coords - Tensor(identity_grid(height, width))
    return static, rigid_flow, valid


def depth_activation(x: Tensor) -> Tensor:
    """Map decoder logits into [DEPTH_MIN, DEPTH_MAX]"""
    return tc.sigmoid(x) * (DEPTH_MAX - DEPTH_MIN) + DEPTH_MIN


def flow_activation(x: Tensor, height: int, width: int) -> Tensor:
    """Bound decoded flow by half the largest image extent"""
    return tc.tanh(x) * (max(height, width) / 2.0)
