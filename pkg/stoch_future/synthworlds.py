"""Seeded synthetic worlds with full ground truth

Three generators stand in for real video datasets:
    * sprites: 1-2 textured sprites bouncing inside a grid; direction and
      speed are re-drawn at every wall hit
    * ego: a camera driving over a textured ground plane towards a backdrop
      wall, with one independently moving box; exact depth, pose and flow
    * bev: top-down grid with square agents and instance labels
plus a low-dimensional toy family for likelihood checks.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from stoch_future.errors import DatasetError, InvalidInputError
from stoch_future.imageio import read_bundle, write_bundle
from stoch_future.models import (BEVWorldConfig, EgoWorldConfig, LabeledSequence,
                                 SpriteWorldConfig, ToyWorldConfig)
from stoch_future.rng import make_rng, stream_key
from stoch_future.warpgeom import PoseSE3, matrix_to_se3

WORLD_KINDS = ('sprites', 'ego', 'bev', 'toy')
CENTER_SIGMA = 1.5
HEADING_BUCKETS = 7
BEV_CHANNELS = 1 + HEADING_BUCKETS
MANIFEST_NAME = 'manifest.txt'

WorldConfig = Union[SpriteWorldConfig, EgoWorldConfig, BEVWorldConfig, ToyWorldConfig]


# ============================================================================
# Bouncing sprites
# ============================================================================

def _sprite_pattern(kind: int, size: int) -> np.ndarray:
    """Binary glyphs: filled square, ring, plus, diamond"""
    pattern = np.zeros((size, size))
    centre = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    if kind == 0:
        pattern[:] = 1.0
    elif kind == 1:
        pattern[:] = 1.0
        if size > 2:
            pattern[1:-1, 1:-1] = 0.0
    elif kind == 2:
        band = max(size // 3, 1)
        lo = int(round(centre - band / 2.0))
        pattern[lo:lo + band, :] = 1.0
        pattern[:, lo:lo + band] = 1.0
    else:
        pattern[np.abs(ys - centre) + np.abs(xs - centre) <= centre + 0.5] = 1.0
    return pattern


def gen_sprites(cfg: SpriteWorldConfig, seed: int) -> LabeledSequence:
    """
    Generate one bouncing-sprite sequence

    Args:
        cfg: World configuration
        seed: Sequence seed

    Returns:
        LabeledSequence with frames [T, 1, H, W] in [0, 1] and foreground masks
    """
    cfg.validate()
    rng = make_rng(seed, 'sprites')
    height, width, size = cfg.height, cfg.width, cfg.sprite_size
    low, high = cfg.speed_range
    limits = np.array([width - size, height - size], dtype=np.float64)

    patterns = [_sprite_pattern(int(rng.integers(0, 4)), size) * rng.uniform(0.6, 1.0)
                for _ in range(cfg.sprite_count)]
    positions = [rng.uniform(0.0, 1.0, size=2) * limits for _ in range(cfg.sprite_count)]
    angles = [rng.uniform(0.0, 2.0 * math.pi) for _ in range(cfg.sprite_count)]
    speeds = [rng.uniform(low, high) for _ in range(cfg.sprite_count)]

    frames = np.zeros((cfg.length, 1, height, width))
    masks = np.zeros((cfg.length, 1, height, width))
    for t in range(cfg.length):
        for i in range(cfg.sprite_count):
            col, row = (int(round(v)) for v in positions[i])
            region = frames[t, 0, row:row + size, col:col + size]
            np.maximum(region, patterns[i], out=region)
            masks[t, 0, row:row + size, col:col + size] = np.maximum(
                masks[t, 0, row:row + size, col:col + size], patterns[i] > 0)

        for i in range(cfg.sprite_count):
            velocity = speeds[i] * np.array([math.cos(angles[i]), math.sin(angles[i])])
            moved = positions[i] + velocity
            normal = np.zeros(2)
            for axis in range(2):
                if moved[axis] < 0.0:
                    moved[axis] = 0.0
                    normal[axis] = 1.0
                elif moved[axis] > limits[axis]:
                    moved[axis] = limits[axis]
                    normal[axis] = -1.0
            positions[i] = moved
            if normal.any():
                # new direction from the half-circle pointing back into the grid
                base = math.atan2(normal[1], normal[0])
                angles[i] = base + rng.uniform(-math.pi / 2.0, math.pi / 2.0)
                speeds[i] = rng.uniform(low, high)

    return LabeledSequence(frames=frames, world_kind='sprites', seed=seed, fg_mask=masks)


# ============================================================================
# Ego-motion world
# ============================================================================

def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


class _EgoScene:
    """Analytic ray caster for the ego world"""

    def __init__(self, cfg: EgoWorldConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.phases = rng.uniform(0.0, 2.0 * math.pi, size=6)
        fx, fy, cx, cy = cfg.intrinsics()
        vs, us = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
        self.rays = np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)])
        self.intrinsics = (fx, fy, cx, cy)

    def render(self, position: np.ndarray, yaw: float,
               box_center: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        Cast one ray per pixel

        Returns:
            (image [H, W], depth [H, W], world hit points [3, H, W],
            box hit mask [H, W])
        """
        cfg = self.cfg
        p = self.phases
        directions = np.einsum('ij,jhw->ihw', _yaw_matrix(yaw), self.rays)
        dz = directions[2]

        wall = (cfg.wall_distance - position[2]) / dz
        ground = np.where(directions[1] > 1e-9,
                          cfg.camera_height / np.maximum(directions[1], 1e-9), np.inf)
        box_lambda = (box_center[2] - position[2]) / dz
        box_points = position[:, None, None] + box_lambda * directions
        box_hit = ((np.abs(box_points[0] - box_center[0]) <= cfg.box_width / 2.0)
                   & (box_points[1] >= cfg.camera_height - cfg.box_height)
                   & (box_points[1] <= cfg.camera_height)
                   & (box_lambda > 0))
        box_depth = np.where(box_hit, box_lambda, np.inf)

        depth = np.minimum(np.minimum(wall, ground), box_depth)
        points = position[:, None, None] + depth * directions
        on_box = box_hit & (box_depth <= np.minimum(wall, ground))
        on_ground = ~on_box & (ground <= wall)

        x, y, z = points
        wall_tex = 0.5 + 0.15 * np.sin(0.5 * x + p[0]) + 0.15 * np.cos(0.6 * y + p[1])
        ground_tex = 0.5 + 0.15 * np.sin(0.8 * x + p[2]) + 0.15 * np.cos(0.25 * z + p[3])
        local_x = x - box_center[0]
        box_tex = 0.5 + 0.2 * np.sin(3.0 * local_x + p[4]) + 0.1 * np.cos(3.0 * y + p[5])
        image = np.where(on_box, box_tex, np.where(on_ground, ground_tex, wall_tex))
        return image, depth, points, on_box

    def project(self, points: np.ndarray, position: np.ndarray, yaw: float) -> np.ndarray:
        """Pixel coordinates [2, H, W] of world points seen from a camera"""
        fx, fy, cx, cy = self.intrinsics
        rel = points - position[:, None, None]
        cam = np.einsum('ji,jhw->ihw', _yaw_matrix(yaw), rel)
        return np.stack([fx * cam[0] / cam[2] + cx, fy * cam[1] / cam[2] + cy])


def relative_pose(prev_position: np.ndarray, prev_yaw: float,
                  position: np.ndarray, yaw: float) -> PoseSE3:
    """Pose mapping camera-t coordinates into camera-(t-1) coordinates"""
    r_prev = _yaw_matrix(prev_yaw)
    matrix = np.eye(4)
    matrix[:3, :3] = r_prev.T @ _yaw_matrix(yaw)
    matrix[:3, 3] = r_prev.T @ (position - prev_position)
    return matrix_to_se3(matrix)


def gen_egoworld(cfg: EgoWorldConfig, seed: int) -> LabeledSequence:
    """
    Generate one ego-motion sequence

    Returns:
        LabeledSequence with frames, depth, pose (row t maps camera t into
        camera t-1; row 0 is identity), rigid and residual flow (residual =
        total - rigid, nonzero only on box pixels) and box masks
    """
    cfg.validate()
    rng = make_rng(seed, 'ego')
    scene = _EgoScene(cfg, rng)
    speed = rng.uniform(*cfg.ego_speed_range)
    yaw_rate = rng.uniform(-cfg.yaw_rate, cfg.yaw_rate) if cfg.yaw_rate > 0 else 0.0
    box_speed = rng.uniform(*cfg.box_speed_range)
    box_dir = 1.0 if rng.uniform() < 0.5 else -1.0
    box = np.array([rng.uniform(-2.0, 2.0), 0.0, cfg.box_distance + rng.uniform(0.0, 2.0)])

    positions, yaws, boxes = [], [], []
    position = np.zeros(3)
    yaw = 0.0
    for _ in range(cfg.length):
        positions.append(position.copy())
        yaws.append(yaw)
        boxes.append(box.copy())
        position = position + speed * np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        yaw += yaw_rate
        box = box + np.array([box_dir * box_speed, 0.0, 0.0])
        if abs(box[0]) > 4.0:
            box_dir = -box_dir

    shape = (cfg.length, 1, cfg.height, cfg.width)
    frames, depth, masks = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    rigid = np.zeros((cfg.length, 2, cfg.height, cfg.width))
    residual = np.zeros_like(rigid)
    poses = np.zeros((cfg.length, 6))
    grid = np.stack(np.meshgrid(np.arange(cfg.width, dtype=np.float64),
                                np.arange(cfg.height, dtype=np.float64), indexing='xy'))
    for t in range(cfg.length):
        image, d, points, on_box = scene.render(positions[t], yaws[t], boxes[t])
        frames[t, 0], depth[t, 0], masks[t, 0] = image, d, on_box
        if t == 0:
            continue
        poses[t] = relative_pose(positions[t - 1], yaws[t - 1], positions[t], yaws[t]).to_vector()
        static_coords = scene.project(points, positions[t - 1], yaws[t - 1])
        shifted = points - (boxes[t] - boxes[t - 1])[:, None, None] * on_box[None]
        total_coords = scene.project(shifted, positions[t - 1], yaws[t - 1])
        rigid[t] = static_coords - grid
        residual[t] = (total_coords - static_coords) * on_box[None]

    return LabeledSequence(frames=frames, world_kind='ego', seed=seed, fg_mask=masks,
                           depth=depth, pose=poses, rigid_flow=rigid, residual_flow=residual,
                           intrinsics=cfg.intrinsics())


# ============================================================================
# BEV grid world
# ============================================================================

def _heading_bucket(heading: float) -> int:
    return int((heading % (2.0 * math.pi)) / (2.0 * math.pi) * HEADING_BUCKETS) % HEADING_BUCKETS


def _squares_clear(center: np.ndarray, radius: int, others: List[Tuple[np.ndarray, int]]) -> bool:
    """True when the square keeps at least one empty cell to every other square"""
    c = np.round(center)
    for other, other_radius in others:
        if np.max(np.abs(c - np.round(other))) <= radius + other_radius + 1:
            return False
    return True


def gen_bevworld(cfg: BEVWorldConfig, seed: int) -> LabeledSequence:
    """
    Generate one BEV sequence with instance labels

    Agents are odd-sided squares that move at constant velocity, pick a new
    heading at Poisson-distributed turn events, bounce off the border and
    never touch each other, so instance masks are disjoint full squares.

    Returns:
        LabeledSequence with states [T, 8, N, N] and segmentation, instance
        ids, center heatmap, offsets and future flow labels
    """
    cfg.validate()
    rng = make_rng(seed, 'bev')
    n = cfg.size
    sizes = [s for s in range(cfg.agent_size_range[0], cfg.agent_size_range[1] + 1) if s % 2]
    if not sizes:
        raise InvalidInputError(f"Agent size range {cfg.agent_size_range} has no odd size")
    turn_prob = 1.0 - math.exp(-cfg.turn_rate)

    radii, centers, headings, speeds = [], [], [], []
    for _ in range(cfg.agent_count):
        radius = int(rng.choice(sizes)) // 2
        for _attempt in range(1000):
            candidate = rng.uniform(radius, n - 1 - radius, size=2)
            if _squares_clear(candidate, radius, list(zip(centers, radii))):
                break
        else:
            raise InvalidInputError("Could not place agents without overlap")
        radii.append(radius)
        centers.append(candidate)
        headings.append(rng.uniform(0.0, 2.0 * math.pi))
        speeds.append(rng.uniform(*cfg.speed_range))

    track = []
    for _ in range(cfg.length + 1):
        track.append([(np.round(c).astype(int), headings[i]) for i, c in enumerate(centers)])
        for i in range(cfg.agent_count):
            if rng.uniform() < turn_prob:
                headings[i] = rng.uniform(0.0, 2.0 * math.pi)
            step = speeds[i] * np.array([math.sin(headings[i]), math.cos(headings[i])])
            moved = centers[i] + step
            low, high = radii[i], n - 1 - radii[i]
            if moved[0] < low or moved[0] > high:
                headings[i] = -headings[i]
                moved[0] = min(max(moved[0], low), high)
            if moved[1] < low or moved[1] > high:
                headings[i] = math.pi - headings[i]
                moved[1] = min(max(moved[1], low), high)
            others = [(centers[j], radii[j]) for j in range(cfg.agent_count) if j != i]
            if _squares_clear(moved, radii[i], others):
                centers[i] = moved
            else:
                headings[i] = rng.uniform(0.0, 2.0 * math.pi)

    length = cfg.length
    states = np.zeros((length, BEV_CHANNELS, n, n))
    segmentation = np.zeros((length, n, n), dtype=np.int32)
    instance_ids = np.zeros((length, n, n), dtype=np.int32)
    heatmap = np.zeros((length, 1, n, n))
    offsets = np.zeros((length, 2, n, n))
    future_flow = np.zeros((length, 2, n, n))
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    for t in range(length):
        for i, ((cy, cx), heading) in enumerate(track[t]):
            r = radii[i]
            window = (slice(cy - r, cy + r + 1), slice(cx - r, cx + r + 1))
            states[t, 0][window] = 1.0
            states[t, 1 + _heading_bucket(heading)][window] = 1.0
            segmentation[t][window] = 1
            instance_ids[t][window] = i + 1
            offsets[t, 0][window] = cx - cols[window]
            offsets[t, 1][window] = cy - rows[window]
            (ny, nx), _ = track[t + 1][i]
            future_flow[t, 0][window] = nx - cx
            future_flow[t, 1][window] = ny - cy
            blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * CENTER_SIGMA ** 2))
            heatmap[t, 0] = np.maximum(heatmap[t, 0], blob)

    return LabeledSequence(frames=states, world_kind='bev', seed=seed,
                           fg_mask=segmentation[:, None].astype(np.float64),
                           segmentation=segmentation, instance_ids=instance_ids,
                           centers=heatmap, offsets=offsets, future_flow=future_flow)


# ============================================================================
# Toy low-dimensional sequences
# ============================================================================

def gen_toy(cfg: ToyWorldConfig, seed: int) -> LabeledSequence:
    """
    Vector sequences x_t = C y_t + noise with y_{t+1} = y_t + 0.3 tanh(A y_t) + 0.2 eps

    C and A are shared by every sequence; frames have shape [T, observation_dim].
    """
    cfg.validate()
    shared = make_rng(0, 'toy/maps')
    observe = shared.normal(size=(cfg.observation_dim, cfg.state_dim)) / math.sqrt(cfg.state_dim)
    mixing = shared.normal(size=(cfg.state_dim, cfg.state_dim))
    rng = make_rng(seed, 'toy')
    state = rng.normal(size=cfg.state_dim)
    frames = np.zeros((cfg.length, cfg.observation_dim))
    for t in range(cfg.length):
        frames[t] = observe @ state + cfg.noise_std * rng.normal(size=cfg.observation_dim)
        state = state + 0.3 * np.tanh(mixing @ state) + 0.2 * rng.normal(size=cfg.state_dim)
    return LabeledSequence(frames=frames, world_kind='toy', seed=seed)


GENERATORS = {
    'sprites': gen_sprites,
    'ego': gen_egoworld,
    'bev': gen_bevworld,
    'toy': gen_toy,
}


def generate(world_kind: str, cfg: WorldConfig, seed: int) -> LabeledSequence:
    """Dispatch to the generator for ``world_kind``"""
    if world_kind not in GENERATORS:
        raise InvalidInputError(f"Unknown world kind: {world_kind}")
    return GENERATORS[world_kind](cfg, seed)


def sequence_seed(seed: int, world_kind: str, index: int) -> int:
    """Seed of the ``index``-th sequence of a dataset"""
    return stream_key(seed, f'{world_kind}/seq/{index}') % (2 ** 31)


# ============================================================================
# Dataset directory
# ============================================================================

def write_dataset(out_dir: str, world_kind: str, cfg: WorldConfig, n_sequences: int,
                  seed: int, config_hash: str, workers: int = 1, logger=None) -> str:
    """
    Generate and write a dataset directory

    Args:
        out_dir: Target directory
        world_kind: One of WORLD_KINDS
        cfg: World configuration
        n_sequences: Number of sequences
        seed: Global seed
        config_hash: Hash recorded in the manifest
        workers: Parallel generator threads
        logger: Optional RunLogger

    Returns:
        Path of the manifest file
    """
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    seeds = [sequence_seed(seed, world_kind, i) for i in range(n_sequences)]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sequences = list(pool.map(lambda s: generate(world_kind, cfg, s), seeds))

    for i, sequence in enumerate(sequences):
        write_bundle(str(target / f'seq_{i:05d}.sdl'), sequence.to_arrays())
        if logger:
            logger.debug(f"Wrote sequence {i} (seed {sequence.seed})")

    frame_shape = sequences[0].frames.shape if sequences else ()
    lines = [
        'format = SDLSET1',
        f'world_kind = {world_kind}',
        f'sequence_count = {n_sequences}',
        f'seed = {seed}',
        f'config_hash = {config_hash}',
        f"frame_shape = {','.join(str(v) for v in frame_shape)}",
    ]
    manifest = target / MANIFEST_NAME
    manifest.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return str(manifest)


def read_manifest(data_dir: str) -> Dict[str, str]:
    """Parse the dataset manifest"""
    manifest = Path(data_dir) / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"No manifest in {data_dir}")
    values = {}
    for line in manifest.read_text(encoding='utf-8').splitlines():
        if ' = ' in line:
            key, _, value = line.partition(' = ')
            values[key.strip()] = value.strip()
    return values


def load_sequence(data_dir: str, index: int, world_kind: str) -> LabeledSequence:
    arrays = read_bundle(str(Path(data_dir) / f'seq_{index:05d}.sdl'))
    return LabeledSequence.from_arrays(arrays, world_kind)


def load_dataset(data_dir: str, limit: Optional[int] = None) -> Tuple[Dict[str, str], List[LabeledSequence]]:
    """
    Load a dataset directory

    Args:
        data_dir: Directory written by ``write_dataset``
        limit: Optional maximum number of sequences

    Returns:
        (manifest values, sequences)
    """
    manifest = read_manifest(data_dir)
    count = int(manifest['sequence_count'])
    if limit:
        count = min(count, limit)
    world_kind = manifest['world_kind']
    return manifest, [load_sequence(data_dir, i, world_kind) for i in range(count)]
