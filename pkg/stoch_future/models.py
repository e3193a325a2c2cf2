"""Data models for Stoch-Future"""

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np

from stoch_future.errors import InvalidInputError


@dataclass
class SpriteWorldConfig:
    """Bouncing-sprite world"""
    height: int = 32
    width: int = 32
    sprite_count: int = 2
    sprite_size: int = 6
    speed_range: Tuple[float, float] = (1.0, 3.0)
    length: int = 30

    def validate(self) -> None:
        if not 1 <= self.sprite_count <= 2:
            raise InvalidInputError(f"sprite_count must be 1 or 2, got {self.sprite_count}")
        if self.sprite_size < 1 or self.sprite_size > min(self.height, self.width):
            raise InvalidInputError(f"sprite_size {self.sprite_size} does not fit the grid")
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise InvalidInputError(f"Invalid speed range {self.speed_range}")
        if self.length < 2:
            raise InvalidInputError("Sequences need at least two frames")


@dataclass
class EgoWorldConfig:
    """Forward-driving camera over a textured ground plane with one moving box"""
    height: int = 48
    width: int = 32
    focal: float = 24.0
    camera_height: float = 1.5
    wall_distance: float = 36.0
    ego_speed_range: Tuple[float, float] = (0.0, 0.25)
    yaw_rate: float = 0.01
    box_speed_range: Tuple[float, float] = (0.0, 0.2)
    box_width: float = 1.6
    box_height: float = 1.2
    box_distance: float = 12.0
    length: int = 30

    def validate(self) -> None:
        if self.focal <= 0 or self.camera_height <= 0:
            raise InvalidInputError("focal and camera_height must be positive")
        travel = self.ego_speed_range[1] * self.length
        if self.box_distance - travel < 2.0:
            raise InvalidInputError("Camera would reach the box within the sequence")
        if self.wall_distance - travel < self.box_distance + 1.0:
            raise InvalidInputError("Wall is too close for the requested ego speed")
        if self.length < 2:
            raise InvalidInputError("Sequences need at least two frames")

    def intrinsics(self) -> np.ndarray:
        return np.array([self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0])


@dataclass
class BEVWorldConfig:
    """Top-down grid with square agents that bounce off the border"""
    size: int = 48
    agent_count: int = 3
    agent_size_range: Tuple[int, int] = (3, 5)
    speed_range: Tuple[float, float] = (0.5, 1.5)
    turn_rate: float = 0.1
    length: int = 16

    def validate(self) -> None:
        if self.agent_size_range[0] < 1 or self.agent_size_range[1] >= self.size // 2:
            raise InvalidInputError(f"Invalid agent size range {self.agent_size_range}")
        if self.length < 2:
            raise InvalidInputError("Sequences need at least two frames")


@dataclass
class ToyWorldConfig:
    """Low-dimensional latent dynamics observed through a fixed linear map"""
    state_dim: int = 2
    observation_dim: int = 4
    noise_std: float = 0.1
    length: int = 12

    def validate(self) -> None:
        if self.state_dim < 1 or self.observation_dim < 1:
            raise InvalidInputError("Toy world dimensions must be positive")


@dataclass
class LabeledSequence:
    """Frames or BEV states with optional ground-truth annotations"""
    frames: np.ndarray
    world_kind: str
    seed: int = 0
    fg_mask: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    pose: Optional[np.ndarray] = None
    rigid_flow: Optional[np.ndarray] = None
    residual_flow: Optional[np.ndarray] = None
    intrinsics: Optional[np.ndarray] = None
    segmentation: Optional[np.ndarray] = None
    instance_ids: Optional[np.ndarray] = None
    centers: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None
    future_flow: Optional[np.ndarray] = None

    ARRAY_FIELDS = ('frames', 'fg_mask', 'depth', 'pose', 'rigid_flow', 'residual_flow',
                    'intrinsics', 'segmentation', 'instance_ids', 'centers', 'offsets',
                    'future_flow')

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def has_labels(self) -> bool:
        return self.segmentation is not None

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Named arrays for the sequence bundle file"""
        arrays = {name: getattr(self, name) for name in self.ARRAY_FIELDS
                  if getattr(self, name) is not None}
        arrays['seed'] = np.array([self.seed], dtype=np.int32)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], world_kind: str) -> 'LabeledSequence':
        kwargs = {name: arrays.get(name) for name in cls.ARRAY_FIELDS}
        seed = int(arrays['seed'][0]) if 'seed' in arrays else 0
        return cls(world_kind=world_kind, seed=seed, **kwargs)

    def label_stack(self) -> np.ndarray:
        """
        Stack BEV labels into [T, 7, H, W] channels:
        seg one-hot (2), center (1), offset (2), future flow (2)
        """
        if not self.has_labels:
            raise InvalidInputError("Sequence has no labels")
        seg = self.segmentation.astype(np.float64)
        one_hot = np.stack([1.0 - seg, seg], axis=1)
        return np.concatenate([one_hot, self.centers, self.offsets, self.future_flow], axis=1)

    def window(self, start: int, length: int) -> 'LabeledSequence':
        """Sub-sequence of ``length`` frames starting at ``start``"""
        def cut(array):
            if array is None or array.ndim == 1:
                return array
            return array[start:start + length]
        kwargs = {name: cut(getattr(self, name)) for name in self.ARRAY_FIELDS}
        kwargs['intrinsics'] = self.intrinsics
        return LabeledSequence(world_kind=self.world_kind, seed=self.seed, **kwargs)


@dataclass
class LossBreakdown:
    """Weighted loss terms whose sum is the training objective"""
    terms: Dict[str, float]
    total: float
    diagnostics: Dict[str, float] = field(default_factory=dict)
    objective: object = field(default=None, repr=False, compare=False)

    @classmethod
    def from_terms(cls, terms: Dict[str, object],
                   diagnostics: Optional[Dict[str, float]] = None) -> 'LossBreakdown':
        """
        Build a breakdown from scalar loss tensors

        Args:
            terms: Name -> scalar tensor (anything with ``item()``); the
                objective is their sum in name order
            diagnostics: Extra values reported but not optimised

        Returns:
            LossBreakdown whose total is the float sum of the reported terms
        """
        names = sorted(terms)
        objective = None
        for name in names:
            objective = terms[name] if objective is None else objective + terms[name]
        values = {name: terms[name].item() for name in names}
        return cls(terms=values, total=float(sum(values[n] for n in names)),
                   diagnostics=dict(diagnostics or {}), objective=objective)

    def to_dict(self) -> dict:
        """Flat row for the loss trace"""
        row = {'total': self.total}
        row.update(self.terms)
        return row

    def check_consistency(self, tolerance: float = 1e-10) -> bool:
        return abs(sum(self.terms.values()) - self.total) <= tolerance * max(1.0, abs(self.total))


@dataclass
class RolloutResult:
    """One sampled future with its intermediate quantities"""
    predictions: np.ndarray
    intermediates: Dict[str, np.ndarray] = field(default_factory=dict)
    latents: Dict[str, np.ndarray] = field(default_factory=dict)
    labels: Optional[Dict[str, np.ndarray]] = None

    @property
    def horizon(self) -> int:
        return int(self.predictions.shape[0])


@dataclass
class SSMRollout(RolloutResult):
    """State-space sample: decoded frames plus the latent state trajectory"""
    states: Optional[np.ndarray] = None


@dataclass
class MetricReport:
    """Per-frame values over sequences with mean and 95% confidence half-width"""
    name: str
    per_frame: List[List[float]]
    region: str = 'full'

    @property
    def sequence_count(self) -> int:
        return len(self.per_frame)

    @property
    def per_sequence(self) -> List[float]:
        return [float(np.mean(values)) if values else math.nan for values in self.per_frame]

    @property
    def mean(self) -> float:
        values = self.per_sequence
        if not values:
            return math.nan
        # a +inf PSNR sentinel propagates to the mean
        return float(np.mean(values))

    @property
    def ci95(self) -> float:
        values = self.per_sequence
        if len(values) < 2 or any(math.isinf(v) for v in values):
            return 0.0
        return float(1.96 * np.std(values, ddof=1) / math.sqrt(len(values)))

    def get_summary(self) -> dict:
        return {
            'metric': self.name,
            'region': self.region,
            'mean': self.mean,
            'ci95': self.ci95,
            'sequences': self.sequence_count,
            'frames': int(sum(len(v) for v in self.per_frame)),
        }


@dataclass
class RunState:
    """Execution statistics of one CLI command"""
    command: str
    start_time: datetime
    end_time: datetime
    steps_completed: int = 0
    sequences_processed: int = 0
    files_written: List[str] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    def get_summary(self) -> dict:
        duration = (self.end_time - self.start_time).total_seconds()
        return {
            'command': self.command,
            'steps_completed': self.steps_completed,
            'sequences_processed': self.sequences_processed,
            'files_written': len(self.files_written),
            'duration_seconds': duration,
            'error_count': len(self.errors),
        }


@dataclass
class TrainingResult:
    """Outcome of a training run"""
    model_kind: str
    steps_completed: int
    checkpoint_path: str
    trace_path: str
    final_total: float = math.nan
    periodic_checkpoints: List[str] = field(default_factory=list)

    def get_summary(self) -> dict:
        return {
            'model_kind': self.model_kind,
            'steps_completed': self.steps_completed,
            'final_total': self.final_total,
            'checkpoint': self.checkpoint_path,
            'loss_trace': self.trace_path,
            'periodic_checkpoints': len(self.periodic_checkpoints),
        }


@dataclass
class EvaluationResult:
    """Metric reports of one evaluation plus scalar extras"""
    reports: List[MetricReport] = field(default_factory=list)
    extra: Dict[str, float] = field(default_factory=dict)

    def report(self, name: str, region: str = 'full') -> MetricReport:
        for item in self.reports:
            if item.name == name and item.region == region:
                return item
        raise KeyError(f"No report for {name} ({region})")

    def names(self) -> List[Tuple[str, str]]:
        return [(r.name, r.region) for r in self.reports]
