"""Model construction and the training loop"""

import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.checkpoint import save_checkpoint
from stoch_future.config_manager import RunConfig
from stoch_future.errors import ConfigError, DatasetError, NumericalError
from stoch_future.models import LabeledSequence, LossBreakdown, TrainingResult
from stoch_future.optim import AdamState, adam_step
from stoch_future.report_exporter import ReportExporter, breakdown_row
from stoch_future.rng import make_rng
from stoch_future.ssm_residual import (SRVPModel, SRVPPlusModel, StateSpaceModel,
                                       StretchBEVModel, ssm_elbo)
from stoch_future.svp_ar import (AutoregressiveModel, SLAMP3DModel, SLAMPModel, SVGModel,
                                 train_loss)
from stoch_future.warpgeom import CameraIntrinsics

CHECKPOINT_NAME = 'model.ckpt'
TRACE_NAME = 'loss_trace.csv'


def build_model(config: RunConfig, frame_shape: Tuple[int, ...],
                intrinsics: Optional[Sequence[float]] = None):
    """
    Instantiate the model named by ``config.model_kind``

    Parameters are drawn from the 'model/init' stream of the run seed at
    the configured precision.

    Args:
        config: Resolved run configuration
        frame_shape: Shape of one observation ([C, H, W] or [D])
        intrinsics: (fx, fy, cx, cy) for SLAMP-3D models

    Returns:
        AutoregressiveModel or StateSpaceModel
    """
    tc.set_precision(config.precision)
    rng = make_rng(config.seed, 'model/init')
    kind = config.model_kind
    frame_shape = tuple(int(v) for v in frame_shape)
    image = len(frame_shape) == 3

    if kind in ('svg', 'slamp', 'slamp-baseline', 'srvp++-direct', 'srvp++-mask') and not image:
        raise ConfigError(f"{kind} needs image frames, got shape {frame_shape}")

    shared = dict(latent_dim=config.latent_dim, hidden_dim=config.hidden_dim,
                  feature_dim=config.feature_dim, base_channels=config.base_channels)
    if kind == 'svg':
        return SVGModel(*frame_shape, rng, beta=config.beta, fixed_prior=config.fixed_prior,
                        **shared)
    if kind in ('slamp', 'slamp-baseline'):
        return SLAMPModel(*frame_shape, rng, beta=config.beta, fixed_prior=config.fixed_prior,
                          baseline=kind == 'slamp-baseline', **shared)
    if kind.startswith('slamp3d-'):
        if intrinsics is None:
            raise ConfigError(f"{kind} needs camera intrinsics")
        fx, fy, cx, cy = (float(v) for v in intrinsics)
        return SLAMP3DModel(*frame_shape, CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy), rng,
                            variant=kind.split('-', 1)[1], latent_dim=config.latent_dim,
                            base_channels=config.base_channels, kl_samples=config.kl_samples,
                            sigma2_min=config.sigma2_min)

    dynamics = dict(dt=config.dt, substeps=config.substeps)
    if kind == 'srvp':
        return SRVPModel(frame_shape, config.k, rng, state_dim=config.state_dim,
                         use_content=config.use_content, **shared, **dynamics)
    if kind.startswith('srvp++-'):
        return SRVPPlusModel(frame_shape, config.k, rng, variant=kind.split('-', 1)[1],
                             state_dim=config.state_dim, use_content=config.use_content,
                             **shared, **dynamics)

    variant = {'stretchbev': 'base', 'stretchbev-p': 'p', 'stretchbev-global': 'global'}[kind]
    if not image or frame_shape[1] != frame_shape[2]:
        raise ConfigError(f"{kind} needs square BEV grids, got shape {frame_shape}")
    return StretchBEVModel(frame_shape[1], config.k, rng, variant=variant,
                           state_channels=config.state_channels,
                           latent_channels=config.latent_channels,
                           base_channels=config.base_channels, in_channels=frame_shape[0],
                           **dynamics)


def model_for_dataset(config: RunConfig, sequences: Sequence[LabeledSequence]):
    """Build the configured model for the observation shape of a dataset"""
    if not sequences:
        raise DatasetError("Dataset holds no sequences")
    first = sequences[0]
    return build_model(config, first.frames.shape[1:], first.intrinsics)


def compute_loss(model, frames: np.ndarray, rng: np.random.Generator, k: int,
                 labels: Optional[np.ndarray] = None, pretrain: bool = False,
                 label_weights=None) -> LossBreakdown:
    """Training objective of either model family"""
    if isinstance(model, AutoregressiveModel):
        return train_loss(model, frames, rng, k)
    if isinstance(model, StateSpaceModel):
        return ssm_elbo(model, frames, rng, labels=labels, pretrain=pretrain,
                        label_weights=label_weights)
    raise ConfigError(f"Unsupported model type: {type(model).__name__}")


class Trainer:
    """Adam training over random windows of a dataset"""

    def __init__(self, config: RunConfig, model, sequences: Sequence[LabeledSequence],
                 output_directory: str, logger=None):
        """
        Initialize Trainer

        Args:
            config: Resolved run configuration
            model: Model built by ``build_model``
            sequences: Training sequences
            output_directory: Directory for the loss trace and checkpoints
            logger: Optional RunLogger
        """
        self.config = config
        self.model = model
        self.sequences = list(sequences)
        self.output_directory = Path(output_directory)
        self.logger = logger
        self.window = config.k + config.train_horizon
        self.is_bev = isinstance(model, StretchBEVModel)

        if not self.sequences:
            raise DatasetError("No training sequences")
        short = [i for i, s in enumerate(self.sequences) if s.length < self.window]
        if short:
            raise DatasetError(f"Sequences {short[:5]} are shorter than k + train horizon "
                               f"({self.window} frames)")
        if self.is_bev and not all(s.has_labels for s in self.sequences):
            raise DatasetError("StretchBEV training needs labeled BEV sequences")

        self.pretrain_steps = config.pretrain_steps if self.is_bev else 0
        if config.pretrain_steps and not self.is_bev and logger:
            logger.warning(f"pretrain_steps ignored for {config.model_kind}")

    def phase(self, step: int) -> str:
        return 'pretrain' if step < self.pretrain_steps else 'train'

    def learning_rate(self, step: int) -> float:
        """Full rate while pre-training, scaled rate for label fine-tuning afterwards"""
        if self.pretrain_steps and step >= self.pretrain_steps:
            return self.config.learning_rate * self.config.finetune_lr_scale
        return self.config.learning_rate

    def sample_batch(self, rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """
        Draw a batch of windows

        Returns:
            (frames [B, k + train_horizon, ...], label stacks or None)
        """
        frames, labels = [], []
        for _ in range(self.config.batch_size):
            sequence = self.sequences[int(rng.integers(len(self.sequences)))]
            start = int(rng.integers(sequence.length - self.window + 1))
            window = sequence.window(start, self.window)
            frames.append(window.frames)
            if self.is_bev:
                labels.append(window.label_stack())
        return np.stack(frames), (np.stack(labels) if self.is_bev else None)

    def train_step(self, step: int, frames: np.ndarray, labels: Optional[np.ndarray],
                   noise_rng: np.random.Generator, state: AdamState) -> LossBreakdown:
        """One gradient update; numerical failures carry the step index"""
        try:
            with tc.DiffRecord():
                breakdown = compute_loss(self.model, frames, noise_rng, self.config.k, labels,
                                         pretrain=self.phase(step) == 'pretrain',
                                         label_weights=self.config.label_weights)
                if not math.isfinite(breakdown.total):
                    raise NumericalError("non-finite training loss")
                grads = tc.backward(breakdown.objective, self.model.params)
            state.learning_rate = self.learning_rate(step)
            adam_step(self.model.params, grads, state)
        except NumericalError as exc:
            message = exc.args[0] if exc.args else 'numerical failure'
            raise NumericalError(message, step=step) from exc
        return breakdown

    def checkpoint_meta(self, step: int) -> dict:
        return {'config_hash': self.config.config_hash(), 'step': str(step),
                'seed': str(self.config.seed), 'precision': str(self.config.precision)}

    def train(self, checkpoint_path: Optional[str] = None,
              steps: Optional[int] = None) -> TrainingResult:
        """
        Run the configured number of steps

        Writes the loss trace (one row per step), periodic checkpoints every
        ``checkpoint_every`` steps and a final checkpoint. With zero steps
        the final checkpoint holds the initialization.

        Args:
            checkpoint_path: Final checkpoint path (default <out>/model.ckpt)
            steps: Override of ``config.steps``

        Returns:
            TrainingResult
        """
        steps = self.config.steps if steps is None else steps
        self.output_directory.mkdir(parents=True, exist_ok=True)
        checkpoint_path = checkpoint_path or str(self.output_directory / CHECKPOINT_NAME)
        exporter = ReportExporter(str(self.output_directory))
        batch_rng = make_rng(self.config.seed, 'train/batch')
        noise_rng = make_rng(self.config.seed, 'train/noise')
        state = AdamState.for_params(self.model.params, self.config.learning_rate)

        rows: List[dict] = []
        periodic: List[str] = []
        last_total = math.nan
        if self.logger:
            self.logger.info(f"Training {self.config.model_kind}: {steps} steps, "
                             f"{self.model.params.num_parameters()} parameters, "
                             f"{self.pretrain_steps} pre-training steps")
        try:
            for step in range(steps):
                frames, labels = self.sample_batch(batch_rng)
                breakdown = self.train_step(step, frames, labels, noise_rng, state)
                last_total = breakdown.total
                rows.append(breakdown_row(step, self.phase(step), breakdown))
                if self.logger and (step % max(self.config.log_every, 1) == 0 or step == steps - 1):
                    self.logger.log_step(step, breakdown, self.phase(step))
                every = self.config.checkpoint_every
                if every > 0 and (step + 1) % every == 0 and step + 1 < steps:
                    path = self.output_directory / f'checkpoint_step{step + 1:06d}.ckpt'
                    periodic.append(save_checkpoint(str(path), self.model.params,
                                                    self.model.kind, state,
                                                    self.checkpoint_meta(step + 1)))
        finally:
            trace_path = exporter.write_loss_trace(rows, TRACE_NAME)

        final = save_checkpoint(checkpoint_path, self.model.params, self.model.kind, state,
                                self.checkpoint_meta(steps))
        if self.logger:
            self.logger.log_operation("Training", "OK", f"{steps} steps, checkpoint {final}")
        return TrainingResult(model_kind=self.model.kind, steps_completed=steps,
                              checkpoint_path=final, trace_path=trace_path,
                              final_total=last_total, periodic_checkpoints=periodic)
