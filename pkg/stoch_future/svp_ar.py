"""Autoregressive stochastic video prediction

Model families:
    * SVGModel: single latent chain with a learned (or fixed) prior
    * SLAMPModel: appearance chain plus a motion chain that decodes optical
      flow; predictions are blended with a learned mask. The baseline
      variant decodes flow and mask from the appearance chain alone
    * SLAMP3DModel: static chain decoding depth and camera pose, dynamic
      chain decoding residual flow on top of the rigid warp

All models share the step protocol used by ``train_loss`` and ``rollout``:
``initial_state(x0, k)`` then ``step(state, x_prev, target, noise)`` per
predicted frame. With a target the posterior is used, otherwise the prior.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.distributions import (DiagGaussian, NoiseSource, kl_diag, kl_standard,
                                        sigma_vae_nll)
from stoch_future.errors import InvalidInputError, ShapeError
from stoch_future.layers import Conv2d, ConvLSTMCell, Linear, LSTMCell, ParamStore
from stoch_future.models import LossBreakdown, RolloutResult
from stoch_future.networks import ConvDecoder, ConvEncoder, FrameDecoder, FrameEncoder, spatial_mean
from stoch_future.rng import child_rng
from stoch_future.tensorcore import Tensor
from stoch_future.warpgeom import (POSE_SCALE, CameraIntrinsics, blend, compose_residual,
                                   depth_activation, flow_activation, warp_by_depth_pose,
                                   warp_by_flow)

SLAMP3D_VARIANTS = ('depthonly', 'combined', 'conditional')


@dataclass
class StepTrace:
    """Instrumentation record of one model step"""
    t: int
    frame_source: str
    latent_source: str


# ============================================================================
# Recurrent building blocks
# ============================================================================

class GaussianLSTM:
    """LSTM followed by a linear [mean, log_var] head"""

    def __init__(self, store: ParamStore, name: str, input_size: int, hidden_size: int,
                 latent_dim: int, rng: np.random.Generator):
        self.cell = LSTMCell(store, f'{name}.lstm', input_size, hidden_size, rng)
        self.head = Linear(store, f'{name}.head', hidden_size, 2 * latent_dim, rng)

    def zero_state(self, batch: int):
        return self.cell.zero_state(batch)

    def __call__(self, x: Tensor, state) -> Tuple[DiagGaussian, tuple]:
        state = self.cell(x, state)
        return DiagGaussian.from_params(self.head(state[0])), state


class FeatureLSTM:
    """LSTM predictor emitting tanh features"""

    def __init__(self, store: ParamStore, name: str, input_size: int, hidden_size: int,
                 out_size: int, rng: np.random.Generator):
        self.cell = LSTMCell(store, f'{name}.lstm', input_size, hidden_size, rng)
        self.out = Linear(store, f'{name}.out', hidden_size, out_size, rng)

    def zero_state(self, batch: int):
        return self.cell.zero_state(batch)

    def __call__(self, x: Tensor, state) -> Tuple[Tensor, tuple]:
        state = self.cell(x, state)
        return tc.tanh(self.out(state[0])), state


class GaussianConvLSTM:
    """ConvLSTM followed by a 3x3 [mean, log_var] head; latents are per-cell grids"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, hidden_channels: int,
                 latent_channels: int, rng: np.random.Generator):
        self.cell = ConvLSTMCell(store, f'{name}.lstm', in_channels, hidden_channels, rng)
        self.head = Conv2d(store, f'{name}.head', hidden_channels, 2 * latent_channels, rng)

    def zero_state(self, batch: int, height: int, width: int):
        return self.cell.zero_state(batch, height, width)

    def __call__(self, x: Tensor, state) -> Tuple[DiagGaussian, tuple]:
        state = self.cell(x, state)
        return DiagGaussian.from_params(self.head(state[0])), state


class FeatureConvLSTM:
    def __init__(self, store: ParamStore, name: str, in_channels: int, hidden_channels: int,
                 out_channels: int, rng: np.random.Generator):
        self.cell = ConvLSTMCell(store, f'{name}.lstm', in_channels, hidden_channels, rng)
        self.out = Conv2d(store, f'{name}.out', hidden_channels, out_channels, rng)

    def zero_state(self, batch: int, height: int, width: int):
        return self.cell.zero_state(batch, height, width)

    def __call__(self, x: Tensor, state) -> Tuple[Tensor, tuple]:
        state = self.cell(x, state)
        return tc.tanh(self.out(state[0])), state


def _cached(state: dict, key: str, inputs: tuple, compute):
    """Reuse a value computed earlier for the very same input tensors"""
    entry = state.get(key)
    if entry is not None and len(entry[0]) == len(inputs) and \
            all(a is b for a, b in zip(entry[0], inputs)):
        return entry[1]
    value = compute()
    state[key] = (inputs, value)
    return value


# ============================================================================
# Shared protocol
# ============================================================================

class AutoregressiveModel:
    """Base class holding parameters, frame geometry and instrumentation"""

    kind = ''
    min_length = 2
    min_conditioning = 1

    def __init__(self, channels: int, height: int, width: int):
        self.params = ParamStore()
        self.channels = channels
        self.height = height
        self.width = width
        self.kl_weight = 1.0
        self.trace: List[object] = []

    def initial_state(self, x0: Tensor, k: int) -> dict:
        return {'t': 0, 'k': k}

    def step(self, state: dict, x_prev: Tensor, target: Optional[Tensor],
             noise: NoiseSource) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
        raise NotImplementedError

    def reconstruction_terms(self, outputs: Dict[str, Tensor],
                             target: Tensor) -> Dict[str, Tensor]:
        raise NotImplementedError

    def check_frames(self, frames: np.ndarray) -> None:
        if frames.ndim != 5 or frames.shape[2:] != (self.channels, self.height, self.width):
            raise ShapeError(f"{self.kind} expects frames [B, T, {self.channels}, "
                             f"{self.height}, {self.width}], got {frames.shape}")


def train_loss(model: AutoregressiveModel, frames: np.ndarray, rng: np.random.Generator,
               k: int) -> LossBreakdown:
    """
    Teacher-forced training objective

    Every predicted step consumes the ground-truth previous frame and a
    latent drawn from the posterior; KL terms are weighted by
    ``model.kl_weight``.

    Args:
        model: Autoregressive model
        frames: Batch [B, T, C, H, W]
        rng: Noise stream
        k: Conditioning length (selects the skip-connection frame)

    Returns:
        LossBreakdown; ``objective`` is the differentiable total
    """
    model.check_frames(frames)
    length = frames.shape[1]
    if length < model.min_length:
        raise InvalidInputError(f"{model.kind} needs sequences of at least "
                                f"{model.min_length} frames, got {length}")
    noise = NoiseSource(rng)
    xs = [Tensor(frames[:, t]) for t in range(length)]
    model.trace = []
    state = model.initial_state(xs[0], k)

    recon: Dict[str, Tensor] = {}
    kls: Dict[str, Tensor] = {}
    for t in range(1, length):
        outputs, step_kls = model.step(state, xs[t - 1], xs[t], noise)
        model.trace.append(StepTrace(t, 'ground_truth', 'posterior'))
        for name, value in model.reconstruction_terms(outputs, xs[t]).items():
            recon[name] = value if name not in recon else recon[name] + value
        for name, value in step_kls.items():
            kls[name] = value if name not in kls else kls[name] + value

    terms = dict(recon)
    for name, value in kls.items():
        terms[name] = value * model.kl_weight
    diagnostics = {f'{name}_raw': value.item() for name, value in kls.items()}
    return LossBreakdown.from_terms(terms, diagnostics)


def svg_train_step(model: 'SVGModel', frames: np.ndarray, rng: np.random.Generator,
                   k: int) -> LossBreakdown:
    return train_loss(model, frames, rng, k)


def slamp_train_step(model: 'SLAMPModel', frames: np.ndarray, rng: np.random.Generator,
                     k: int) -> LossBreakdown:
    return train_loss(model, frames, rng, k)


def slamp3d_train_step(model: 'SLAMP3DModel', frames: np.ndarray, rng: np.random.Generator,
                       k: int) -> LossBreakdown:
    return train_loss(model, frames, rng, k)


# ============================================================================
# SVG
# ============================================================================

class SVGModel(AutoregressiveModel):
    """Frame encoder/decoder with posterior, prior and predictor LSTMs"""

    kind = 'svg'

    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator,
                 latent_dim: int = 16, hidden_dim: int = 64, feature_dim: int = 64,
                 base_channels: int = 8, beta: float = 1e-4, fixed_prior: bool = False):
        super().__init__(channels, height, width)
        p = self.params
        self.latent_dim = latent_dim
        self.kl_weight = beta
        self.fixed_prior = fixed_prior
        self.encoder = FrameEncoder(p, 'frame_enc', channels, height, width, feature_dim,
                                    base_channels, rng)
        self.decoder = FrameDecoder(p, 'frame_dec', feature_dim, channels, self.encoder, rng)
        self.posterior = GaussianLSTM(p, 'posterior', feature_dim, hidden_dim, latent_dim, rng)
        self.prior = None if fixed_prior else GaussianLSTM(p, 'prior', feature_dim, hidden_dim,
                                                           latent_dim, rng)
        self.predictor = FeatureLSTM(p, 'predictor', feature_dim + latent_dim, hidden_dim,
                                     feature_dim, rng)

    def initial_state(self, x0: Tensor, k: int) -> dict:
        batch = x0.shape[0]
        state = super().initial_state(x0, k)
        state['posterior'] = self.posterior.zero_state(batch)
        state['prior'] = self.prior.zero_state(batch) if self.prior else None
        state['predictor'] = self.predictor.zero_state(batch)
        return state

    def encode(self, state: dict, x: Tensor):
        return _cached(state, 'frame_cache', (x,), lambda: self.encoder(x))

    def prior_dist(self, state: dict, h_prev: Tensor) -> DiagGaussian:
        if self.fixed_prior:
            return DiagGaussian.standard((h_prev.shape[0], self.latent_dim))
        dist, state['prior'] = self.prior(h_prev, state['prior'])
        return dist

    def step(self, state, x_prev, target, noise):
        h_prev, feats_prev = self.encode(state, x_prev)
        if state['t'] < state['k']:
            state['skip'] = feats_prev
        prior = self.prior_dist(state, h_prev)
        kls = {}
        if target is not None:
            h_t, _ = self.encode(state, target)
            posterior, state['posterior'] = self.posterior(h_t, state['posterior'])
            z = noise.sample(posterior)
            batch = float(h_t.shape[0])
            kl = kl_standard(posterior) if self.fixed_prior else kl_diag(posterior, prior)
            kls['kl'] = kl / batch
        else:
            z = noise.sample(prior)
        g, state['predictor'] = self.predictor(tc.concat([h_prev, z], axis=1), state['predictor'])
        frame = tc.sigmoid(self.decoder(g, state['skip']))
        state['t'] += 1
        return {'frame': frame, 'z': z}, kls

    def reconstruction_terms(self, outputs, target):
        return {'reconstruction': tc.tmean(tc.square(outputs['frame'] - target))}


# ============================================================================
# SLAMP
# ============================================================================

class SLAMPModel(AutoregressiveModel):
    """Appearance and motion latent chains combined by a learned mask"""

    kind = 'slamp'
    min_length = 3
    min_conditioning = 2

    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator,
                 latent_dim: int = 16, hidden_dim: int = 64, feature_dim: int = 64,
                 base_channels: int = 8, beta: float = 1e-4, fixed_prior: bool = False,
                 baseline: bool = False, motion_latent_dim: Optional[int] = None):
        super().__init__(channels, height, width)
        p = self.params
        self.kind = 'slamp-baseline' if baseline else 'slamp'
        self.baseline = baseline
        self.kl_weight = beta
        self.fixed_prior = fixed_prior
        self.latent_dim = latent_dim
        self.motion_latent_dim = motion_latent_dim or latent_dim

        self.pixel_encoder = FrameEncoder(p, 'pixel_enc', channels, height, width, feature_dim,
                                          base_channels, rng)
        self.pixel_decoder = FrameDecoder(p, 'pixel_dec', feature_dim, channels,
                                          self.pixel_encoder, rng)
        self.pixel_posterior = GaussianLSTM(p, 'pixel_posterior', feature_dim, hidden_dim,
                                            latent_dim, rng)
        self.pixel_prior = None if fixed_prior else GaussianLSTM(
            p, 'pixel_prior', feature_dim, hidden_dim, latent_dim, rng)
        self.pixel_predictor = FeatureLSTM(p, 'pixel_predictor', feature_dim + latent_dim,
                                           hidden_dim, feature_dim, rng)

        if baseline:
            self.flow_decoder = FrameDecoder(p, 'flow_dec', feature_dim, 2, self.pixel_encoder, rng)
            mask_in = feature_dim
        else:
            zf = self.motion_latent_dim
            self.motion_encoder = FrameEncoder(p, 'motion_enc', 2 * channels, height, width,
                                               feature_dim, base_channels, rng)
            self.motion_posterior = GaussianLSTM(p, 'motion_posterior', feature_dim, hidden_dim,
                                                 zf, rng)
            self.motion_prior = None if fixed_prior else GaussianLSTM(
                p, 'motion_prior', feature_dim, hidden_dim, zf, rng)
            self.motion_predictor = FeatureLSTM(p, 'motion_predictor', feature_dim + zf,
                                                hidden_dim, feature_dim, rng)
            self.flow_decoder = FrameDecoder(p, 'flow_dec', feature_dim, 2, self.motion_encoder, rng)
            mask_in = 2 * feature_dim
        self.mask_decoder = FrameDecoder(p, 'mask_dec', mask_in, 1, self.pixel_encoder, rng,
                                         use_skips=False)

    def initial_state(self, x0: Tensor, k: int) -> dict:
        batch = x0.shape[0]
        state = super().initial_state(x0, k)
        state['pixel_posterior'] = self.pixel_posterior.zero_state(batch)
        state['pixel_prior'] = self.pixel_prior.zero_state(batch) if self.pixel_prior else None
        state['pixel_predictor'] = self.pixel_predictor.zero_state(batch)
        state['prev_frame'] = None
        if not self.baseline:
            state['motion_posterior'] = self.motion_posterior.zero_state(batch)
            state['motion_prior'] = self.motion_prior.zero_state(batch) if self.motion_prior else None
            state['motion_predictor'] = self.motion_predictor.zero_state(batch)
        return state

    def encode_pixels(self, state: dict, x: Tensor):
        return _cached(state, 'pixel_cache', (x,), lambda: self.pixel_encoder(x))

    def encode_motion(self, state: dict, a: Tensor, b: Tensor):
        return _cached(state, 'motion_cache', (a, b),
                       lambda: self.motion_encoder(tc.concat([a, b], axis=1)))

    def _prior(self, chain: Optional[GaussianLSTM], state: dict, key: str, h: Tensor,
               latent_dim: int) -> DiagGaussian:
        if chain is None:
            return DiagGaussian.standard((h.shape[0], latent_dim))
        dist, state[key] = chain(h, state[key])
        return dist

    def _kl(self, q: DiagGaussian, p: DiagGaussian) -> Tensor:
        kl = kl_standard(q) if self.fixed_prior else kl_diag(q, p)
        return kl / float(q.shape[0])

    def infer_flow_dists(self, state: dict, x_prevprev: Optional[Tensor], x_prev: Tensor,
                         x_t: Optional[Tensor]) -> Tuple[Optional[DiagGaussian], DiagGaussian]:
        """
        Advance the motion posterior and prior chains

        The prior consumes the motion between the two previous frames; before
        two frames exist it consumes the zero motion of x_prev onto itself.

        Returns:
            (posterior or None without a target, prior)
        """
        if self.baseline:
            raise InvalidInputError("slamp-baseline has no motion chain")
        if x_prevprev is None:
            self.trace.append(('zero_motion_prior', state['t'] + 1))
            history = self.encode_motion(state, x_prev, x_prev)
        else:
            history = self.encode_motion(state, x_prevprev, x_prev)
        state['motion_history'] = history
        prior = self._prior(self.motion_prior, state, 'motion_prior', history[0],
                            self.motion_latent_dim)
        posterior = None
        if x_t is not None:
            current, _ = self.encode_motion(state, x_prev, x_t)
            posterior, state['motion_posterior'] = self.motion_posterior(
                current, state['motion_posterior'])
        return posterior, prior

    def predict_step(self, state: dict, x_prev: Tensor, z_p: Tensor, z_f: Optional[Tensor],
                     force_mask=None, force_flow=None) -> Dict[str, Tensor]:
        """
        Decode one future frame from sampled latents

        Returns:
            Dict with 'appearance', 'flow', 'motion', 'mask' and 'frame'
        """
        h_prev, feats_prev = self.encode_pixels(state, x_prev)
        state.setdefault('pixel_skip', feats_prev)
        g_p, state['pixel_predictor'] = self.pixel_predictor(
            tc.concat([h_prev, z_p], axis=1), state['pixel_predictor'])
        appearance = tc.sigmoid(self.pixel_decoder(g_p, state['pixel_skip']))

        if self.baseline:
            flow_raw = self.flow_decoder(g_p, state['pixel_skip'])
            mask_in = g_p
        else:
            history = state.get('motion_history') or self.encode_motion(state, x_prev, x_prev)
            state.setdefault('motion_skip', history[1])
            g_f, state['motion_predictor'] = self.motion_predictor(
                tc.concat([history[0], z_f], axis=1), state['motion_predictor'])
            flow_raw = self.flow_decoder(g_f, state['motion_skip'])
            mask_in = tc.concat([g_p, g_f], axis=1)

        if force_flow is not None:
            flow = Tensor(np.broadcast_to(force_flow, flow_raw.shape))
        else:
            flow = flow_activation(flow_raw, self.height, self.width)
        motion = warp_by_flow(x_prev, flow)
        if force_mask is not None:
            mask = Tensor(np.broadcast_to(force_mask, appearance.shape[:1] + (1,) + appearance.shape[2:]))
        else:
            mask = tc.sigmoid(self.mask_decoder(mask_in))
        frame = blend(appearance, motion, mask)
        return {'appearance': appearance, 'flow': flow, 'motion': motion,
                'mask': mask, 'frame': frame}

    def step(self, state, x_prev, target, noise):
        h_prev, feats_prev = self.encode_pixels(state, x_prev)
        conditioning = state['t'] < state['k']
        if conditioning:
            state['pixel_skip'] = feats_prev
        prior_p = self._prior(self.pixel_prior, state, 'pixel_prior', h_prev, self.latent_dim)
        kls = {}
        if target is not None:
            h_t, _ = self.encode_pixels(state, target)
            post_p, state['pixel_posterior'] = self.pixel_posterior(h_t, state['pixel_posterior'])
            z_p = noise.sample(post_p)
            kls['kl_pixel'] = self._kl(post_p, prior_p)
        else:
            z_p = noise.sample(prior_p)

        z_f = None
        if not self.baseline:
            post_f, prior_f = self.infer_flow_dists(state, state['prev_frame'], x_prev, target)
            if conditioning:
                state['motion_skip'] = state['motion_history'][1]
            if post_f is not None:
                z_f = noise.sample(post_f)
                kls['kl_flow'] = self._kl(post_f, prior_f)
            else:
                z_f = noise.sample(prior_f)

        outputs = self.predict_step(state, x_prev, z_p, z_f)
        outputs['z_pixel'] = z_p
        if z_f is not None:
            outputs['z_flow'] = z_f
        state['prev_frame'] = x_prev
        state['t'] += 1
        return outputs, kls

    def reconstruction_terms(self, outputs, target):
        return {
            'reconstruction_appearance': tc.tmean(tc.square(outputs['appearance'] - target)),
            'reconstruction_motion': tc.tmean(tc.square(outputs['motion'] - target)),
            'reconstruction_combined': tc.tmean(tc.square(outputs['frame'] - target)),
        }


def slamp_infer_flow_dists(model: SLAMPModel, state: dict, x_prevprev: Optional[Tensor],
                           x_prev: Tensor, x_t: Optional[Tensor]):
    return model.infer_flow_dists(state, x_prevprev, x_prev, x_t)


def slamp_predict_step(model: SLAMPModel, prev_frame: Tensor, state: dict, z_p: Tensor,
                       z_f: Optional[Tensor], force_mask=None, force_flow=None):
    """Returns (appearance, flow, motion, mask, frame)"""
    out = model.predict_step(state, prev_frame, z_p, z_f, force_mask, force_flow)
    return out['appearance'], out['flow'], out['motion'], out['mask'], out['frame']


# ============================================================================
# SLAMP-3D
# ============================================================================

class SLAMP3DModel(AutoregressiveModel):
    """Static (depth + pose) and dynamic (residual flow) latent chains"""

    min_length = 3
    min_conditioning = 2

    def __init__(self, channels: int, height: int, width: int, intrinsics: CameraIntrinsics,
                 rng: np.random.Generator, variant: str = 'conditional', latent_dim: int = 16,
                 base_channels: int = 8, kl_samples: int = 1, sigma2_min: float = 1e-6):
        if variant not in SLAMP3D_VARIANTS:
            raise InvalidInputError(f"Unknown SLAMP-3D variant: {variant}")
        if height % 4 or width % 4:
            raise ShapeError(f"Frame size {height}x{width} is not divisible by 4")
        super().__init__(channels, height, width)
        p = self.params
        self.kind = f'slamp3d-{variant}'
        self.variant = variant
        self.intrinsics = intrinsics
        self.kl_samples = kl_samples
        self.sigma2_min = sigma2_min
        base = base_channels
        enc = 2 * base
        z = latent_dim

        self.image_encoder = ConvEncoder(p, 'image_enc', channels, [base, enc], rng)
        self.depth_encoder = Conv2d(p, 'depth_enc', enc, enc, rng)
        self.pose_encoder = Conv2d(p, 'pose_enc', 2 * enc, enc, rng)
        self.static_posterior = GaussianConvLSTM(p, 'static_posterior', 2 * enc, enc, z, rng)
        self.static_prior = GaussianConvLSTM(p, 'static_prior', 2 * enc, enc, z, rng)
        self.static_predictor = FeatureConvLSTM(p, 'static_predictor', enc + z, enc, enc, rng)
        self.depth_decoder = ConvDecoder(p, 'depth_dec', enc, [base, 1], rng, skip_channels=[base, 0])
        self.pose_head = Conv2d(p, 'pose_head', enc, 6, rng)

        if variant != 'depthonly':
            dynamic_in = enc + z if variant == 'conditional' else enc
            self.motion_encoder = Conv2d(p, 'motion_enc', 2 * enc, enc, rng)
            self.dynamic_posterior = GaussianConvLSTM(p, 'dynamic_posterior', dynamic_in, enc, z, rng)
            self.dynamic_prior = GaussianConvLSTM(p, 'dynamic_prior', enc, enc, z, rng)
            self.dynamic_predictor = FeatureConvLSTM(p, 'dynamic_predictor', enc + z, enc, enc, rng)
            self.flow_decoder = ConvDecoder(p, 'flow_dec', enc, [base, 2], rng,
                                            skip_channels=[base, 0])
            self.mask_decoder = ConvDecoder(p, 'mask_dec', 2 * enc, [base, 1], rng,
                                            skip_channels=[base, 0])

    @property
    def has_dynamic(self) -> bool:
        return self.variant != 'depthonly'

    def encode(self, state: dict, x: Tensor):
        return _cached(state, 'frame_cache', (x,), lambda: self.image_encoder(x))

    def _ensure_cells(self, state: dict, e: Tensor) -> None:
        if state.get('static_posterior') is not None:
            return
        batch, _, h, w = e.shape
        state['static_posterior'] = self.static_posterior.zero_state(batch, h, w)
        state['static_prior'] = self.static_prior.zero_state(batch, h, w)
        state['static_predictor'] = self.static_predictor.zero_state(batch, h, w)
        if self.has_dynamic:
            state['dynamic_posterior'] = self.dynamic_posterior.zero_state(batch, h, w)
            state['dynamic_prior'] = self.dynamic_prior.zero_state(batch, h, w)
            state['dynamic_predictor'] = self.dynamic_predictor.zero_state(batch, h, w)

    def _pose_code(self, a: Tensor, b: Tensor) -> Tensor:
        return tc.leaky_relu(self.pose_encoder(tc.concat([a, b], axis=1)))

    def _depth_code(self, e: Tensor) -> Tensor:
        return tc.leaky_relu(self.depth_encoder(e))

    def _motion_code(self, g_static: Tensor, e: Tensor) -> Tensor:
        return tc.leaky_relu(self.motion_encoder(tc.concat([g_static, e], axis=1)))

    def static_step(self, state: dict, x_prev: Tensor, z_s: Tensor,
                    force_identity_pose: bool = False) -> Dict[str, Tensor]:
        """Static predictor: depth, pose and the rigidly warped previous frame"""
        e_prev, feats_prev = self.encode(state, x_prev)
        self._ensure_cells(state, e_prev)
        g_s, state['static_predictor'] = self.static_predictor(
            tc.concat([e_prev, z_s], axis=1), state['static_predictor'])
        depth = depth_activation(self.depth_decoder(g_s, [feats_prev[0], None]))
        if force_identity_pose:
            pose = tc.zeros((x_prev.shape[0], 6))
        else:
            pose = spatial_mean(self.pose_head(g_s)) * POSE_SCALE
        translation = pose[:, 0:3]
        rotation = pose[:, 3:6]
        static, rigid_flow, valid = warp_by_depth_pose(x_prev, depth, translation, rotation,
                                                       self.intrinsics)
        return {'g_static': g_s, 'depth': depth, 'pose': pose, 'static': static,
                'rigid_flow': rigid_flow, 'valid': Tensor(valid.astype(np.float64))}

    def dynamic_step(self, state: dict, x_prev: Tensor, static_out: Dict[str, Tensor],
                     z_d: Tensor, force_zero_residual: bool = False) -> Dict[str, Tensor]:
        """Dynamic predictor: residual flow applied to the static prediction, then blending"""
        e_prev, feats_prev = self.encode(state, x_prev)
        g_d, state['dynamic_predictor'] = self.dynamic_predictor(
            tc.concat([e_prev, z_d], axis=1), state['dynamic_predictor'])
        static = static_out['static']
        if force_zero_residual:
            residual = tc.zeros((static.shape[0], 2) + static.shape[2:])
        else:
            residual = flow_activation(self.flow_decoder(g_d, [feats_prev[0], None]),
                                       self.height, self.width)
        dynamic = compose_residual(static, residual)
        mask = tc.sigmoid(self.mask_decoder(tc.concat([static_out['g_static'], g_d], axis=1),
                                            [feats_prev[0], None]))
        frame = blend(static, dynamic, mask)
        return {'residual_flow': residual, 'dynamic': dynamic, 'mask': mask, 'frame': frame}

    def step(self, state, x_prev, target, noise):
        e_prev, _ = self.encode(state, x_prev)
        self._ensure_cells(state, e_prev)
        batch = float(e_prev.shape[0])
        first = state.get('prev_encoding') is None
        if first:
            self.trace.append(('zero_motion_prior', state['t'] + 1))

        # static prior from the previous depth code and the previous transition
        e_pp = e_prev if first else state['prev_encoding']
        prior_in = tc.concat([self._depth_code(e_prev), self._pose_code(e_pp, e_prev)], axis=1)
        prior_s, state['static_prior'] = self.static_prior(prior_in, state['static_prior'])

        kls = {}
        e_t = None
        if target is not None:
            e_t, _ = self.encode(state, target)
            post_in = tc.concat([self._depth_code(e_t), self._pose_code(e_prev, e_t)], axis=1)
            posterior_s, state['static_posterior'] = self.static_posterior(
                post_in, state['static_posterior'])
            z_s = noise.sample(posterior_s)
            kls['kl_static'] = kl_diag(posterior_s, prior_s) / batch
        else:
            z_s = noise.sample(prior_s)

        outputs = self.static_step(state, x_prev, z_s)
        outputs['z_static'] = z_s
        if not self.has_dynamic:
            outputs['frame'] = outputs['static']
        else:
            g_s = outputs['g_static']
            if first:
                history = self._motion_code(e_prev, e_prev)
            else:
                history = self._motion_code(state['prev_g_static'], e_prev)
            prior_d, state['dynamic_prior'] = self.dynamic_prior(history, state['dynamic_prior'])
            if e_t is not None:
                motion = self._motion_code(g_s, e_t)
                previous_cell = state['dynamic_posterior']
                post_in = tc.concat([motion, z_s], axis=1) if self.variant == 'conditional' else motion
                posterior_d, state['dynamic_posterior'] = self.dynamic_posterior(post_in, previous_cell)
                z_d = noise.sample(posterior_d)
                kl_d = kl_diag(posterior_d, prior_d) / batch
                if self.variant == 'conditional' and self.kl_samples > 1:
                    for _ in range(self.kl_samples - 1):
                        extra_in = tc.concat([motion, noise.sample(posterior_s)], axis=1)
                        extra_q, _ = self.dynamic_posterior(extra_in, previous_cell)
                        kl_d = kl_d + kl_diag(extra_q, prior_d) / batch
                    kl_d = kl_d / float(self.kl_samples)
                kls['kl_dynamic'] = kl_d
            else:
                z_d = noise.sample(prior_d)
            outputs.update(self.dynamic_step(state, x_prev, outputs, z_d))
            outputs['z_dynamic'] = z_d
            state['prev_g_static'] = g_s

        state['prev_encoding'] = e_prev
        state['t'] += 1
        return outputs, kls

    def reconstruction_terms(self, outputs, target):
        terms = {}
        batch = float(target.shape[0])
        nll, _ = sigma_vae_nll(outputs['frame'], target, self.sigma2_min)
        terms['nll_combined'] = nll / batch
        # depth-only: the combined frame is the static prediction
        if self.has_dynamic:
            nll, _ = sigma_vae_nll(outputs['static'], target, self.sigma2_min)
            terms['nll_static'] = nll / batch
            nll, _ = sigma_vae_nll(outputs['dynamic'], target, self.sigma2_min)
            terms['nll_dynamic'] = nll / batch
        return terms


def slamp3d_step(model: SLAMP3DModel, state: dict, prev_frame: Tensor, z_s: Tensor,
                 z_d: Optional[Tensor], force_identity_pose: bool = False,
                 force_zero_residual: bool = False):
    """
    One SLAMP-3D decoding step from given latents

    Returns:
        (depth, pose, static, residual_flow, dynamic, mask, frame); the
        dynamic entries are None for the depth-only variant
    """
    out = model.static_step(state, prev_frame, z_s, force_identity_pose)
    if not model.has_dynamic:
        return out['depth'], out['pose'], out['static'], None, None, None, out['static']
    dyn = model.dynamic_step(state, prev_frame, out, z_d, force_zero_residual)
    return (out['depth'], out['pose'], out['static'], dyn['residual_flow'], dyn['dynamic'],
            dyn['mask'], dyn['frame'])


# ============================================================================
# Rollout
# ============================================================================

def rollout(model: AutoregressiveModel, cond: np.ndarray, horizon: int, n_samples: int,
            rng: np.random.Generator, mode: str = 'prior',
            future: Optional[np.ndarray] = None) -> List[RolloutResult]:
    """
    Sample futures autoregressively

    Latents come from the posterior while conditioning frames are observed
    and from the prior afterwards ('posterior' mode keeps using the
    posterior on the ground-truth ``future``). After the conditioning window
    each step consumes the model's own previous prediction.

    Args:
        model: Autoregressive model
        cond: Conditioning frames [k, C, H, W]
        horizon: Number of frames to predict
        n_samples: Independent samples, each with a private noise stream
        rng: Parent generator
        mode: 'prior' or 'posterior'
        future: Ground-truth future [>= horizon, C, H, W] for 'posterior' mode

    Returns:
        One RolloutResult per sample
    """
    if horizon < 1:
        raise InvalidInputError("horizon must be at least 1")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    if mode not in ('prior', 'posterior'):
        raise InvalidInputError(f"Unknown rollout mode: {mode}")
    k = cond.shape[0]
    if k < model.min_conditioning:
        raise InvalidInputError(f"{model.kind} needs at least {model.min_conditioning} "
                                f"conditioning frames, got {k}")
    if mode == 'posterior' and (future is None or future.shape[0] < horizon):
        raise InvalidInputError("posterior rollout needs the ground-truth future")

    noise = NoiseSource(per_row=[child_rng(rng, f'sample/{i}') for i in range(n_samples)])

    def batch(frame: np.ndarray) -> Tensor:
        return Tensor(np.repeat(frame[None], n_samples, axis=0))

    observed = [batch(cond[t]) for t in range(k)]
    if mode == 'posterior':
        observed += [batch(future[t]) for t in range(horizon)]

    model.trace = []
    state = model.initial_state(observed[0], k)
    predicted: List[Dict[str, Tensor]] = []
    prev = observed[0]
    for t in range(1, k + horizon):
        target = observed[t] if t < len(observed) else None
        outputs, _ = model.step(state, prev, target, noise)
        model.trace.append(StepTrace(t, 'ground_truth' if t - 1 < k else 'prediction',
                                     'posterior' if target is not None else 'prior'))
        if t >= k:
            predicted.append(outputs)
        prev = observed[t] if t < k else outputs['frame']

    results = []
    for i in range(n_samples):
        frames = np.stack([out['frame'].data[i] for out in predicted])
        intermediates, latents = {}, {}
        for name in predicted[0]:
            if name == 'frame' or name.startswith('g_'):
                continue
            values = np.stack([out[name].data[i] for out in predicted])
            (latents if name.startswith('z') else intermediates)[name] = values
        results.append(RolloutResult(predictions=frames, intermediates=intermediates,
                                     latents=latents))
    return results
