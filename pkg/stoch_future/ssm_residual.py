"""State-space stochastic prediction with residual latent dynamics

The latent state evolves on its own and is decoded independently per step:

    y_1     ~ q(y_1 | x_1..k)                 (prior N(0, I))
    z_t     ~ q(z_t | x_1..t)  or  p(z_t | y_{t-1})
    y_t     = y_{t-1} + dt * f(y_{t-1}, z_t)  (L Euler substeps)
    x_t     ~ N(g(y_t, w), I)

Model families:
    * SRVPModel: vector states, optional content vector w (sprites, ego, toy)
    * SRVPPlusModel: adds a motion decoder over consecutive states and a
      Direct or Mask combiner with the warped previous frame
    * StretchBEVModel: grid states on the downsampled BEV grid, one latent
      per grid cell, four label heads; variants 'base', 'p' (posterior reads
      the labels) and 'global' (a single latent per sequence)
"""

import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.distributions import (LOG_2PI, DiagGaussian, NoiseSource, kl_diag,
                                        kl_standard, unit_gauss_nll)
from stoch_future.errors import ConfigError, InvalidInputError, ShapeError
from stoch_future.instance_tracking import LABEL_CHANNELS, label_losses
from stoch_future.layers import MLP, Conv2d, ConvGRUCell, Linear, LSTMCell, ParamStore
from stoch_future.models import LossBreakdown, SSMRollout
from stoch_future.networks import (ConvDecoder, ConvEncoder, FrameDecoder, FrameEncoder,
                                   VectorCodec, broadcast_grid, spatial_mean)
from stoch_future.rng import child_rng
from stoch_future.synthworlds import BEV_CHANNELS
from stoch_future.tensorcore import Tensor
from stoch_future.warpgeom import blend, flow_activation, warp_by_flow

SRVPPLUS_VARIANTS = ('direct', 'mask')
STRETCHBEV_VARIANTS = ('base', 'p', 'global')


def residual_step(y: Tensor, z: Tensor, f: Callable[[Tensor, Tensor], Tensor],
                  dt: float = 1.0, substeps: int = 1) -> Tensor:
    """
    Advance a state with L explicit Euler substeps of size dt / L

    Args:
        y: Current state
        z: Latent for the next step, held fixed across substeps
        f: Residual network f(y, z) with output shaped like ``y``
        dt: Step size
        substeps: Number of substeps L

    Returns:
        Next state
    """
    if substeps < 1:
        raise InvalidInputError(f"substeps must be at least 1, got {substeps}")
    h = dt / substeps
    for _ in range(substeps):
        delta = f(y, z)
        if delta.shape != y.shape:
            raise ShapeError(f"residual output {delta.shape} does not match state {y.shape}")
        y = y + delta * h
    return y


class StateSpaceModel:
    """Shared inference and generation skeleton of the SSM families"""

    kind = ''
    uses_labels = False
    global_latent = False

    def __init__(self, k: int, dt: float = 1.0, substeps: int = 1, use_content: bool = False):
        if k < 1:
            raise InvalidInputError(f"k must be at least 1, got {k}")
        self.params = ParamStore()
        self.k = k
        self.dt = dt
        self.substeps = substeps
        self.use_content = use_content

    # per-family pieces
    def encode(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def y1_dist(self, encodings: List[Tensor]) -> DiagGaussian:
        raise NotImplementedError

    def residual(self, y: Tensor, z: Tensor) -> Tensor:
        raise NotImplementedError

    def prior(self, y: Tensor) -> DiagGaussian:
        raise NotImplementedError

    def posterior_init(self, e: Tensor):
        raise NotImplementedError

    def posterior(self, e: Tensor, label_code: Optional[Tensor], state) -> Tuple[DiagGaussian, object]:
        raise NotImplementedError

    def content(self, encodings: List[Tensor]) -> Optional[Tensor]:
        return None

    def decode(self, y: Tensor, w: Optional[Tensor]) -> Tensor:
        raise NotImplementedError

    def check_frames(self, frames: np.ndarray) -> None:
        raise NotImplementedError

    def reconstruction_terms(self, y_prev: Optional[Tensor], y: Tensor, w: Optional[Tensor],
                             prev_frame: Optional[Tensor], target: Tensor) -> Dict[str, Tensor]:
        batch = float(target.shape[0])
        return {'nll_state': unit_gauss_nll(decode_state(self, y, w), target) / batch}


# ============================================================================
# Operations shared by every family
# ============================================================================

def prior_from_state(model: StateSpaceModel, y: Tensor) -> DiagGaussian:
    """Learned prior over the next latent given the current state"""
    return model.prior(y)


def posterior_step(model: StateSpaceModel, encoding: Tensor, label_encoding: Optional[Tensor],
                   state) -> Tuple[DiagGaussian, object]:
    """
    Advance the posterior recurrence by one observation

    Models without label input ignore ``label_encoding`` entirely.

    Returns:
        (posterior over z_t, new recurrent state)
    """
    if not model.uses_labels:
        label_encoding = None
    elif label_encoding is None:
        raise InvalidInputError(f"{model.kind} posterior needs the label stream")
    elif label_encoding.shape[0] != encoding.shape[0] or \
            label_encoding.shape[2:] != encoding.shape[2:]:
        raise ShapeError(f"label stream {label_encoding.shape} is not aligned with "
                         f"state stream {encoding.shape}")
    return model.posterior(encoding, label_encoding, state)


def infer_y1(model: StateSpaceModel, encodings: List[Tensor]) -> DiagGaussian:
    """Initial-state posterior from the first k encodings; later ones are ignored"""
    if len(encodings) < model.k:
        raise InvalidInputError(f"infer_y1 needs {model.k} encodings, got {len(encodings)}")
    return model.y1_dist(list(encodings[:model.k]))


def decode_state(model: StateSpaceModel, y: Tensor, w: Optional[Tensor] = None) -> Tensor:
    """Decode one state (plus content) into a frame or BEV state"""
    if model.use_content and w is None:
        raise InvalidInputError(f"{model.kind} decoding needs the content vector")
    return model.decode(y, w if model.use_content else None)


def ssm_elbo(model: StateSpaceModel, frames: np.ndarray, rng: np.random.Generator,
             labels: Optional[np.ndarray] = None, pretrain: bool = False,
             label_weights: Optional[Dict[str, float]] = None) -> LossBreakdown:
    """
    Negative evidence lower bound of a batch

    Terms: state reconstruction NLL, KL of the initial state against
    N(0, I), per-step latent KLs against the learned prior and, for
    StretchBEV with labels, the supervised label loss (exactly 0 while
    pre-training). Likelihood and KL terms are divided by the batch size;
    label losses are already batch means.

    Args:
        model: State-space model
        frames: [B, T, ...] observations
        rng: Noise stream
        labels: [B, T, 7, H, W] label stacks for StretchBEV
        pretrain: Drop the label loss (and hide labels from the posterior)
        label_weights: Weights for the label losses

    Returns:
        LossBreakdown
    """
    model.check_frames(frames)
    batch, length = frames.shape[:2]
    if length < model.k + 1:
        raise InvalidInputError(f"{model.kind} needs at least k + 1 = {model.k + 1} frames, "
                                f"got {length}")
    has_label_heads = isinstance(model, StretchBEVModel)
    if has_label_heads and labels is not None and labels.shape[:2] != (batch, length):
        raise ShapeError(f"labels {labels.shape} are not aligned with frames {frames.shape}")
    noise = NoiseSource(rng)
    b = float(batch)
    xs = [Tensor(frames[:, t]) for t in range(length)]
    encodings = [model.encode(x) for x in xs]
    label_codes = _label_codes(model, labels, length, pretrain)

    q_y1 = infer_y1(model, encodings)
    kl_y1 = kl_standard(q_y1) / b
    y = noise.sample(q_y1)
    w = model.content(encodings) if model.use_content else None

    kl_z = None
    z_global = None
    if model.global_latent:
        q_g = model.global_posterior(encodings)
        p_g = model.global_prior(y)
        z_global = noise.sample(q_g)
        kl_z = kl_diag(q_g, p_g) / b

    terms: Dict[str, Tensor] = {}
    label_parts: Dict[str, float] = {}

    def add(name: str, value: Tensor):
        terms[name] = value if name not in terms else terms[name] + value

    post_state = model.posterior_init(encodings[0])
    if not model.global_latent:
        _, post_state = posterior_step(model, encodings[0], label_codes[0], post_state)
    y_prev = None
    for t in range(length):
        if t > 0:
            if model.global_latent:
                z = model.broadcast_latent(z_global)
            else:
                q_z, post_state = posterior_step(model, encodings[t], label_codes[t], post_state)
                z = noise.sample(q_z)
                kl = kl_diag(q_z, prior_from_state(model, y)) / b
                kl_z = kl if kl_z is None else kl_z + kl
            y_prev, y = y, residual_step(y, z, model.residual, model.dt, model.substeps)
        prev_frame = xs[t - 1] if t > 0 else None
        for name, value in model.reconstruction_terms(y_prev, y, w, prev_frame, xs[t]).items():
            add(name, value)
        if has_label_heads and labels is not None and not pretrain:
            heads = decode_labels(model, decode_state(model, y))
            parts = label_losses(heads, labels[:, t], label_weights)
            for name, value in parts.items():
                label_parts[f'label_{name}'] = label_parts.get(f'label_{name}', 0.0) + value.item()
                add('label', value)

    terms['kl_y1'] = kl_y1
    terms['kl_z'] = kl_z
    if has_label_heads and 'label' not in terms:
        terms['label'] = Tensor(0.0)
    return LossBreakdown.from_terms(terms, label_parts)


def _label_codes(model: StateSpaceModel, labels: Optional[np.ndarray], length: int,
                 pretrain: bool) -> List[Optional[Tensor]]:
    if not model.uses_labels:
        return [None] * length
    if labels is None:
        raise InvalidInputError(f"{model.kind} needs label stacks")
    codes = []
    for t in range(length):
        stack = np.zeros_like(labels[:, t]) if pretrain else labels[:, t]
        codes.append(model.encode_labels(Tensor(stack)))
    return codes


def ssm_rollout(model: StateSpaceModel, cond: np.ndarray, horizon: int, n_samples: int,
                rng: np.random.Generator, labels: Optional[np.ndarray] = None) -> List[SSMRollout]:
    """
    Sample futures from the conditioning window

    Latents come from the posterior for the k conditioning steps and from
    the learned prior afterwards. Decoded frames never feed back into the
    state chain; only SRVP++ warps its own previous prediction.

    Args:
        model: State-space model
        cond: [k, ...] conditioning observations
        horizon: Frames to predict
        n_samples: Samples, each with a private noise stream
        rng: Parent generator
        labels: [k, 7, H, W] conditioning labels for StretchBEV-P

    Returns:
        One SSMRollout per sample; BEV models also carry decoded label heads
    """
    if horizon < 1:
        raise InvalidInputError("horizon must be at least 1")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    k = model.k
    if cond.shape[0] < k:
        raise InvalidInputError(f"{model.kind} needs {k} conditioning frames, got {cond.shape[0]}")
    cond = cond[:k]
    model.check_frames(cond[None])
    noise = NoiseSource(per_row=[child_rng(rng, f'sample/{i}') for i in range(n_samples)])

    def batched(array: np.ndarray) -> Tensor:
        return Tensor(np.repeat(array[None], n_samples, axis=0))

    xs = [batched(cond[t]) for t in range(k)]
    encodings = [model.encode(x) for x in xs]
    label_codes: List[Optional[Tensor]] = [None] * k
    if model.uses_labels:
        if labels is None or labels.shape[0] < k:
            raise InvalidInputError(f"{model.kind} rollout needs {k} conditioning label stacks")
        label_codes = [model.encode_labels(batched(labels[t])) for t in range(k)]

    y = noise.sample(infer_y1(model, encodings))
    w = model.content(encodings) if model.use_content else None
    z_global = None
    if model.global_latent:
        z_global = model.broadcast_latent(noise.sample(model.global_prior(y)))
    else:
        post_state = model.posterior_init(encodings[0])
        _, post_state = posterior_step(model, encodings[0], label_codes[0], post_state)

    states = []
    latents = []
    for t in range(1, k + horizon):
        if model.global_latent:
            z = z_global
        elif t < k:
            q_z, post_state = posterior_step(model, encodings[t], label_codes[t], post_state)
            z = noise.sample(q_z)
        else:
            z = noise.sample(prior_from_state(model, y))
        y_prev, y = y, residual_step(y, z, model.residual, model.dt, model.substeps)
        if t >= k:
            states.append((y_prev, y))
            latents.append(z.data)

    frames, intermediates = [], {}
    prev_frame = xs[-1]
    for y_prev, y in states:
        out = model.generate_frame(y_prev, y, w, prev_frame)
        frames.append(out['frame'].data)
        for name, value in out.items():
            if name != 'frame':
                intermediates.setdefault(name, []).append(value.data)
        prev_frame = out['frame']

    results = []
    for i in range(n_samples):
        label_heads = None
        if isinstance(model, StretchBEVModel):
            label_heads = {name: np.stack([v[i] for v in values])
                           for name, values in intermediates.items() if name.startswith('label_')}
        results.append(SSMRollout(
            predictions=np.stack([f[i] for f in frames]),
            intermediates={name: np.stack([v[i] for v in values])
                           for name, values in intermediates.items()
                           if not name.startswith('label_')},
            latents={'z': np.stack([z[i] for z in latents])},
            labels=label_heads,
            states=np.stack([s[1].data[i] for s in states]),
        ))
    return results


# ============================================================================
# SRVP
# ============================================================================

class SRVPModel(StateSpaceModel):
    """Vector-state model over image frames or toy observation vectors"""

    kind = 'srvp'

    def __init__(self, frame_shape: Tuple[int, ...], k: int, rng: np.random.Generator,
                 state_dim: int = 32, latent_dim: int = 16, hidden_dim: int = 64,
                 feature_dim: int = 64, base_channels: int = 8, dt: float = 1.0,
                 substeps: int = 1, use_content: bool = True):
        super().__init__(k, dt, substeps, use_content)
        p = self.params
        self.frame_shape = tuple(frame_shape)
        self.state_dim = state_dim
        self.latent_dim = latent_dim
        self.vector = len(self.frame_shape) == 1
        content_dim = feature_dim if use_content else 0
        if self.vector:
            self.codec = VectorCodec(p, 'codec', self.frame_shape[0], feature_dim, hidden_dim, rng,
                                     decoder_in=state_dim + content_dim)
        else:
            channels, height, width = self.frame_shape
            self.encoder = FrameEncoder(p, 'frame_enc', channels, height, width, feature_dim,
                                        base_channels, rng)
            self.decoder = FrameDecoder(p, 'frame_dec', state_dim + content_dim, channels,
                                        self.encoder, rng, use_skips=False)
        self.y1_net = MLP(p, 'y1', [k * feature_dim, hidden_dim, 2 * state_dim], rng)
        self.residual_net = MLP(p, 'residual', [state_dim + latent_dim, hidden_dim, state_dim], rng)
        self.prior_net = MLP(p, 'prior', [state_dim, hidden_dim, 2 * latent_dim], rng)
        self.posterior_cell = LSTMCell(p, 'posterior.lstm', feature_dim, hidden_dim, rng)
        self.posterior_head = Linear(p, 'posterior.head', hidden_dim, 2 * latent_dim, rng)
        if use_content:
            self.content_net = MLP(p, 'content', [feature_dim, hidden_dim, feature_dim], rng)

    def check_frames(self, frames: np.ndarray) -> None:
        if frames.ndim != 2 + len(self.frame_shape) or frames.shape[2:] != self.frame_shape:
            raise ShapeError(f"{self.kind} expects frames [B, T, "
                             f"{', '.join(map(str, self.frame_shape))}], got {frames.shape}")

    def encode(self, x):
        if self.vector:
            return self.codec.encode(x)
        return self.encoder(x)[0]

    def y1_dist(self, encodings):
        return DiagGaussian.from_params(self.y1_net(tc.concat(encodings, axis=1)))

    def residual(self, y, z):
        return self.residual_net(tc.concat([y, z], axis=1))

    def prior(self, y):
        return DiagGaussian.from_params(self.prior_net(y))

    def posterior_init(self, e):
        return self.posterior_cell.zero_state(e.shape[0])

    def posterior(self, e, label_code, state):
        state = self.posterior_cell(e, state)
        return DiagGaussian.from_params(self.posterior_head(state[0])), state

    def content(self, encodings):
        """Mean of per-frame content codes over the first k frames"""
        codes = [self.content_net(e) for e in encodings[:self.k]]
        total = codes[0]
        for code in codes[1:]:
            total = total + code
        return tc.tanh(total / float(len(codes)))

    def decode(self, y, w):
        h = tc.concat([y, w], axis=1) if w is not None else y
        if self.vector:
            return self.codec.decode(h)
        return tc.sigmoid(self.decoder(h))

    def generate_frame(self, y_prev, y, w, prev_frame) -> Dict[str, Tensor]:
        return {'frame': decode_state(self, y, w)}


class SRVPPlusModel(SRVPModel):
    """SRVP with a flow decoder over consecutive states and a frame combiner"""

    def __init__(self, frame_shape: Tuple[int, ...], k: int, rng: np.random.Generator,
                 variant: str = 'mask', **kwargs):
        if variant not in SRVPPLUS_VARIANTS:
            raise InvalidInputError(f"Unknown SRVP++ variant: {variant}")
        if len(frame_shape) != 3:
            raise ShapeError("SRVP++ needs image frames")
        super().__init__(frame_shape, k, rng, **kwargs)
        self.kind = f'srvp++-{variant}'
        self.variant = variant
        p = self.params
        channels = self.frame_shape[0]
        content_dim = self.content_net.layers[-1].out_features if self.use_content else 0
        motion_in = 2 * self.state_dim + content_dim
        self.motion_decoder = FrameDecoder(p, 'motion_dec', motion_in, 2, self.encoder, rng,
                                           use_skips=False)
        if variant == 'mask':
            self.mask_decoder = FrameDecoder(p, 'mask_dec', motion_in, 1, self.encoder, rng,
                                             use_skips=False)
        else:
            self.combiner = Conv2d(p, 'combiner', 2 * channels, channels, rng)

    def motion_step(self, y_prev: Tensor, y: Tensor, w: Optional[Tensor],
                    prev_frame: Tensor, appearance: Tensor) -> Dict[str, Tensor]:
        parts = [y_prev, y] + ([w] if self.use_content else [])
        h = tc.concat(parts, axis=1)
        _, height, width = self.frame_shape
        flow = flow_activation(self.motion_decoder(h), height, width)
        warped = warp_by_flow(prev_frame, flow)
        out = {'appearance': appearance, 'flow': flow, 'motion': warped}
        if self.variant == 'mask':
            mask = tc.sigmoid(self.mask_decoder(h))
            out['mask'] = mask
            out['frame'] = blend(appearance, warped, mask)
        else:
            out['frame'] = tc.sigmoid(self.combiner(tc.concat([appearance, warped], axis=1)))
        return out

    def generate_frame(self, y_prev, y, w, prev_frame):
        return self.motion_step(y_prev, y, w, prev_frame, decode_state(self, y, w))

    def reconstruction_terms(self, y_prev, y, w, prev_frame, target):
        batch = float(target.shape[0])
        appearance = decode_state(self, y, w)
        terms = {'nll_appearance': unit_gauss_nll(appearance, target) / batch}
        if prev_frame is not None:
            out = self.motion_step(y_prev, y, w, prev_frame, appearance)
            terms['nll_combined'] = unit_gauss_nll(out['frame'], target) / batch
        return terms


def srvpplus_motion_step(model: SRVPPlusModel, y_prev: Tensor, y: Tensor, w: Optional[Tensor],
                         prev_frame: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (flow, warped previous frame, combined frame)"""
    out = model.motion_step(y_prev, y, w, prev_frame, decode_state(model, y, w))
    return out['flow'], out['motion'], out['frame']


# ============================================================================
# StretchBEV
# ============================================================================

class StretchBEVModel(StateSpaceModel):
    """Grid-state model on BEV inputs with label heads"""

    def __init__(self, size: int, k: int, rng: np.random.Generator, variant: str = 'base',
                 state_channels: int = 32, latent_channels: int = 8, base_channels: int = 8,
                 label_channels: int = 16, dt: float = 1.0, substeps: int = 1,
                 use_content: bool = False, in_channels: int = BEV_CHANNELS):
        if use_content:
            raise ConfigError("StretchBEV models do not take a content network")
        if variant not in STRETCHBEV_VARIANTS:
            raise InvalidInputError(f"Unknown StretchBEV variant: {variant}")
        if size % 4:
            raise ShapeError(f"BEV grid size {size} is not divisible by 4")
        super().__init__(k, dt, substeps, use_content=False)
        p = self.params
        self.kind = {'base': 'stretchbev', 'p': 'stretchbev-p', 'global': 'stretchbev-global'}[variant]
        self.variant = variant
        self.uses_labels = variant == 'p'
        self.global_latent = variant == 'global'
        self.size = size
        self.in_channels = in_channels
        self.grid = size // 4
        self.state_channels = state_channels
        self.latent_channels = latent_channels
        c, zc, wide = state_channels, latent_channels, 2 * base_channels

        self.encoder = ConvEncoder(p, 'state_enc', in_channels, [wide, c], rng)
        self.y1_conv = Conv2d(p, 'y1.conv', k * c, c, rng)
        self.y1_head = Conv2d(p, 'y1.head', c, 2 * c, rng)
        self.residual_in = Conv2d(p, 'residual.conv0', c + zc, c, rng)
        self.residual_out = Conv2d(p, 'residual.conv1', c, c, rng)
        self.prior_conv = Conv2d(p, 'prior.conv', c, c, rng)
        self.prior_head = Conv2d(p, 'prior.head', c, 2 * zc, rng)
        posterior_in = c + (label_channels if self.uses_labels else 0)
        self.posterior_cell = ConvGRUCell(p, 'posterior.gru', posterior_in, c, rng)
        self.posterior_conv = Conv2d(p, 'posterior.conv', c, c, rng)
        self.posterior_head = Conv2d(p, 'posterior.head', c, 2 * zc, rng)
        if self.uses_labels:
            self.label_encoder = ConvEncoder(p, 'label_enc', LABEL_CHANNELS,
                                             [wide, label_channels], rng)
        if self.global_latent:
            self.global_posterior_head = Linear(p, 'global.posterior', c, 2 * zc, rng)
            self.global_prior_head = Linear(p, 'global.prior', c, 2 * zc, rng)
        self.decoder = ConvDecoder(p, 'state_dec', c, [wide, in_channels], rng)
        self.label_trunk = [Conv2d(p, 'labels.conv0', in_channels, wide, rng),
                            Conv2d(p, 'labels.conv1', wide, wide, rng)]
        self.label_out = Conv2d(p, 'labels.out', wide, LABEL_CHANNELS, rng)

    def check_frames(self, frames: np.ndarray) -> None:
        expected = (self.in_channels, self.size, self.size)
        if frames.ndim != 5 or frames.shape[2:] != expected:
            raise ShapeError(f"{self.kind} expects states [B, T, {self.in_channels}, "
                             f"{self.size}, {self.size}], got {frames.shape}")

    def encode(self, x):
        return self.encoder(x)[0]

    def encode_labels(self, stack: Tensor) -> Tensor:
        return self.label_encoder(stack)[0]

    def y1_dist(self, encodings):
        hidden = tc.leaky_relu(self.y1_conv(tc.concat(encodings, axis=1)))
        return DiagGaussian.from_params(self.y1_head(hidden))

    def residual(self, y, z):
        hidden = tc.leaky_relu(self.residual_in(tc.concat([y, z], axis=1)))
        return self.residual_out(hidden)

    def prior(self, y):
        return DiagGaussian.from_params(self.prior_head(tc.leaky_relu(self.prior_conv(y))))

    def posterior_init(self, e):
        return self.posterior_cell.zero_state(e.shape[0], e.shape[2], e.shape[3])

    def posterior(self, e, label_code, state):
        x = tc.concat([e, label_code], axis=1) if label_code is not None else e
        state = self.posterior_cell(x, state)
        hidden = tc.leaky_relu(self.posterior_conv(state))
        return DiagGaussian.from_params(self.posterior_head(hidden)), state

    def global_posterior(self, encodings: List[Tensor]) -> DiagGaussian:
        """One latent vector from all observed encodings"""
        total = encodings[0]
        for e in encodings[1:]:
            total = total + e
        pooled = spatial_mean(total / float(len(encodings)))
        return DiagGaussian.from_params(self.global_posterior_head(pooled))

    def global_prior(self, y1: Tensor) -> DiagGaussian:
        return DiagGaussian.from_params(self.global_prior_head(spatial_mean(y1)))

    def broadcast_latent(self, z: Tensor) -> Tensor:
        return broadcast_grid(z, self.grid, self.grid)

    def decode(self, y, w):
        return tc.sigmoid(self.decoder(y))

    def label_heads(self, s_hat: Tensor) -> Dict[str, Tensor]:
        x = s_hat
        for conv in self.label_trunk:
            x = tc.leaky_relu(conv(x))
        out = self.label_out(x)
        return {
            'segmentation': out[:, 0:2],
            'center': tc.sigmoid(out[:, 2:3]),
            'offset': out[:, 3:5],
            'flow': out[:, 5:7],
        }

    def generate_frame(self, y_prev, y, w, prev_frame):
        s_hat = decode_state(self, y)
        heads = decode_labels(self, s_hat)
        out = {'frame': s_hat}
        out.update({f'label_{name}': value for name, value in heads.items()})
        return out


def decode_labels(model: StretchBEVModel, s_hat: Tensor) -> Dict[str, Tensor]:
    """
    Label heads from a decoded BEV state

    Returns:
        'segmentation' logits [B, 2, H, W], 'center' heatmap [B, 1, H, W],
        'offset' [B, 2, H, W], 'flow' [B, 2, H, W]
    """
    return model.label_heads(tc.as_tensor(s_hat))


# ============================================================================
# Likelihood bounds
# ============================================================================

def _row_log_prob(g: DiagGaussian, x: np.ndarray) -> np.ndarray:
    """Per-row log density (rows = leading axis)"""
    mean, log_var = g.mean.data, g.log_var.data
    terms = (x - mean) ** 2 * np.exp(-log_var) + log_var + LOG_2PI
    return -0.5 * terms.reshape(terms.shape[0], -1).sum(axis=1)


def _row_unit_log_lik(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = (pred - target).reshape(pred.shape[0], -1)
    return -0.5 * (diff ** 2).sum(axis=1) - 0.5 * LOG_2PI * diff.shape[1]


def elbo_and_iwae(model: StateSpaceModel, sequence: np.ndarray, n_samples: int,
                  rng: np.random.Generator) -> Tuple[float, float]:
    """
    Evidence lower bound and importance-weighted log-likelihood estimate

    Each of ``n_samples`` posterior draws gives a log-weight
    log p(x, y_1, z) - log q(y_1, z | x) including the Gaussian constants.
    The ELBO estimate is their mean and the importance-weighted estimate
    is log-mean-exp, so ELBO <= IWAE holds for every draw set.

    Args:
        model: Vector- or grid-state model without label input
        sequence: One sequence [T, ...]
        n_samples: Number of posterior draws
        rng: Noise stream

    Returns:
        (elbo, iwae) in nats
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    if model.uses_labels or model.global_latent:
        raise InvalidInputError(f"{model.kind} does not support likelihood bounds")
    frames = np.repeat(sequence[None], n_samples, axis=0)
    model.check_frames(frames)
    noise = NoiseSource(rng)
    length = frames.shape[1]
    encodings = [model.encode(Tensor(frames[:, t])) for t in range(length)]
    w = model.content(encodings) if model.use_content else None

    q_y1 = infer_y1(model, encodings)
    y = noise.sample(q_y1)
    standard = DiagGaussian.standard(y.shape)
    log_w = _row_log_prob(standard, y.data) - _row_log_prob(q_y1, y.data)

    post_state = model.posterior_init(encodings[0])
    _, post_state = posterior_step(model, encodings[0], None, post_state)
    for t in range(length):
        if t > 0:
            q_z, post_state = posterior_step(model, encodings[t], None, post_state)
            z = noise.sample(q_z)
            p_z = prior_from_state(model, y)
            log_w += _row_log_prob(p_z, z.data) - _row_log_prob(q_z, z.data)
            y = residual_step(y, z, model.residual, model.dt, model.substeps)
        log_w += _row_unit_log_lik(decode_state(model, y, w).data, frames[:, t])

    log_w = log_w.astype(np.float64)
    peak = float(log_w.max())
    iwae = peak + math.log(float(np.mean(np.exp(log_w - peak))))
    return float(np.mean(log_w)), iwae
