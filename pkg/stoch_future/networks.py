"""Convolutional encoders and decoders shared by the model families

Encoders are stacks of stride-2 3x3 convolutions; decoders mirror them with
nearest-neighbour upsampling followed by a 3x3 convolution, optionally
concatenating encoder features of the same resolution (skip connections).
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.errors import ShapeError
from stoch_future.layers import MLP, Conv2d, Linear, ParamStore
from stoch_future.tensorcore import Tensor


def stage_channels(base: int, stages: int) -> List[int]:
    """Channel schedule base, 2*base, 4*base, 4*base, ..."""
    return [base * min(2 ** i, 4) for i in range(stages)]


def decoder_skips(encoder_skips: Sequence[Tensor]) -> List[Optional[Tensor]]:
    """Reorder encoder features (fine to coarse) for a mirrored decoder"""
    return list(reversed(list(encoder_skips[:-1]))) + [None]


class ConvEncoder:
    """Stride-2 convolution stages with leaky-ReLU"""

    def __init__(self, store: ParamStore, name: str, in_channels: int,
                 channels: Sequence[int], rng: np.random.Generator):
        self.channels = list(channels)
        self.convs = []
        previous = in_channels
        for i, width in enumerate(self.channels):
            self.convs.append(Conv2d(store, f'{name}.conv{i}', previous, width, rng,
                                     kernel_size=3, stride=2, padding=1))
            previous = width

    def __call__(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """
        Returns:
            (coarsest feature map, per-stage features from fine to coarse)
        """
        features = []
        for conv in self.convs:
            x = tc.leaky_relu(conv(x))
            features.append(x)
        return x, features


class ConvDecoder:
    """Mirror of ConvEncoder; the last stage is linear"""

    def __init__(self, store: ParamStore, name: str, in_channels: int,
                 channels: Sequence[int], rng: np.random.Generator,
                 skip_channels: Optional[Sequence[int]] = None):
        """
        Args:
            store: Parameter store
            name: Parameter prefix
            in_channels: Channels of the coarse input
            channels: Output channels per stage, coarse to fine
            rng: Initialisation stream
            skip_channels: Channels concatenated after each upsampling (0 for none)
        """
        self.skip_channels = list(skip_channels or [0] * len(channels))
        if len(self.skip_channels) != len(channels):
            raise ShapeError("skip_channels must have one entry per decoder stage")
        self.convs = []
        previous = in_channels
        for i, width in enumerate(channels):
            self.convs.append(Conv2d(store, f'{name}.conv{i}',
                                     previous + self.skip_channels[i], width, rng))
            previous = width

    def __call__(self, x: Tensor, skips: Optional[Sequence[Optional[Tensor]]] = None) -> Tensor:
        skips = list(skips) if skips is not None else [None] * len(self.convs)
        for i, conv in enumerate(self.convs):
            x = tc.upsample2x(x)
            if self.skip_channels[i]:
                if skips[i] is None:
                    raise ShapeError(f"decoder stage {i} expects a skip input")
                x = tc.concat([x, skips[i]], axis=1)
            x = conv(x)
            if i < len(self.convs) - 1:
                x = tc.leaky_relu(x)
        return x


class FrameEncoder:
    """Image to feature vector: ConvEncoder, flatten, Linear, tanh"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, height: int, width: int,
                 out_dim: int, base_channels: int, rng: np.random.Generator, stages: int = 4):
        if height % (2 ** stages) or width % (2 ** stages):
            raise ShapeError(f"Frame size {height}x{width} is not divisible by {2 ** stages}")
        self.conv = ConvEncoder(store, f'{name}.enc', in_channels,
                                stage_channels(base_channels, stages), rng)
        self.grid = (self.conv.channels[-1], height >> stages, width >> stages)
        flat = int(np.prod(self.grid))
        self.fc = Linear(store, f'{name}.fc', flat, out_dim, rng)
        self.out_dim = out_dim

    @property
    def skip_channels(self) -> List[int]:
        return self.conv.channels

    def __call__(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        coarse, features = self.conv(x)
        flat = tc.reshape(coarse, (coarse.shape[0], -1))
        return tc.tanh(self.fc(flat)), features


class FrameDecoder:
    """Feature vector to image, mirroring FrameEncoder with optional skips"""

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_channels: int,
                 encoder: FrameEncoder, rng: np.random.Generator, use_skips: bool = True):
        self.grid = encoder.grid
        self.fc = Linear(store, f'{name}.fc', in_dim, int(np.prod(self.grid)), rng)
        enc_channels = encoder.skip_channels
        stages = len(enc_channels)
        out_widths = list(reversed(enc_channels[:-1])) + [out_channels]
        skip_widths = (list(reversed(enc_channels[:-1])) + [0]) if use_skips else [0] * stages
        self.conv = ConvDecoder(store, f'{name}.dec', enc_channels[-1], out_widths, rng,
                                skip_channels=skip_widths)
        self.use_skips = use_skips

    def __call__(self, g: Tensor, encoder_features: Optional[Sequence[Tensor]] = None) -> Tensor:
        batch = g.shape[0]
        x = tc.reshape(tc.leaky_relu(self.fc(g)), (batch,) + self.grid)
        skips = decoder_skips(encoder_features) if self.use_skips else None
        return self.conv(x, skips)


class VectorCodec:
    """MLP encoder/decoder pair for vector-valued observations"""

    def __init__(self, store: ParamStore, name: str, observation_dim: int, feature_dim: int,
                 hidden_dim: int, rng: np.random.Generator, decoder_in: Optional[int] = None):
        self.encoder = MLP(store, f'{name}.enc', [observation_dim, hidden_dim, feature_dim], rng)
        self.decoder = MLP(store, f'{name}.dec',
                           [decoder_in or feature_dim, hidden_dim, observation_dim], rng)

    def encode(self, x: Tensor) -> Tensor:
        return tc.tanh(self.encoder(x))

    def decode(self, h: Tensor) -> Tensor:
        return self.decoder(h)


def spatial_mean(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C]"""
    return tc.tmean(x, axis=(2, 3))


def broadcast_grid(v: Tensor, height: int, width: int) -> Tensor:
    """[B, C] -> [B, C, H, W]"""
    batch, channels = v.shape
    return tc.broadcast_to(tc.reshape(v, (batch, channels, 1, 1)), (batch, channels, height, width))
