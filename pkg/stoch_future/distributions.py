"""Diagonal Gaussians, KL divergences and likelihood terms"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.errors import ShapeError
from stoch_future.tensorcore import Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
SIGMA2_MIN = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    """Mean and log-variance of a factorized Gaussian"""
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"DiagGaussian mean {self.mean.shape} and log_var "
                             f"{self.log_var.shape} differ")

    @property
    def shape(self):
        return self.mean.shape

    @classmethod
    def from_params(cls, params: Tensor, axis: int = 1) -> 'DiagGaussian':
        """
        Split a network output into mean and clamped log-variance halves

        Args:
            params: Tensor whose ``axis`` extent is 2 * latent size
            axis: Axis holding [mean, log_var]
        """
        size = params.shape[axis]
        if size % 2:
            raise ShapeError(f"Gaussian parameter axis has odd extent {size}")
        half = size // 2
        lead = [slice(None)] * params.ndim
        tail = [slice(None)] * params.ndim
        lead[axis] = slice(0, half)
        tail[axis] = slice(half, size)
        return cls(params[tuple(lead)], tc.clamp(params[tuple(tail)], LOG_VAR_MIN, LOG_VAR_MAX))

    @classmethod
    def standard(cls, shape) -> 'DiagGaussian':
        return cls(tc.zeros(shape), tc.zeros(shape))

    def sample(self, rng: np.random.Generator) -> Tensor:
        """Reparameterized draw with fresh standard-normal noise"""
        return reparam_sample(self, Tensor(rng.standard_normal(self.mean.shape)))

    def detached(self) -> 'DiagGaussian':
        return DiagGaussian(Tensor(self.mean.data), Tensor(self.log_var.data))


class NoiseSource:
    """
    Standard-normal noise for reparameterized draws

    With ``per_row`` streams every batch row draws from its own generator,
    so a sample's noise does not depend on how many other samples share
    the batch.
    """

    def __init__(self, rng: Optional[np.random.Generator] = None,
                 per_row: Optional[Sequence[np.random.Generator]] = None):
        if rng is None and per_row is None:
            raise ValueError("NoiseSource needs a generator")
        self.rng = rng
        self.per_row = list(per_row) if per_row is not None else None

    def normal(self, shape: Tuple[int, ...]) -> np.ndarray:
        if self.per_row is None:
            return self.rng.standard_normal(shape)
        if shape[0] != len(self.per_row):
            raise ShapeError(f"noise batch {shape[0]} != {len(self.per_row)} sample streams")
        return np.stack([r.standard_normal(shape[1:]) for r in self.per_row])

    def sample(self, g: 'DiagGaussian') -> Tensor:
        return reparam_sample(g, Tensor(self.normal(g.shape)))


def reparam_sample(g: DiagGaussian, noise: Tensor) -> Tensor:
    """sample = mean + exp(log_var / 2) * noise"""
    noise = tc.as_tensor(noise)
    if noise.shape != g.mean.shape:
        raise ShapeError(f"noise shape {noise.shape} != mean shape {g.mean.shape}")
    return g.mean + tc.exp(g.log_var * 0.5) * noise


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """
    KL(q || p) summed over every element

    Returns:
        Scalar tensor, non-negative
    """
    if q.shape != p.shape:
        raise ShapeError(f"kl_diag shape mismatch: {q.shape} vs {p.shape}")
    diff = q.mean - p.mean
    terms = (tc.exp(q.log_var - p.log_var) + tc.square(diff) * tc.exp(-p.log_var)
             - 1.0 + p.log_var - q.log_var)
    return tc.tsum(terms) * 0.5


def kl_standard(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)) summed over every element"""
    terms = tc.exp(q.log_var) + tc.square(q.mean) - 1.0 - q.log_var
    return tc.tsum(terms) * 0.5


def gauss_log_prob(g: DiagGaussian, x: Tensor) -> Tensor:
    """Log density of ``x`` under ``g`` including the log(2 pi) constant"""
    x = tc.as_tensor(x)
    if x.shape != g.shape:
        raise ShapeError(f"gauss_log_prob shape mismatch: {x.shape} vs {g.shape}")
    terms = tc.square(x - g.mean) * tc.exp(-g.log_var) + g.log_var + LOG_2PI
    return tc.tsum(terms) * -0.5


def unit_gauss_nll(pred: Tensor, target: Tensor, include_constant: bool = False) -> Tensor:
    """
    Negative log-likelihood under N(pred, I)

    The log(2 pi) constant is dropped for training losses and kept when
    comparing bounds against likelihood estimates.
    """
    target = tc.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"unit_gauss_nll shape mismatch: {pred.shape} vs {target.shape}")
    nll = tc.tsum(tc.square(pred - target)) * 0.5
    if include_constant:
        nll = nll + 0.5 * LOG_2PI * pred.size
    return nll


def sigma_vae_nll(pred: Tensor, target: Tensor,
                  floor: float = SIGMA2_MIN) -> Tuple[Tensor, float]:
    """
    Gaussian NLL with the variance set to its optimum, the mean squared error

    loss = D/2 * (log var + mse / var) with var = max(mse, floor); the
    log(2 pi) constant is dropped.

    Returns:
        (scalar loss, calibrated variance)
    """
    target = tc.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"sigma_vae_nll shape mismatch: {pred.shape} vs {target.shape}")
    count = float(pred.size)
    mse = tc.tmean(tc.square(pred - target))
    var = tc.maximum(mse, floor)
    loss = (tc.log(var) + mse / var) * (count / 2.0)
    return loss, float(var.data)
