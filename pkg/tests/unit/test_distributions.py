"""Unit tests for Gaussian helpers and likelihood terms"""

import math

import numpy as np
import pytest

from stoch_future import tensorcore as tc
from stoch_future.distributions import (LOG_VAR_MAX, DiagGaussian, NoiseSource, gauss_log_prob,
                                        kl_diag, kl_standard, reparam_sample, sigma_vae_nll,
                                        unit_gauss_nll)
from stoch_future.errors import ShapeError
from stoch_future.rng import make_rng
from stoch_future.tensorcore import Tensor


def _gaussian(mean, log_var):
    return DiagGaussian(Tensor(np.asarray(mean, dtype=float)), Tensor(np.asarray(log_var, dtype=float)))


def test_kl_of_identical_gaussians_is_zero():
    """Test KL(q || q) = 0"""
    q = _gaussian([[0.3, -1.0]], [[0.2, -0.5]])

    assert abs(kl_diag(q, q).item()) < 1e-12


def test_kl_matches_closed_form_1d():
    """Test KL(N(1, 1) || N(0, 1)) = 0.5"""
    q = _gaussian([1.0], [0.0])
    p = _gaussian([0.0], [0.0])

    assert kl_diag(q, p).item() == pytest.approx(0.5)


def test_kl_standard_equals_kl_diag_to_standard():
    """Test that kl_standard is kl_diag against N(0, I)"""
    q = _gaussian([[0.5, -0.2, 1.0]], [[0.1, -0.3, 0.7]])

    assert kl_standard(q).item() == pytest.approx(kl_diag(q, DiagGaussian.standard((1, 3))).item())


def test_kl_shape_mismatch():
    """Test that KL rejects different shapes"""
    with pytest.raises(ShapeError):
        kl_diag(_gaussian([0.0], [0.0]), _gaussian([0.0, 0.0], [0.0, 0.0]))


def test_from_params_clamps_log_variance():
    """Test that from_params splits halves and clamps the log-variance"""
    params = Tensor(np.array([[1.0, 2.0, 100.0, -0.5]]))

    g = DiagGaussian.from_params(params)

    np.testing.assert_allclose(g.mean.data, [[1.0, 2.0]])
    np.testing.assert_allclose(g.log_var.data, [[LOG_VAR_MAX, -0.5]])


def test_from_params_odd_extent():
    """Test that an odd parameter axis is rejected"""
    with pytest.raises(ShapeError):
        DiagGaussian.from_params(Tensor(np.ones((1, 3))))


def test_reparam_sample_formula():
    """Test sample = mean + exp(log_var / 2) * noise"""
    g = _gaussian([1.0, -1.0], [math.log(4.0), 0.0])

    out = reparam_sample(g, Tensor(np.array([0.5, 2.0])))

    np.testing.assert_allclose(out.data, [2.0, 1.0])


def test_gauss_log_prob_standard_at_zero():
    """Test log N(0; 0, 1) = -0.5 log(2 pi)"""
    g = _gaussian([0.0], [0.0])

    assert gauss_log_prob(g, Tensor([0.0])).item() == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_unit_gauss_nll_with_constant():
    """Test the optional log(2 pi) constant"""
    pred = Tensor(np.array([1.0, 2.0]))
    target = np.array([0.0, 2.0])

    assert unit_gauss_nll(pred, target).item() == pytest.approx(0.5)
    assert unit_gauss_nll(pred, target, include_constant=True).item() == pytest.approx(
        0.5 + math.log(2 * math.pi))


def test_sigma_vae_variance_is_mse():
    """Test that the calibrated variance equals the mean squared error"""
    pred = Tensor(np.array([0.0, 0.0, 0.0, 0.0]))
    target = np.array([1.0, -1.0, 1.0, -1.0])

    loss, var = sigma_vae_nll(pred, target)

    assert var == pytest.approx(1.0)
    # D/2 * (log 1 + 1) = 2
    assert loss.item() == pytest.approx(2.0)


def test_sigma_vae_variance_floor():
    """Test that a perfect prediction uses the variance floor"""
    pred = Tensor(np.ones(3))

    loss, var = sigma_vae_nll(pred, np.ones(3), floor=1e-4)

    assert var == pytest.approx(1e-4)
    assert loss.item() == pytest.approx(1.5 * math.log(1e-4))


def test_noise_source_per_row_independent_of_batch():
    """Test that per-row streams give a row the same noise regardless of batch size"""
    streams = [make_rng(0, f'row/{i}') for i in range(3)]
    solo = NoiseSource(per_row=[make_rng(0, 'row/1')]).normal((1, 4))

    batch = NoiseSource(per_row=streams).normal((3, 4))

    np.testing.assert_array_equal(batch[1], solo[0])


def test_noise_source_batch_mismatch():
    """Test that per-row noise rejects a different batch size"""
    source = NoiseSource(per_row=[make_rng(0, 'a')])

    with pytest.raises(ShapeError):
        source.normal((2, 3))


def test_kl_gradient_flows_to_both_arguments():
    """Test that KL gradients reach posterior and prior parameters"""
    with tc.DiffRecord():
        qm = Tensor(np.array([0.5]), requires_grad=True)
        pm = Tensor(np.array([0.0]), requires_grad=True)
        loss = kl_diag(DiagGaussian(qm, tc.zeros((1,))), DiagGaussian(pm, tc.zeros((1,))))
        gq, gp = tc.grad(loss, [qm, pm])

    np.testing.assert_allclose(gq, [0.5])
    np.testing.assert_allclose(gp, [-0.5])


# ============================================================================
# Sampling and quadrature oracles
# ============================================================================

MC_SAMPLES = 100_000


def test_reparam_sample_moments_match_distribution():
    """Test empirical mean and variance of 1e5 samples within 4 standard errors"""
    mean = np.array([1.5, -0.5])
    var = np.array([0.25, 4.0])
    noise = make_rng(3, 'reparam-moments').standard_normal((MC_SAMPLES, 2))
    g = _gaussian(np.tile(mean, (MC_SAMPLES, 1)), np.tile(np.log(var), (MC_SAMPLES, 1)))

    samples = reparam_sample(g, Tensor(noise)).data

    mean_se = np.sqrt(var / MC_SAMPLES)
    var_se = var * np.sqrt(2.0 / (MC_SAMPLES - 1))
    assert np.all(np.abs(samples.mean(axis=0) - mean) < 4.0 * mean_se)
    assert np.all(np.abs(samples.var(axis=0, ddof=1) - var) < 4.0 * var_se)


def test_kl_matches_monte_carlo_estimate():
    """Test analytic KL against E_q[log q - log p] over 1e5 samples for 20 random pairs"""
    rng = make_rng(5, 'kl-monte-carlo')
    deviations = []
    for _ in range(20):
        mq, mp = rng.uniform(-1.0, 1.0, size=(2, 3))
        lq, lp = rng.uniform(-1.0, 1.0, size=(2, 3))
        x = mq + np.exp(0.5 * lq) * rng.standard_normal((MC_SAMPLES, 3))
        log_q = -0.5 * ((x - mq) ** 2 * np.exp(-lq) + lq)
        log_p = -0.5 * ((x - mp) ** 2 * np.exp(-lp) + lp)
        ratio = (log_q - log_p).sum(axis=1)

        analytic = kl_diag(_gaussian(mq, lq), _gaussian(mp, lp)).item()

        standard_error = ratio.std(ddof=1) / math.sqrt(MC_SAMPLES)
        deviations.append(abs(ratio.mean() - analytic) / standard_error)

    # at most one pair outside 3 standard errors
    assert sum(d > 3.0 for d in deviations) <= 1
    assert max(deviations) < 4.5


def test_log_prob_density_integrates_to_one():
    """Test that exp(log N(x; 0.7, 1.69)) integrates to 1 on a fine 1-D grid"""
    g = _gaussian([0.7], [math.log(1.69)])
    step = 0.01
    grid = np.arange(-12.0, 13.4 + step / 2, step)

    density = np.array([math.exp(gauss_log_prob(g, Tensor([x])).item()) for x in grid])

    assert density.sum() * step == pytest.approx(1.0, abs=1e-6)
    assert grid[np.argmax(density)] == pytest.approx(0.7, abs=step)
