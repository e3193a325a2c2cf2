"""Unit tests for the evaluation pipeline"""

import math

import numpy as np
import pytest

from stoch_future.config_manager import RunConfig
from stoch_future.errors import InvalidInputError, ShapeError
from stoch_future.evaluation import (Evaluator, ground_truth_sampler, model_sampler, mse,
                                     seconds_per_frame)
from stoch_future.models import (BEVWorldConfig, RolloutResult, SpriteWorldConfig,
                                 ToyWorldConfig)
from stoch_future.synthworlds import gen_bevworld, gen_sprites, gen_toy
from stoch_future.training import model_for_dataset


def make_config(model_kind, world_kind, world, **kw):
    params = dict(model_kind=model_kind, world_kind=world_kind, seed=0, n_sequences=2,
                  workers=2, world=world, k=2, train_horizon=2, eval_horizon=3, latent_dim=2,
                  hidden_dim=6, feature_dim=6, base_channels=2, state_dim=3, use_content=False,
                  n_samples=3, precision=64)
    params.update(kw)
    return RunConfig(**params)


def test_mse():
    """Test mean squared error"""
    assert mse(np.zeros(4), np.full(4, 2.0)) == pytest.approx(4.0)


def test_ground_truth_scores_perfectly_on_sprites():
    """Test that the true future reaches the best PSNR and SSIM"""
    world = SpriteWorldConfig(length=6)
    cfg = make_config('slamp', 'sprites', world)
    sequences = [gen_sprites(world, seed=i) for i in range(2)]

    result = Evaluator(cfg).evaluate(sequences, ground_truth_sampler(cfg))

    psnr = result.report('psnr')
    assert psnr.sequence_count == 2
    assert all(math.isinf(v) for values in psnr.per_frame for v in values)
    assert result.report('ssim').mean == pytest.approx(1.0)
    assert len(result.report('ssim').per_frame[0]) == 3


def test_ground_truth_scores_perfectly_on_bev():
    """Test IoU, VPQ and GED of the true future, near and far"""
    world = BEVWorldConfig(size=20, agent_count=2, agent_size_range=(3, 3), length=6)
    cfg = make_config('stretchbev', 'bev', world, eval_horizon=4)
    sequences = [gen_bevworld(world, seed=3)]

    assert cfg.horizons == {'short': 4}
    result = Evaluator(cfg).evaluate(sequences, ground_truth_sampler(cfg, n_samples=2))

    for region in ('far', 'near'):
        assert result.report('iou_short', region).mean == pytest.approx(1.0)
        assert result.report('vpq_short', region).mean == pytest.approx(1.0)
        assert result.report('ged_short', region).mean == pytest.approx(0.0)
    assert ('iou_mid', 'far') not in result.names()


def test_ground_truth_scores_perfectly_on_toy():
    """Test the vector world score"""
    world = ToyWorldConfig(length=6)
    cfg = make_config('srvp', 'toy', world)

    result = Evaluator(cfg).evaluate([gen_toy(world, seed=0)], ground_truth_sampler(cfg))

    assert result.names() == [('mse', 'full')]
    assert result.report('mse').mean == 0.0


def test_short_sequences_rejected():
    """Test that sequences shorter than k + horizon are refused"""
    world = ToyWorldConfig(length=4)
    cfg = make_config('srvp', 'toy', world)

    with pytest.raises(InvalidInputError):
        Evaluator(cfg).evaluate([gen_toy(world, seed=0)], ground_truth_sampler(cfg))


def test_misshaped_predictions_rejected():
    """Test that predictions must match the ground-truth future"""
    world = ToyWorldConfig(length=6)
    cfg = make_config('srvp', 'toy', world)

    def sampler(sequence, index):
        return [RolloutResult(predictions=np.zeros((3, 5)))]

    with pytest.raises(ShapeError):
        Evaluator(cfg).evaluate([gen_toy(world, seed=0)], sampler)


def test_model_sampler_is_order_independent():
    """Test that each sequence draws from its own stream"""
    world = ToyWorldConfig(length=6)
    cfg = make_config('srvp', 'toy', world)
    sequences = [gen_toy(world, seed=i) for i in range(2)]
    model = model_for_dataset(cfg, sequences)
    sampler = model_sampler(model, cfg)

    first = sampler(sequences[1], 1)
    again = sampler(sequences[1], 1)
    other = sampler(sequences[1], 0)

    assert len(first) == 3
    assert first[0].predictions.shape == (3, 4)
    np.testing.assert_array_equal(first[0].predictions, again[0].predictions)
    assert not np.array_equal(first[0].predictions, other[0].predictions)


def test_model_evaluation_reports_likelihood_bounds(mocker):
    """Test that state-space models also get ELBO and IWAE per sequence"""
    world = ToyWorldConfig(length=6)
    cfg = make_config('srvp', 'toy', world)
    sequences = [gen_toy(world, seed=i) for i in range(2)]
    model = model_for_dataset(cfg, sequences)
    logger = mocker.Mock()

    result = Evaluator(cfg, model, logger).evaluate(sequences, model_sampler(model, cfg))

    assert set(result.names()) == {('mse', 'full'), ('elbo', 'full'), ('iwae', 'full')}
    for elbo, iwae in zip(result.report('elbo').per_sequence, result.report('iwae').per_sequence):
        assert elbo <= iwae + 1e-9
    assert logger.log_metric.call_count == 3


def test_seconds_per_frame_uses_clock():
    """Test the timing division by the horizon"""
    world = ToyWorldConfig(length=6)
    cfg = make_config('srvp', 'toy', world)
    sequence = gen_toy(world, seed=0)
    model = model_for_dataset(cfg, [sequence])
    clock = iter([0.0, 3.0]).__next__

    assert seconds_per_frame(model, cfg, sequence, 3, clock) == pytest.approx(1.0)
