"""Unit tests for model construction and the training loop"""

import csv
import tempfile
from pathlib import Path

import numpy as np
import pytest

from stoch_future.checkpoint import load_checkpoint
from stoch_future.config_manager import RunConfig
from stoch_future.errors import ConfigError, DatasetError, NumericalError
from stoch_future.models import BEVWorldConfig, ToyWorldConfig
from stoch_future.ssm_residual import SRVPModel, StretchBEVModel
from stoch_future.svp_ar import SLAMP3DModel, SLAMPModel
from stoch_future.synthworlds import gen_bevworld, gen_toy
from stoch_future.training import (CHECKPOINT_NAME, TRACE_NAME, Trainer, build_model,
                                   compute_loss, model_for_dataset)


def make_config(model_kind='srvp', world_kind='toy', world=None, **kw):
    params = dict(model_kind=model_kind, world_kind=world_kind, seed=0, n_sequences=2,
                  workers=1, world=world or ToyWorldConfig(length=6), k=2, train_horizon=2,
                  eval_horizon=3, latent_dim=2, hidden_dim=6, feature_dim=6, base_channels=2,
                  state_dim=3, state_channels=3, latent_channels=2, use_content=False,
                  steps=3, batch_size=2, learning_rate=1e-3, checkpoint_every=2, log_every=1,
                  precision=64)
    params.update(kw)
    return RunConfig(**params)


@pytest.fixture
def toy_sequences():
    return [gen_toy(ToyWorldConfig(length=6), seed=i) for i in range(2)]


@pytest.fixture
def bev_sequences():
    world = BEVWorldConfig(size=8, agent_count=1, agent_size_range=(1, 1), length=6)
    return [gen_bevworld(world, seed=i) for i in range(2)]


# ============================================================================
# Model construction
# ============================================================================

def test_build_model_dispatch():
    """Test that model kinds map to their classes"""
    assert isinstance(build_model(make_config(), (4,)), SRVPModel)
    slamp = build_model(make_config('slamp-baseline', 'sprites'), (1, 16, 16))
    assert isinstance(slamp, SLAMPModel) and slamp.kind == 'slamp-baseline'
    bev = build_model(make_config('stretchbev-global', 'bev'), (8, 8, 8))
    assert isinstance(bev, StretchBEVModel) and bev.kind == 'stretchbev-global'


def test_build_slamp3d_needs_intrinsics():
    """Test SLAMP-3D construction with and without intrinsics"""
    cfg = make_config('slamp3d-combined', 'ego')

    model = build_model(cfg, (1, 8, 8), intrinsics=[8.0, 8.0, 3.5, 3.5])

    assert isinstance(model, SLAMP3DModel)
    with pytest.raises(ConfigError):
        build_model(cfg, (1, 8, 8))


def test_build_model_rejects_vector_frames_for_image_models():
    """Test that image models refuse vector observations"""
    with pytest.raises(ConfigError):
        build_model(make_config('svg', 'sprites'), (4,))


def test_build_model_is_seeded():
    """Test that the same seed gives the same initialization"""
    a = build_model(make_config(), (4,))
    b = build_model(make_config(), (4,))
    c = build_model(make_config(seed=1), (4,))

    np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())
    assert not np.array_equal(a.params.flatten(), c.params.flatten())


def test_model_for_empty_dataset():
    """Test that an empty dataset is rejected"""
    with pytest.raises(DatasetError):
        model_for_dataset(make_config(), [])


def test_compute_loss_rejects_unknown_models():
    """Test the model family dispatch"""
    with pytest.raises(ConfigError):
        compute_loss(object(), np.zeros((1, 3, 4)), np.random.default_rng(0), 2)


# ============================================================================
# Trainer
# ============================================================================

def test_training_writes_trace_and_checkpoints(toy_sequences):
    """Test loss trace rows, periodic and final checkpoints"""
    cfg = make_config()
    model = model_for_dataset(cfg, toy_sequences)

    with tempfile.TemporaryDirectory() as tmpdir:
        result = Trainer(cfg, model, toy_sequences, tmpdir).train()

        assert result.steps_completed == 3
        assert Path(result.checkpoint_path).name == CHECKPOINT_NAME
        assert [Path(p).name for p in result.periodic_checkpoints] == ['checkpoint_step000002.ckpt']
        with open(Path(tmpdir) / TRACE_NAME, newline='') as handle:
            rows = list(csv.DictReader(handle))
        checkpoint = load_checkpoint(result.checkpoint_path)

    assert [row['step'] for row in rows] == ['0', '1', '2']
    assert all(row['phase'] == 'train' for row in rows)
    assert float(rows[-1]['total']) == pytest.approx(result.final_total)
    assert checkpoint.model_kind == 'srvp'
    assert checkpoint.meta['step'] == '3'
    assert checkpoint.adam_state.step == 3
    assert sorted(checkpoint.params) == model.params.names()
    for name, tensor in model.params.items():
        np.testing.assert_array_equal(checkpoint.params[name], tensor.data)


def test_training_is_reproducible(toy_sequences):
    """Test that two runs with the same seed give bit-identical parameters"""
    cfg = make_config()
    first = model_for_dataset(cfg, toy_sequences)
    second = model_for_dataset(cfg, toy_sequences)

    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        Trainer(cfg, first, toy_sequences, a).train()
        Trainer(cfg, second, toy_sequences, b).train()

    np.testing.assert_array_equal(first.params.flatten(), second.params.flatten())


def test_zero_steps_saves_initialization(toy_sequences):
    """Test that a zero-step run still writes a checkpoint of the initial parameters"""
    cfg = make_config()
    model = model_for_dataset(cfg, toy_sequences)
    initial = model.params.flatten().copy()

    with tempfile.TemporaryDirectory() as tmpdir:
        result = Trainer(cfg, model, toy_sequences, tmpdir).train(steps=0)
        checkpoint = load_checkpoint(result.checkpoint_path)

    restored = np.concatenate([checkpoint.params[name].reshape(-1)
                               for name in sorted(checkpoint.params)])
    np.testing.assert_array_equal(restored, initial)


def test_short_sequences_rejected(toy_sequences):
    """Test that sequences shorter than k + train horizon are refused"""
    cfg = make_config(train_horizon=5)
    model = model_for_dataset(cfg, toy_sequences)

    with pytest.raises(DatasetError):
        Trainer(cfg, model, toy_sequences, '.')


def test_sample_batch_shapes(toy_sequences):
    """Test batch windows of k + train_horizon frames"""
    cfg = make_config(batch_size=3)
    trainer = Trainer(cfg, model_for_dataset(cfg, toy_sequences), toy_sequences, '.')

    frames, labels = trainer.sample_batch(np.random.default_rng(0))

    assert frames.shape == (3, 4, 4)
    assert labels is None


def test_numerical_failure_carries_step(toy_sequences, mocker):
    """Test that a non-finite loss aborts with the failing step"""
    cfg = make_config()
    model = model_for_dataset(cfg, toy_sequences)
    trainer = Trainer(cfg, model, toy_sequences, '.')
    mocker.patch('stoch_future.training.compute_loss',
                 side_effect=NumericalError('non-finite value in exp'))

    with tempfile.TemporaryDirectory() as tmpdir:
        trainer.output_directory = Path(tmpdir)
        with pytest.raises(NumericalError) as info:
            trainer.train()

    assert info.value.step == 0
    assert '(step 0)' in str(info.value)


def test_bev_pretraining_schedule(bev_sequences):
    """Test the pre-training phase, its zero label loss and the fine-tuning rate"""
    world = BEVWorldConfig(size=8, agent_count=1, agent_size_range=(1, 1), length=6)
    cfg = make_config('stretchbev', 'bev', world=world, steps=2, pretrain_steps=1,
                      learning_rate=0.01, finetune_lr_scale=0.1, batch_size=1)
    model = model_for_dataset(cfg, bev_sequences)
    trainer = Trainer(cfg, model, bev_sequences, '.')

    assert [trainer.phase(s) for s in range(3)] == ['pretrain', 'train', 'train']
    assert trainer.learning_rate(0) == pytest.approx(0.01)
    assert trainer.learning_rate(1) == pytest.approx(0.001)

    with tempfile.TemporaryDirectory() as tmpdir:
        trainer.output_directory = Path(tmpdir)
        trainer.train()
        with open(Path(tmpdir) / TRACE_NAME, newline='') as handle:
            rows = list(csv.DictReader(handle))

    assert [row['phase'] for row in rows] == ['pretrain', 'train']
    assert float(rows[0]['label']) == 0.0
    assert float(rows[1]['label']) > 0.0


def test_pretrain_ignored_for_frame_models(toy_sequences, mocker):
    """Test that non-BEV models skip pre-training with a warning"""
    cfg = make_config(pretrain_steps=5)
    logger = mocker.Mock()

    trainer = Trainer(cfg, model_for_dataset(cfg, toy_sequences), toy_sequences, '.', logger)

    assert trainer.pretrain_steps == 0
    logger.warning.assert_called_once()


def test_bev_training_needs_labels(bev_sequences):
    """Test that unlabeled BEV sequences are refused"""
    world = BEVWorldConfig(size=8, agent_count=1, agent_size_range=(1, 1), length=6)
    cfg = make_config('stretchbev', 'bev', world=world)
    model = model_for_dataset(cfg, bev_sequences)
    for sequence in bev_sequences:
        sequence.segmentation = None

    with pytest.raises(DatasetError):
        Trainer(cfg, model, bev_sequences, '.')
