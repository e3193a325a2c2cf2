"""Unit tests for the autoregressive predictors (SVG, SLAMP, SLAMP-3D)"""

import numpy as np
import pytest

from stoch_future import tensorcore as tc
from stoch_future.distributions import sigma_vae_nll
from stoch_future.errors import InvalidInputError, ShapeError
from stoch_future.svp_ar import (SLAMP3DModel, SLAMPModel, StepTrace, SVGModel, rollout,
                                 slamp3d_step, slamp_predict_step, train_loss)
from stoch_future.tensorcore import Tensor
from stoch_future.warpgeom import CameraIntrinsics

SMALL = dict(latent_dim=2, hidden_dim=6, feature_dim=6, base_channels=2)
INTRINSICS = CameraIntrinsics(fx=8.0, fy=8.0, cx=3.5, cy=3.5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def frames(rng):
    return rng.uniform(0.0, 1.0, size=(2, 4, 1, 16, 16))


def _svg(seed=0, **kw):
    return SVGModel(1, 16, 16, np.random.default_rng(seed), **SMALL, **kw)


def _slamp(seed=0, **kw):
    return SLAMPModel(1, 16, 16, np.random.default_rng(seed), **SMALL, **kw)


def _slamp3d(variant='conditional', seed=0):
    return SLAMP3DModel(1, 8, 8, INTRINSICS, np.random.default_rng(seed), variant=variant,
                        latent_dim=2, base_channels=2)


# ============================================================================
# Training objective
# ============================================================================

def test_svg_loss_terms_and_weighting(frames):
    """Test SVG reports reconstruction and beta-weighted KL"""
    model = _svg(beta=0.5)

    loss = train_loss(model, frames, np.random.default_rng(1), k=2)

    assert set(loss.terms) == {'reconstruction', 'kl'}
    assert loss.check_consistency()
    assert loss.terms['kl'] == pytest.approx(0.5 * loss.diagnostics['kl_raw'])
    assert loss.objective.item() == pytest.approx(loss.total)


def test_svg_loss_is_reproducible(frames):
    """Test that the same noise stream gives the same objective"""
    model = _svg()

    a = train_loss(model, frames, np.random.default_rng(3), k=2).total
    b = train_loss(model, frames, np.random.default_rng(3), k=2).total

    assert a == b


def test_train_loss_uses_ground_truth_and_posterior(frames):
    """Test that every training step is teacher-forced with posterior latents"""
    model = _svg()

    train_loss(model, frames, np.random.default_rng(0), k=2)

    assert [s.t for s in model.trace] == [1, 2, 3]
    assert all(s.frame_source == 'ground_truth' for s in model.trace)
    assert all(s.latent_source == 'posterior' for s in model.trace)


def test_train_loss_rejects_short_sequences(rng):
    """Test the minimum sequence length of SLAMP"""
    model = _slamp()

    with pytest.raises(InvalidInputError):
        train_loss(model, rng.uniform(size=(1, 2, 1, 16, 16)), rng, k=2)


def test_wrong_frame_shape_rejected(rng):
    """Test that frames of the wrong geometry are rejected"""
    with pytest.raises(ShapeError):
        train_loss(_svg(), rng.uniform(size=(1, 3, 1, 8, 8)), rng, k=2)


def test_fixed_prior_has_no_prior_network():
    """Test that the fixed-prior variant registers no prior parameters"""
    learned = _svg()
    fixed = _svg(fixed_prior=True)

    assert any(name.startswith('prior') for name in learned.params.names())
    assert not any(name.startswith('prior') for name in fixed.params.names())


def test_gradient_reaches_decoder(frames):
    """Test that the objective is differentiable down to the frame decoder"""
    model = _svg()

    with tc.DiffRecord():
        loss = train_loss(model, frames, np.random.default_rng(0), k=2)
        grads = tc.backward(loss.objective, model.params)

    decoder = [g for name, g in grads.items() if name.startswith('frame_dec')]
    assert decoder and any(np.any(g != 0.0) for g in decoder)


def test_slamp_loss_terms(frames):
    """Test the SLAMP terms: three reconstructions and two KLs"""
    loss = train_loss(_slamp(), frames, np.random.default_rng(0), k=2)

    assert set(loss.terms) == {'reconstruction_appearance', 'reconstruction_motion',
                               'reconstruction_combined', 'kl_pixel', 'kl_flow'}
    assert loss.check_consistency()


def test_slamp_baseline_has_no_flow_kl(frames):
    """Test that the baseline drops the motion chain"""
    model = _slamp(baseline=True)

    loss = train_loss(model, frames, np.random.default_rng(0), k=2)

    assert model.kind == 'slamp-baseline'
    assert 'kl_flow' not in loss.terms


def test_slamp_first_motion_prior_uses_zero_motion(frames):
    """Test that the first motion prior step is marked as zero motion"""
    model = _slamp()

    train_loss(model, frames, np.random.default_rng(0), k=2)

    assert ('zero_motion_prior', 1) in model.trace


# ============================================================================
# Rollout
# ============================================================================

def test_rollout_shapes_and_latents(frames):
    """Test prediction, intermediate and latent shapes for SLAMP"""
    results = rollout(_slamp(), frames[0, :2], horizon=3, n_samples=2,
                      rng=np.random.default_rng(0))

    assert len(results) == 2
    for result in results:
        assert result.predictions.shape == (3, 1, 16, 16)
        assert result.horizon == 3
        assert set(result.intermediates) == {'appearance', 'flow', 'motion', 'mask'}
        assert result.intermediates['flow'].shape == (3, 2, 16, 16)
        assert set(result.latents) == {'z_pixel', 'z_flow'}
        assert result.latents['z_pixel'].shape == (3, 2)


def test_rollout_trace_switches_sources(frames):
    """Test frame and latent sources around the conditioning boundary"""
    model = _svg()

    rollout(model, frames[0, :2], horizon=3, n_samples=1, rng=np.random.default_rng(0))

    steps = [s for s in model.trace if isinstance(s, StepTrace)]
    assert [s.frame_source for s in steps] == ['ground_truth', 'ground_truth',
                                               'prediction', 'prediction']
    assert [s.latent_source for s in steps] == ['posterior', 'prior', 'prior', 'prior']


def test_posterior_rollout_uses_future(frames):
    """Test that posterior mode keeps drawing from the posterior"""
    model = _svg()

    rollout(model, frames[0, :2], horizon=2, n_samples=1, rng=np.random.default_rng(0),
            mode='posterior', future=frames[0, 2:])

    assert all(s.latent_source == 'posterior' for s in model.trace)


def test_rollout_is_deterministic(frames):
    """Test that equal seeds give equal samples and samples differ from each other"""
    model = _svg()

    a = rollout(model, frames[0, :2], 2, 2, np.random.default_rng(5))
    b = rollout(model, frames[0, :2], 2, 2, np.random.default_rng(5))

    np.testing.assert_array_equal(a[0].predictions, b[0].predictions)
    assert not np.array_equal(a[0].latents['z'], a[1].latents['z'])


def test_sample_does_not_depend_on_sample_count(frames):
    """Test that the first sample is the same when more samples are drawn"""
    model = _svg()

    one = rollout(model, frames[0, :2], 2, 1, np.random.default_rng(9))
    three = rollout(model, frames[0, :2], 2, 3, np.random.default_rng(9))

    np.testing.assert_allclose(one[0].predictions, three[0].predictions, atol=1e-10)


@pytest.mark.parametrize('kwargs', [
    dict(horizon=0, n_samples=1),
    dict(horizon=2, n_samples=0),
    dict(horizon=2, n_samples=1, mode='teacher'),
    dict(horizon=2, n_samples=1, mode='posterior'),
])
def test_rollout_argument_validation(frames, kwargs):
    """Test rejected rollout arguments"""
    with pytest.raises(InvalidInputError):
        rollout(_svg(), frames[0, :2], rng=np.random.default_rng(0), **kwargs)


def test_slamp_needs_two_conditioning_frames(frames):
    """Test that SLAMP refuses a single conditioning frame"""
    with pytest.raises(InvalidInputError):
        rollout(_slamp(), frames[0, :1], 2, 1, np.random.default_rng(0))


# ============================================================================
# SLAMP decoding step
# ============================================================================

def test_slamp_mask_one_selects_appearance(rng):
    """Test that a mask of one returns the appearance prediction"""
    model = _slamp()
    prev = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    state = model.initial_state(prev, 2)

    appearance, _, _, _, frame = slamp_predict_step(model, prev, state, tc.zeros((1, 2)),
                                                    tc.zeros((1, 2)), force_mask=1.0)

    np.testing.assert_allclose(frame.data, appearance.data)


def test_slamp_mask_zero_and_zero_flow_copies_previous_frame(rng):
    """Test that mask zero with zero flow reproduces the previous frame"""
    model = _slamp()
    prev = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    state = model.initial_state(prev, 2)

    _, flow, motion, _, frame = slamp_predict_step(model, prev, state, tc.zeros((1, 2)),
                                                   tc.zeros((1, 2)), force_mask=0.0,
                                                   force_flow=0.0)

    np.testing.assert_allclose(flow.data, 0.0)
    np.testing.assert_allclose(motion.data, prev.data)
    np.testing.assert_allclose(frame.data, prev.data)


# ============================================================================
# SLAMP-3D
# ============================================================================

def test_slamp3d_identity_motion_copies_previous_frame(rng):
    """Test that identity pose and zero residual flow give back the previous frame"""
    model = _slamp3d()
    prev = Tensor(rng.uniform(size=(1, 1, 8, 8)))
    state = model.initial_state(prev, 2)
    z = tc.zeros((1, 2, 2, 2))

    depth, pose, static, residual, dynamic, mask, frame = slamp3d_step(
        model, state, prev, z, z, force_identity_pose=True, force_zero_residual=True)

    assert depth.shape == (1, 1, 8, 8)
    assert np.all(depth.data > 0.0)
    np.testing.assert_allclose(pose.data, 0.0)
    np.testing.assert_allclose(residual.data, 0.0)
    np.testing.assert_allclose(static.data, prev.data, atol=1e-8)
    np.testing.assert_allclose(frame.data, prev.data, atol=1e-8)
    assert np.all((mask.data >= 0.0) & (mask.data <= 1.0))


def test_slamp3d_depthonly_step_has_no_dynamic_outputs(rng):
    """Test that the depth-only variant returns None for the dynamic branch"""
    model = _slamp3d('depthonly')
    prev = Tensor(rng.uniform(size=(1, 1, 8, 8)))
    state = model.initial_state(prev, 2)

    out = slamp3d_step(model, state, prev, tc.zeros((1, 2, 2, 2)), None)

    assert out[3] is None and out[4] is None and out[5] is None
    np.testing.assert_array_equal(out[6].data, out[2].data)


def test_slamp3d_loss_terms(rng):
    """Test SLAMP-3D terms for the full and depth-only variants"""
    batch = rng.uniform(size=(2, 3, 1, 8, 8))

    full = train_loss(_slamp3d(), batch, np.random.default_rng(0), k=2)
    depthonly = train_loss(_slamp3d('depthonly'), batch, np.random.default_rng(0), k=2)

    assert set(full.terms) == {'nll_combined', 'nll_static', 'nll_dynamic',
                               'kl_static', 'kl_dynamic'}
    assert set(depthonly.terms) == {'nll_combined', 'kl_static'}
    assert full.check_consistency()


def test_slamp3d_depthonly_counts_reconstruction_once(rng):
    """Test that the depth-only frame is scored by a single sigma-VAE term"""
    model = _slamp3d('depthonly')
    target = Tensor(rng.uniform(size=(2, 1, 8, 8)))
    static = Tensor(rng.uniform(size=(2, 1, 8, 8)))

    terms = model.reconstruction_terms({'frame': static, 'static': static}, target)

    expected, _ = sigma_vae_nll(static, target, model.sigma2_min)
    assert list(terms) == ['nll_combined']
    assert terms['nll_combined'].item() == pytest.approx(expected.item() / 2.0)


def test_slamp3d_rollout_intermediates(rng):
    """Test that rollouts expose depth, pose and flows but not predictor features"""
    model = _slamp3d('combined')

    result = rollout(model, rng.uniform(size=(2, 1, 8, 8)), 2, 1, np.random.default_rng(0))[0]

    assert result.predictions.shape == (2, 1, 8, 8)
    assert result.intermediates['depth'].shape == (2, 1, 8, 8)
    assert result.intermediates['pose'].shape == (2, 6)
    assert 'residual_flow' in result.intermediates
    assert not any(name.startswith('g_') for name in result.intermediates)
    assert set(result.latents) == {'z_static', 'z_dynamic'}
    assert result.latents['z_static'].shape == (2, 2, 2, 2)


def test_slamp3d_depthonly_rollout_has_no_dynamic_latent(rng):
    """Test the depth-only latent set"""
    result = rollout(_slamp3d('depthonly'), rng.uniform(size=(2, 1, 8, 8)), 1, 1,
                     np.random.default_rng(0))[0]

    assert set(result.latents) == {'z_static'}


def test_slamp3d_validation():
    """Test variant and frame size validation"""
    with pytest.raises(InvalidInputError):
        _slamp3d('stereo')
    with pytest.raises(ShapeError):
        SLAMP3DModel(1, 10, 8, INTRINSICS, np.random.default_rng(0))
