"""Unit tests for the finite-difference gradient checker"""

import numpy as np
import pytest

from stoch_future import tensorcore as tc
from stoch_future.config_manager import MODEL_KINDS
from stoch_future.gradcheck import (TOLERANCE, GradCheck, component_error, max_rel_error, registry,
                                    run_check, run_gradchecks, sampled_rel_error)
from stoch_future.layers import ParamStore


def test_registry_covers_every_primitive():
    """Test that each differentiable primitive has a check"""
    checks = registry()

    for name in tc.OP_NAMES:
        assert checks[name].category == 'primitive'
    assert 'bilinear_sample' in checks
    assert checks['model:srvp'].category == 'model'
    assert checks['warp_by_depth_pose'].category == 'component'


@pytest.mark.parametrize('name', ['add', 'div', 'log_softmax', 'conv2d', 'getitem', 'clamp',
                                  'bilinear_sample'])
def test_primitive_checks_pass(name):
    """Test that selected primitives agree with central differences"""
    result = run_check(registry()[name], seed=0)

    assert result.passed, result.error
    assert result.max_rel_error <= TOLERANCE


@pytest.mark.parametrize('name', ['lstm_cell', 'kl_diag', 'sigma_vae_nll', 'residual_step_chain'])
def test_component_checks_pass(name):
    """Test composite operations"""
    result = run_check(registry()[name], seed=1)

    assert result.passed, result.error


def test_wrong_backward_is_detected():
    """Test that a primitive whose backward disagrees with its forward fails"""
    def doubled(a):
        # forward 2a, backward claims 3
        return tc.apply_op('doubled', [a], a.data * 2.0, lambda g: [g * 3.0])

    error = max_rel_error(doubled, [np.ones((2, 3))], np.random.default_rng(0))

    # per component |2P - 3P| / max(1, |3P|) peaks at 1/3 once some |P| >= 1/3
    assert error == pytest.approx(1.0 / 3.0)
    assert error > TOLERANCE


def test_single_wrong_component_is_detected_in_large_input():
    """Test that one bad component among 10^4 fails regardless of the gradient norm"""
    offset = np.zeros((100, 100))
    offset.flat[0] = 0.01

    def nudged(a):
        return tc.apply_op('nudged', [a], a.data * 1.0, lambda g: [g + offset])

    error = max_rel_error(nudged, [np.ones((100, 100))], np.random.default_rng(0))

    assert error == pytest.approx(0.01, rel=1e-4)
    assert error > TOLERANCE


def test_component_error_scale():
    """Test absolute error below magnitude 1 and relative error above it"""
    assert component_error(np.array([0.5, 10.0]), np.array([0.5 + 1e-3, 10.0])) == pytest.approx(1e-3)
    assert component_error(np.array([0.5, 10.0]), np.array([0.5, 10.1])) == pytest.approx(0.01)
    assert component_error(np.array([]), np.array([])) == 0.0


def test_failing_build_is_reported():
    """Test that exceptions inside a check become a failed result"""
    def broken(rng):
        raise ValueError('no inputs')

    result = run_check(GradCheck('broken', 'component', broken))

    assert not result.passed
    assert result.max_rel_error == float('inf')
    assert 'ValueError' in result.error


def test_sampled_error_restores_parameters():
    """Test that sampled checks leave parameters unchanged"""
    store = ParamStore()
    w = store.add('w', np.array([0.5, -1.0, 2.0]))
    before = store.flatten().copy()

    error = sampled_rel_error(lambda: tc.tsum(tc.square(w) * w), store,
                              np.random.default_rng(0), count=2)

    np.testing.assert_array_equal(store.flatten(), before)
    assert error < 1e-8


def test_sampled_error_skips_kinks():
    """Test that coordinates sitting on a ReLU kink are left out of the comparison"""
    store = ParamStore()
    w = store.add('w', np.array([0.0, 2.0, -1.0]))

    error = sampled_rel_error(lambda: tc.tsum(tc.relu(w)), store, np.random.default_rng(0),
                              count=3)

    assert error < 1e-8


def test_sampled_error_is_infinite_when_nothing_is_checked():
    """Test that a loss with only kinked coordinates cannot pass"""
    store = ParamStore()
    w = store.add('w', np.array([0.0]))

    error = sampled_rel_error(lambda: tc.tsum(tc.relu(w)), store, np.random.default_rng(0))

    assert error == float('inf')


@pytest.mark.parametrize('kind', MODEL_KINDS)
def test_model_checks_pass(kind):
    """Test the end-to-end check of every model kind"""
    result = run_check(registry()[f'model:{kind}'], seed=0)

    assert result.passed, result.error


def test_run_gradchecks_logs_each_result(mocker):
    """Test that every selected check is logged"""
    logger = mocker.Mock()

    results = run_gradchecks(['add', 'tanh'], seed=0, logger=logger)

    assert [r.name for r in results] == ['add', 'tanh']
    assert logger.log_operation.call_count == 2
    assert logger.log_operation.call_args_list[0].args[1] == 'OK'
