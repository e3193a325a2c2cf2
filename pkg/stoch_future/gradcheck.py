"""Finite-difference verification of every differentiable operation

Primitive and component checks compare the full analytic gradient with
central differences element by element. End-to-end model checks compare
the training-loss gradient on randomly sampled parameters. Everything runs
in 64-bit precision.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.distributions import (DiagGaussian, gauss_log_prob, kl_diag, kl_standard,
                                        reparam_sample, sigma_vae_nll, unit_gauss_nll)
from stoch_future.layers import ParamStore, convgru_cell, convlstm_cell, lstm_cell
from stoch_future.rng import make_rng
from stoch_future.tensorcore import Tensor
from stoch_future.warpgeom import (CameraIntrinsics, bilinear_sample, blend, rotation_matrices,
                                   warp_by_depth_pose, warp_by_flow)

STEP = 1e-5
TOLERANCE = 1e-4
SAMPLED_PARAMETERS = 50


@dataclass
class GradCheck:
    """A registered check: builds its function and inputs from a generator"""
    name: str
    category: str
    build: Callable[[np.random.Generator], Tuple[Callable, List[np.ndarray]]]


@dataclass
class GradCheckResult:
    name: str
    category: str
    max_rel_error: float
    passed: bool
    error: str = ''

    def to_dict(self) -> dict:
        return {'name': self.name, 'category': self.category,
                'max_rel_error': self.max_rel_error, 'passed': self.passed, 'error': self.error}


# ============================================================================
# Error measures
# ============================================================================

def component_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst component of |analytic - numeric| / max(1, |analytic|)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def max_rel_error(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                  rng: np.random.Generator, step: float = STEP) -> float:
    """
    Worst relative error between analytic and central-difference gradients

    The scalar under test is sum(fn(*inputs) * P) for a fixed random
    projection P, so every output element contributes.

    Args:
        fn: Function of Tensors returning a Tensor
        inputs: Input arrays
        rng: Stream for the projection
        step: Finite-difference step

    Returns:
        Max over inputs and components of |g_analytic - g_numeric| / max(1, |g_analytic|)
    """
    with tc.precision(64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        projection = rng.standard_normal(fn(*[Tensor(a) for a in arrays]).shape)

        def value(current: List[np.ndarray]) -> float:
            return float(np.sum(fn(*[Tensor(a) for a in current]).data * projection))

        with tc.DiffRecord():
            leaves = [Tensor(a, requires_grad=True) for a in arrays]
            loss = tc.tsum(fn(*leaves) * Tensor(projection))
            analytic = tc.grad(loss, leaves)

        worst = 0.0
        for index, array in enumerate(arrays):
            numeric = np.zeros_like(array)
            flat = array.reshape(-1)
            out = numeric.reshape(-1)
            for j in range(flat.size):
                original = flat[j]
                flat[j] = original + step
                plus = value(arrays)
                flat[j] = original - step
                minus = value(arrays)
                flat[j] = original
                out[j] = (plus - minus) / (2.0 * step)
            worst = max(worst, component_error(analytic[index], numeric))
        return worst


def sampled_rel_error(loss_fn: Callable[[], Tensor], params: ParamStore,
                      rng: np.random.Generator, count: int = SAMPLED_PARAMETERS,
                      step: float = STEP) -> float:
    """
    Compare the analytic gradient with central differences on sampled parameters

    Coordinates whose perturbation crosses a kink of a piecewise-linear
    activation are skipped: there the forward and backward one-sided
    slopes disagree by more than the tolerance.

    Args:
        loss_fn: Recomputes the scalar loss from the current parameters
        params: Parameters perturbed in place and restored afterwards
        rng: Stream choosing the sampled coordinates
        count: Number of parameter coordinates to check
        step: Finite-difference step

    Returns:
        Worst |g_analytic - g_numeric| / max(1, |g_analytic|) over the checked
        coordinates (inf when every candidate crossed a kink)
    """
    theta = params.flatten().copy()
    with tc.DiffRecord():
        loss = loss_fn()
        grads = tc.backward(loss, params)
    base = float(loss.data)
    gradient = np.concatenate([grads[name].reshape(-1) for name, _ in params.items()])
    wanted = min(count, theta.size)

    checked: List[int] = []
    numeric: List[float] = []
    try:
        for index in rng.permutation(theta.size):
            if len(checked) == wanted:
                break
            shifted = theta.copy()
            shifted[index] += step
            params.unflatten(shifted)
            plus = float(loss_fn().data)
            shifted[index] -= 2.0 * step
            params.unflatten(shifted)
            minus = float(loss_fn().data)
            forward, backward = (plus - base) / step, (base - minus) / step
            if abs(forward - backward) > TOLERANCE * max(1.0, abs(gradient[index])):
                continue
            checked.append(int(index))
            numeric.append((plus - minus) / (2.0 * step))
    finally:
        params.unflatten(theta)
    if not checked:
        return float('inf')
    return component_error(gradient[checked], np.array(numeric))


# ============================================================================
# Input generators
# ============================================================================

def _away(rng: np.random.Generator, shape, point: float = 0.0, margin: float = 0.1,
          spread: float = 1.0) -> np.ndarray:
    """Values at least ``margin`` away from a kink at ``point``"""
    sign = rng.choice([-1.0, 1.0], size=shape)
    return point + sign * rng.uniform(margin, spread, size=shape)


def _positive(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.5, 2.0, size=shape)


def _normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _unary(fn, make):
    return lambda rng: (fn, [make(rng, (3, 4))])


def _binary(fn, make_b=_normal):
    return lambda rng: (fn, [_normal(rng, (3, 4)), make_b(rng, (4,))])


def _clamp_inputs(rng: np.random.Generator, shape) -> np.ndarray:
    inside = rng.uniform(-0.4, 0.4, size=shape)
    outside = _away(rng, shape, 0.0, 0.6, 1.0)
    return np.where(rng.uniform(size=shape) < 0.5, inside, outside)


def _sample_coords(rng: np.random.Generator, batch: int, height: int, width: int) -> np.ndarray:
    """Non-integer coordinates strictly inside the image"""
    x = rng.integers(0, width - 1, size=(batch, height, width)) + rng.uniform(0.1, 0.9, size=(batch, height, width))
    y = rng.integers(0, height - 1, size=(batch, height, width)) + rng.uniform(0.1, 0.9, size=(batch, height, width))
    return np.stack([x, y], axis=1)


PRIMITIVE_CHECKS: Dict[str, Callable] = {
    'add': _binary(lambda a, b: a + b),
    'sub': _binary(lambda a, b: a - b),
    'mul': _binary(lambda a, b: a * b),
    'div': _binary(lambda a, b: a / b, _positive),
    'neg': _unary(lambda a: -a, _normal),
    'exp': _unary(tc.exp, _normal),
    'log': _unary(tc.log, _positive),
    'sqrt': _unary(tc.sqrt, _positive),
    'sin': _unary(tc.sin, _normal),
    'cos': _unary(tc.cos, _normal),
    'tanh': _unary(tc.tanh, _normal),
    'sigmoid': _unary(tc.sigmoid, _normal),
    'relu': _unary(tc.relu, _away),
    'leaky_relu': _unary(tc.leaky_relu, _away),
    'abs': _unary(tc.tabs, _away),
    'square': _unary(tc.square, _normal),
    'sum': _unary(lambda a: tc.tsum(a, axis=1), _normal),
    'mean': _unary(lambda a: tc.tmean(a, axis=0, keepdims=True), _normal),
    'reshape': _unary(lambda a: tc.reshape(a, (2, 6)), _normal),
    'transpose': lambda rng: (lambda a: tc.transpose(a, (2, 0, 1)), [_normal(rng, (2, 3, 4))]),
    'broadcast_to': lambda rng: (lambda a: tc.broadcast_to(a, (3, 4)), [_normal(rng, (3, 1))]),
    'concat': lambda rng: (lambda a, b: tc.concat([a, b], axis=1),
                           [_normal(rng, (2, 3)), _normal(rng, (2, 2))]),
    'stack': lambda rng: (lambda a, b: tc.stack([a, b], axis=0),
                          [_normal(rng, (2, 3)), _normal(rng, (2, 3))]),
    'getitem': _unary(lambda a: a[1:, ::2], _normal),
    'matmul': lambda rng: (lambda a, b: a @ b, [_normal(rng, (3, 4)), _normal(rng, (4, 2))]),
    'linear': lambda rng: (tc.linear, [_normal(rng, (3, 4)), _normal(rng, (2, 4)), _normal(rng, (2,))]),
    'conv2d': lambda rng: (lambda x, k, b: tc.conv2d(x, k, b, stride=2, padding=1),
                           [_normal(rng, (2, 2, 5, 5)), _normal(rng, (3, 2, 3, 3)), _normal(rng, (3,))]),
    'upsample2x': lambda rng: (tc.upsample2x, [_normal(rng, (1, 2, 3, 3))]),
    'clamp': _unary(lambda a: tc.clamp(a, -0.5, 0.5), _clamp_inputs),
    'maximum': _unary(lambda a: tc.maximum(a, 0.0), _away),
    'log_softmax': _unary(lambda a: tc.log_softmax(a, axis=1), _normal),
    'bilinear_sample': lambda rng: (bilinear_sample,
                                    [_normal(rng, (2, 2, 5, 5)), _sample_coords(rng, 2, 5, 5)]),
}


def _lstm(rng):
    hidden, inputs = 3, 4
    return (lambda x, h, c, w_ih, w_hh, b: tc.concat(list(lstm_cell(x, h, c, (w_ih, w_hh, b))), axis=1),
            [_normal(rng, (2, inputs)), _normal(rng, (2, hidden)), _normal(rng, (2, hidden)),
             _normal(rng, (4 * hidden, inputs)), _normal(rng, (4 * hidden, hidden)),
             _normal(rng, (4 * hidden,))])


def _convlstm(rng):
    hidden, channels = 2, 2
    return (lambda x, h, c, wx, wh, b: tc.concat(list(convlstm_cell(x, h, c, (wx, wh, b))), axis=1),
            [_normal(rng, (1, channels, 4, 4)), _normal(rng, (1, hidden, 4, 4)),
             _normal(rng, (1, hidden, 4, 4)), _normal(rng, (4 * hidden, channels, 3, 3)) * 0.3,
             _normal(rng, (4 * hidden, hidden, 3, 3)) * 0.3, _normal(rng, (4 * hidden,))])


def _convgru(rng):
    hidden, channels = 2, 2
    return (lambda x, h, wx, whzr, whc, b: convgru_cell(x, h, (wx, whzr, whc, b)),
            [_normal(rng, (1, channels, 4, 4)), _normal(rng, (1, hidden, 4, 4)),
             _normal(rng, (3 * hidden, channels, 3, 3)) * 0.3,
             _normal(rng, (2 * hidden, hidden, 3, 3)) * 0.3,
             _normal(rng, (hidden, hidden, 3, 3)) * 0.3, _normal(rng, (3 * hidden,))])


def _kl(rng):
    return (lambda m1, v1, m2, v2: kl_diag(DiagGaussian(m1, v1), DiagGaussian(m2, v2)),
            [_normal(rng, (2, 3)) for _ in range(4)])


def _kl_standard(rng):
    return (lambda m, v: kl_standard(DiagGaussian(m, v)), [_normal(rng, (2, 3)), _normal(rng, (2, 3))])


def _log_prob(rng):
    return (lambda m, v, x: gauss_log_prob(DiagGaussian(m, v), x),
            [_normal(rng, (2, 3)), _normal(rng, (2, 3)), _normal(rng, (2, 3))])


def _reparam(rng):
    noise = _normal(rng, (2, 3))
    return (lambda m, v: reparam_sample(DiagGaussian(m, v), Tensor(noise)),
            [_normal(rng, (2, 3)), _normal(rng, (2, 3))])


def _unit_nll(rng):
    target = _normal(rng, (2, 3))
    return (lambda p: unit_gauss_nll(p, target), [_normal(rng, (2, 3))])


def _sigma_nll(rng):
    target = _normal(rng, (2, 3))
    return (lambda p: sigma_vae_nll(p, target)[0], [_normal(rng, (2, 3))])


def _rotation(rng):
    return (rotation_matrices, [_normal(rng, (2, 3)) * 0.3])


def _warp_flow(rng):
    grid = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), axis=0)[None]
    flow = _sample_coords(rng, 1, 5, 5) - grid
    return (warp_by_flow, [_normal(rng, (1, 1, 5, 5)), flow])


def _depth_pose(rng):
    intrinsics = CameraIntrinsics(fx=4.0, fy=4.0, cx=2.0, cy=2.0)
    return (lambda img, depth, t, r: warp_by_depth_pose(img, depth, t, r, intrinsics)[0],
            [_normal(rng, (1, 1, 5, 5)), rng.uniform(4.0, 6.0, size=(1, 1, 5, 5)),
             rng.uniform(-0.02, 0.02, size=(1, 3)), rng.uniform(-0.02, 0.02, size=(1, 3))])


def _blend(rng):
    return (lambda a, b, logits: blend(a, b, tc.sigmoid(logits)),
            [_normal(rng, (2, 3)), _normal(rng, (2, 3)), _normal(rng, (2, 3))])


def _residual_chain(rng):
    from stoch_future.ssm_residual import residual_step

    def run(y, z, w, b):
        def f(state, latent):
            return tc.tanh(tc.linear(tc.concat([state, latent], axis=1), w, b))
        for _ in range(5):
            y = residual_step(y, z, f, dt=1.0, substeps=2)
        return y
    return (run, [_normal(rng, (2, 3)), _normal(rng, (2, 2)), _normal(rng, (3, 5)) * 0.5,
                  _normal(rng, (3,))])


COMPONENT_CHECKS: Dict[str, Callable] = {
    'lstm_cell': _lstm,
    'convlstm_cell': _convlstm,
    'convgru_cell': _convgru,
    'kl_diag': _kl,
    'kl_standard': _kl_standard,
    'gauss_log_prob': _log_prob,
    'reparam_sample': _reparam,
    'unit_gauss_nll': _unit_nll,
    'sigma_vae_nll': _sigma_nll,
    'rotation_matrices': _rotation,
    'warp_by_flow': _warp_flow,
    'warp_by_depth_pose': _depth_pose,
    'blend': _blend,
    'residual_step_chain': _residual_chain,
}


# ============================================================================
# End-to-end model checks
# ============================================================================

def tiny_model(kind: str, rng: np.random.Generator):
    """
    Small model, batch and loss closure for one model kind

    Returns:
        (model, loss_fn) where loss_fn recomputes the training objective
        with fixed noise
    """
    from stoch_future import ssm_residual as ssm
    from stoch_future import svp_ar as ar
    from stoch_future.synthworlds import BEV_CHANNELS

    def noise():
        return make_rng(0, 'gradcheck/noise')

    small = dict(latent_dim=2, hidden_dim=6, feature_dim=6, base_channels=2)
    if kind in ('svg', 'slamp', 'slamp-baseline'):
        frames = rng.uniform(0.0, 1.0, size=(2, 3, 1, 16, 16))
        if kind == 'svg':
            model = ar.SVGModel(1, 16, 16, rng, **small)
        else:
            model = ar.SLAMPModel(1, 16, 16, rng, baseline=kind == 'slamp-baseline', **small)
        return model, lambda: ar.train_loss(model, frames, noise(), k=2).objective

    if kind.startswith('slamp3d-'):
        intrinsics = CameraIntrinsics(fx=8.0, fy=8.0, cx=3.5, cy=3.5)
        frames = rng.uniform(0.0, 1.0, size=(2, 3, 1, 8, 8))
        model = ar.SLAMP3DModel(1, 8, 8, intrinsics, rng, variant=kind.split('-')[1],
                                latent_dim=2, base_channels=2)
        return model, lambda: ar.train_loss(model, frames, noise(), k=2).objective

    if kind == 'srvp':
        frames = rng.standard_normal((2, 4, 3))
        model = ssm.SRVPModel((3,), 2, rng, state_dim=3, use_content=False, **small)
        return model, lambda: ssm.ssm_elbo(model, frames, noise()).objective

    if kind.startswith('srvp++-'):
        frames = rng.uniform(0.0, 1.0, size=(2, 3, 1, 16, 16))
        model = ssm.SRVPPlusModel((1, 16, 16), 2, rng, variant=kind.split('-')[1],
                                  state_dim=3, use_content=True, **small)
        return model, lambda: ssm.ssm_elbo(model, frames, noise()).objective

    variant = {'stretchbev': 'base', 'stretchbev-p': 'p', 'stretchbev-global': 'global'}[kind]
    frames = rng.uniform(0.0, 1.0, size=(2, 3, BEV_CHANNELS, 8, 8))
    seg = rng.integers(0, 2, size=(2, 3, 1, 8, 8)).astype(np.float64)
    labels = np.concatenate([1.0 - seg, seg, rng.uniform(0.0, 1.0, size=(2, 3, 1, 8, 8)),
                             rng.standard_normal((2, 3, 4, 8, 8))], axis=2)
    model = ssm.StretchBEVModel(8, 2, rng, variant=variant, state_channels=3, latent_channels=2,
                                base_channels=2, label_channels=2)
    return model, lambda: ssm.ssm_elbo(model, frames, noise(), labels=labels).objective


def _model_kinds() -> Tuple[str, ...]:
    from stoch_future.config_manager import MODEL_KINDS
    return MODEL_KINDS


# ============================================================================
# Registry and runner
# ============================================================================

def registry() -> Dict[str, GradCheck]:
    """Every registered check keyed by name"""
    checks: Dict[str, GradCheck] = {}
    for name, build in PRIMITIVE_CHECKS.items():
        checks[name] = GradCheck(name, 'primitive', build)
    for name, build in COMPONENT_CHECKS.items():
        checks[name] = GradCheck(name, 'component', build)
    for kind in _model_kinds():
        checks[f'model:{kind}'] = GradCheck(f'model:{kind}', 'model', None)
    return checks


def run_check(check: GradCheck, seed: int = 0) -> GradCheckResult:
    rng = make_rng(seed, f'gradcheck/{check.name}')
    try:
        if check.category == 'model':
            with tc.precision(64):
                model, loss_fn = tiny_model(check.name.split(':', 1)[1], rng)
                error = sampled_rel_error(loss_fn, model.params, rng)
        else:
            fn, inputs = check.build(rng)
            error = max_rel_error(fn, inputs, rng)
    except Exception as exc:
        return GradCheckResult(check.name, check.category, float('inf'), False,
                               f"{type(exc).__name__}: {exc}")
    return GradCheckResult(check.name, check.category, error, error <= TOLERANCE)


def run_gradchecks(names: Optional[Sequence[str]] = None, seed: int = 0,
                   logger=None) -> List[GradCheckResult]:
    """
    Run registered checks

    Args:
        names: Subset of check names (all when None)
        seed: Seed of the input streams
        logger: Optional RunLogger

    Returns:
        One result per check, in registry order
    """
    checks = registry()
    selected = list(checks) if names is None else list(names)
    results = []
    for name in selected:
        result = run_check(checks[name], seed)
        if logger:
            status = 'OK' if result.passed else 'FAIL'
            logger.log_operation(f"gradcheck {name}", status,
                                 f"worst rel. err {result.max_rel_error:.3e} {result.error}".strip())
        results.append(result)
    return results
