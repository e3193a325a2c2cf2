"""Dense tensors and reverse-mode differentiation for Stoch-Future

Every differentiable primitive is built through ``apply_op``: the forward
value is computed eagerly with numpy, and when a ``DiffRecord`` is active and
any input is tracked, an entry holding the inputs and a backward closure is
appended to the record.  ``DiffRecord.backward`` replays the entries in
reverse creation order and accumulates gradients by node id.
"""

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stoch_future.errors import NumericalError, ShapeError

ArrayLike = Union['Tensor', np.ndarray, float, int]

# Names of every primitive recorded by apply_op; the gradient check registry
# must cover each of them.
OP_NAMES = (
    'add', 'sub', 'mul', 'div', 'neg', 'exp', 'log', 'sqrt', 'sin', 'cos',
    'tanh', 'sigmoid', 'relu', 'leaky_relu', 'abs', 'square', 'sum', 'mean',
    'reshape', 'transpose', 'broadcast_to', 'concat', 'stack', 'getitem',
    'matmul', 'linear', 'conv2d', 'upsample2x', 'clamp', 'maximum',
    'log_softmax',
)

_PRECISION = {'dtype': np.float64}
_NODE_IDS = itertools.count(1)
_LOCAL = threading.local()


def set_precision(bits: int) -> None:
    """
    Select the floating point width for newly created tensors

    Args:
        bits: 64 (verification, default) or 32 (training runs)
    """
    if bits == 64:
        _PRECISION['dtype'] = np.float64
    elif bits == 32:
        _PRECISION['dtype'] = np.float32
    else:
        raise ValueError(f"Unsupported precision: {bits}")


def get_dtype():
    """Return the active floating point dtype"""
    return _PRECISION['dtype']


class precision:
    """Context manager that temporarily switches precision"""

    def __init__(self, bits: int):
        self.bits = bits
        self._saved = None

    def __enter__(self):
        self._saved = _PRECISION['dtype']
        set_precision(self.bits)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _PRECISION['dtype'] = self._saved
        return False


class Tensor:
    """Dense row-major array that can take part in reverse-mode differentiation"""

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        """
        Initialize Tensor

        Args:
            data: Array-like values
            requires_grad: Treat this tensor as a differentiation leaf
            name: Optional parameter name
        """
        arr = np.asarray(data, dtype=get_dtype())
        if not arr.flags['C_CONTIGUOUS']:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.node_id = next(_NODE_IDS)
        self.name = name
        self.record: Optional['DiffRecord'] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying data"""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, tracked={self.tracked})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Entry:
    name: str
    inputs: Tuple[Tensor, ...]
    out_id: int
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DiffRecord:
    """Ordered record of differentiable operations for one forward pass"""

    def __init__(self):
        self.entries: List[_Entry] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
        """
        Reverse-mode gradients of a scalar loss

        Args:
            loss: Scalar tensor produced inside this record
            wrt: Tensors to differentiate with respect to

        Returns:
            One gradient array per entry of ``wrt`` (zeros when unreached)
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        wanted = {tensor.node_id for tensor in wrt}
        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        # intermediate results keep their gradient once every consumer is processed
        finished: Dict[int, np.ndarray] = {}
        for entry in reversed(self.entries):
            grad_out = grads.pop(entry.out_id, None)
            if grad_out is None:
                continue
            if entry.out_id in wanted:
                finished[entry.out_id] = grad_out
            input_grads = entry.backward_fn(grad_out)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.tracked:
                    continue
                if not np.all(np.isfinite(grad)):
                    raise NumericalError(f"non-finite gradient in backward of {entry.name}")
                if tensor.node_id in grads:
                    grads[tensor.node_id] = grads[tensor.node_id] + grad
                else:
                    grads[tensor.node_id] = grad

        finished.update(grads)
        result = []
        for tensor in wrt:
            grad = finished.get(tensor.node_id)
            if grad is None:
                grad = np.zeros_like(tensor.data)
            result.append(np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape))
        return result


def _stack() -> List[DiffRecord]:
    if not hasattr(_LOCAL, 'stack'):
        _LOCAL.stack = []
    return _LOCAL.stack


def active_record() -> Optional[DiffRecord]:
    """Return the innermost active record of this thread, if any"""
    stack = _stack()
    return stack[-1] if stack else None


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt`` using the loss's record"""
    if loss.record is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        return [np.ones_like(t.data) if t is loss else np.zeros_like(t.data) for t in wrt]
    return loss.record.gradients(loss, wrt)


def backward(loss: Tensor, params) -> Dict[str, np.ndarray]:
    """
    Gradient map over a parameter store

    Args:
        loss: Scalar loss tensor
        params: ParamStore (anything with ``items()`` of name, Tensor)

    Returns:
        Mapping from parameter name to gradient; zero for parameters
        not on the path to the loss
    """
    items = list(params.items())
    grads = grad(loss, [tensor for _, tensor in items])
    return {name: g for (name, _), g in zip(items, grads)}


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants as untracked tensors"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def check_finite(data: np.ndarray, name: str) -> None:
    """Raise NumericalError when ``data`` holds NaN or Inf"""
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by {name}")


def apply_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """
    Wrap a forward result and record it for differentiation

    Args:
        name: Primitive name
        inputs: Input tensors in the order ``backward_fn`` returns gradients
        out_data: Forward value
        backward_fn: Maps the output gradient to one gradient per input

    Returns:
        Output tensor
    """
    check_finite(out_data, name)
    out = Tensor(out_data)
    record = active_record()
    if record is not None and any(t.tracked for t in inputs):
        out.tracked = True
        out.record = record
        record.entries.append(_Entry(name, tuple(inputs), out.node_id, backward_fn))
    return out


def unbroadcast(grad_arr: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad_arr.ndim > len(shape):
        grad_arr = grad_arr.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad_arr.shape[axis] != 1:
            grad_arr = grad_arr.sum(axis=axis, keepdims=True)
    return grad_arr


# ============================================================================
# Elementwise arithmetic
# ============================================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op('add', (a, b), a.data + b.data,
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op('sub', (a, b), a.data - b.data,
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op('mul', (a, b), a.data * b.data,
                    lambda g: (unbroadcast(g * b.data, a.shape),
                               unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return apply_op('div', (a, b), out,
                    lambda g: (unbroadcast(g / b.data, a.shape),
                               unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return apply_op('neg', (a,), -a.data, lambda g: (-g,))


# ============================================================================
# Unary functions
# ============================================================================

def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op('exp', (a,), out, lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    return apply_op('log', (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericalError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return apply_op('sqrt', (a,), out, lambda g: (g * 0.5 / out,))


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return apply_op('sin', (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return apply_op('cos', (a,), np.cos(a.data), lambda g: (-g * np.sin(a.data),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return apply_op('tanh', (a,), out, lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return apply_op('sigmoid', (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return apply_op('relu', (a,), a.data * mask, lambda g: (g * mask,))


def leaky_relu(a: ArrayLike, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return apply_op('leaky_relu', (a,), a.data * scale, lambda g: (g * scale,))


def tabs(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return apply_op('abs', (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return apply_op('square', (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def clamp(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clip values to [low, high]; gradient passes only strictly inside"""
    a = as_tensor(a)
    inside = (a.data > low) & (a.data < high)
    return apply_op('clamp', (a,), np.clip(a.data, low, high), lambda g: (g * inside,))


def maximum(a: ArrayLike, floor: float) -> Tensor:
    """Elementwise max against a constant floor"""
    a = as_tensor(a)
    above = a.data > floor
    return apply_op('maximum', (a,), np.where(above, a.data, floor),
                    lambda g: (g * above,))


# ============================================================================
# Reductions and shape manipulation
# ============================================================================

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return apply_op('sum', (a,), out,
                    lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def tmean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.size, 1)
    return apply_op('mean', (a,), out,
                    lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return apply_op('reshape', (a,), a.data.reshape(tuple(shape)),
                    lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return apply_op('transpose', (a,), np.transpose(a.data, axes),
                    lambda g: (np.transpose(g, inverse),))


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return apply_op('broadcast_to', (a,), np.broadcast_to(a.data, shape).copy(),
                    lambda g: (unbroadcast(g, a.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return apply_op('concat', tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                    lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return apply_op('stack', tuple(tensors), out,
                    lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def getitem(a: ArrayLike, key) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return apply_op('getitem', (a,), np.array(a.data[key]), _backward)


# ============================================================================
# Linear algebra and neural primitives
# ============================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    return apply_op('matmul', (a, b), out,
                    lambda g: (unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                               unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)))


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """
    Affine map y = x W^T + b

    Args:
        x: Input [B, I]
        weight: Weight [O, I]
        bias: Optional bias [O]

    Returns:
        Output [B, O]
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        inputs.append(bias)

    def _backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return apply_op('linear', tuple(inputs), out, _backward)


def _pair(value) -> Tuple[int, int]:
    if isinstance(value, int):
        return value, value
    return int(value[0]), int(value[1])


def conv2d(x: ArrayLike, kernel: ArrayLike, bias: Optional[ArrayLike] = None,
           stride=1, padding=0) -> Tensor:
    """
    2-D cross-correlation with zero padding

    Args:
        x: Input [B, C, H, W]
        kernel: Filters [F, C, kh, kw]
        bias: Optional bias [F]
        stride: int or (sh, sw)
        padding: int or (ph, pw)

    Returns:
        Output [B, F, H', W'] with H' = (H + 2ph - kh) // sh + 1
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    batch, channels, height, width = x.shape
    filters, kchannels, kh, kw = kernel.shape
    if kchannels != channels:
        raise ShapeError(f"conv2d channel mismatch: input {channels}, kernel {kchannels}")
    if kh > height + 2 * ph or kw > width + 2 * pw or sh < 1 or sw < 1:
        raise ShapeError(f"conv2d invalid geometry: input {x.shape}, kernel {kernel.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.einsum('bchwij,fcij->bfhw', windows, kernel.data, optimize=True)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def _backward(g):
        grad_kernel = np.einsum('bfhw,bchwij->fcij', g, windows, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + sh * (out_h - 1) + 1:sh, j:j + sw * (out_w - 1) + 1:sw] += \
                    np.einsum('bfhw,fc->bchw', g, kernel.data[:, :, i, j], optimize=True)
        grads = [grad_padded[:, :, ph:ph + height, pw:pw + width], grad_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return apply_op('conv2d', tuple(inputs), out, _backward)


def upsample2x(x: ArrayLike) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of [B, C, H, W]"""
    x = as_tensor(x)
    batch, channels, height, width = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return apply_op('upsample2x', (x,), out,
                    lambda g: (g.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)),))


def log_softmax(x: ArrayLike, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return apply_op('log_softmax', (x,), out,
                    lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softplus(x: ArrayLike) -> Tensor:
    """log(1 + exp(x)) composed from primitives"""
    x = as_tensor(x)
    return add(relu(x), log(add(exp(neg(tabs(x))), 1.0)))


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape)))
