"""Parameter store and neural building blocks"""

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.errors import ShapeError
from stoch_future.tensorcore import Tensor

# Packed gate order for the LSTM-style cells; checkpoints depend on it.
LSTM_GATES = ('input', 'forget', 'candidate', 'output')
GRU_GATES = ('update', 'reset', 'candidate')


class ParamStore:
    """Named parameter collection iterated in lexicographic name order"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> List[str]:
        return sorted(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def add(self, name: str, data: np.ndarray) -> Tensor:
        """
        Register a new parameter

        Args:
            name: Dotted parameter name, unique within the store
            data: Initial values

        Returns:
            The tracked parameter tensor
        """
        if name in self._params:
            raise ValueError(f"Duplicate parameter name: {name}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def uniform(self, name: str, shape: Sequence[int], fan_in: int,
                rng: np.random.Generator) -> Tensor:
        """Register a weight drawn from U[-1/sqrt(fan_in), 1/sqrt(fan_in)]"""
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, rng.uniform(-bound, bound, size=tuple(shape)))

    def zeros(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.add(name, np.zeros(tuple(shape)))

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def set_data(self, name: str, data: np.ndarray) -> None:
        """Replace a parameter's values in place, keeping its identity"""
        tensor = self._params[name]
        data = np.asarray(data)
        if data.shape != tensor.shape:
            raise ShapeError(f"{name}: expected shape {tensor.shape}, got {data.shape}")
        tensor.data = np.array(data, dtype=tensor.data.dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ShapeError(f"Parameter sets differ: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, data in state.items():
            self.set_data(name, data)

    def flatten(self) -> np.ndarray:
        """Concatenate every parameter into one vector in name order"""
        if not self._params:
            return np.zeros(0)
        return np.concatenate([tensor.data.reshape(-1) for _, tensor in self.items()])

    def unflatten(self, vector: np.ndarray) -> None:
        """Inverse of ``flatten``"""
        offset = 0
        for name, tensor in self.items():
            count = tensor.size
            self.set_data(name, vector[offset:offset + count].reshape(tensor.shape))
            offset += count
        if offset != vector.size:
            raise ShapeError(f"Vector has {vector.size} values, store holds {offset}")


class Linear:
    """Fully connected layer"""

    def __init__(self, store: ParamStore, name: str, in_features: int,
                 out_features: int, rng: np.random.Generator):
        self.weight = store.uniform(f'{name}.weight', (out_features, in_features),
                                    in_features, rng)
        self.bias = store.zeros(f'{name}.bias', (out_features,))
        self.out_features = out_features

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class Conv2d:
    """Convolution layer with 'same'-style padding for odd kernels"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = store.uniform(f'{name}.weight',
                                    (out_channels, in_channels, kernel_size, kernel_size),
                                    fan_in, rng)
        self.bias = store.zeros(f'{name}.bias', (out_channels,))
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.out_channels = out_channels

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MLP:
    """Stack of Linear layers with leaky-ReLU between them"""

    def __init__(self, store: ParamStore, name: str, sizes: Sequence[int],
                 rng: np.random.Generator):
        self.layers = [Linear(store, f'{name}.{i}', sizes[i], sizes[i + 1], rng)
                       for i in range(len(sizes) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tc.leaky_relu(x)
        return x


# ============================================================================
# Recurrent cells
# ============================================================================

def _split_channels(gates: Tensor, hidden: int, count: int, axis: int = 1) -> List[Tensor]:
    parts = []
    for i in range(count):
        index = [slice(None)] * gates.ndim
        index[axis] = slice(i * hidden, (i + 1) * hidden)
        parts.append(gates[tuple(index)])
    return parts


def lstm_cell(x: Tensor, h: Tensor, c: Tensor,
              params: Tuple[Tensor, Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
    """
    Standard gated LSTM cell

    Args:
        x: Input [B, I]
        h: Hidden state [B, H]
        c: Cell state [B, H]
        params: (w_ih [4H, I], w_hh [4H, H], bias [4H]) packed in
            (input, forget, candidate, output) order

    Returns:
        (h', c')
    """
    w_ih, w_hh, bias = params
    hidden = h.shape[1]
    if w_hh.shape != (4 * hidden, hidden) or c.shape != h.shape:
        raise ShapeError(f"lstm_cell state/weight mismatch: h {h.shape}, c {c.shape}, "
                         f"w_hh {w_hh.shape}")
    gates = tc.linear(x, w_ih, bias) + tc.linear(h, w_hh)
    i, f, g, o = _split_channels(gates, hidden, 4)
    i, f, o = tc.sigmoid(i), tc.sigmoid(f), tc.sigmoid(o)
    g = tc.tanh(g)
    c_next = f * c + i * g
    h_next = o * tc.tanh(c_next)
    return h_next, c_next


def convlstm_cell(x: Tensor, h: Tensor, c: Tensor,
                  params: Tuple[Tensor, Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
    """
    Convolutional LSTM cell; same gate algebra as ``lstm_cell``

    Args:
        x: Input [B, C, H, W]
        h: Hidden state [B, Hc, H, W]
        c: Cell state [B, Hc, H, W]
        params: (w_x [4Hc, C, k, k], w_h [4Hc, Hc, k, k], bias [4Hc])

    Returns:
        (h', c')
    """
    w_x, w_h, bias = params
    if x.shape[2:] != h.shape[2:] or c.shape != h.shape:
        raise ShapeError(f"convlstm_cell spatial mismatch: x {x.shape}, h {h.shape}")
    hidden = h.shape[1]
    pad = w_x.shape[2] // 2
    gates = tc.conv2d(x, w_x, bias, padding=pad) + tc.conv2d(h, w_h, padding=w_h.shape[2] // 2)
    i, f, g, o = _split_channels(gates, hidden, 4)
    i, f, o = tc.sigmoid(i), tc.sigmoid(f), tc.sigmoid(o)
    g = tc.tanh(g)
    c_next = f * c + i * g
    h_next = o * tc.tanh(c_next)
    return h_next, c_next


def convgru_cell(x: Tensor, h: Tensor,
                 params: Tuple[Tensor, Tensor, Tensor, Tensor]) -> Tensor:
    """
    Convolutional GRU cell: h' = (1 - z) * h + z * candidate

    Args:
        x: Input [B, C, H, W]
        h: Hidden state [B, Hc, H, W]
        params: (w_x [3Hc, C, k, k], w_hzr [2Hc, Hc, k, k],
            w_hc [Hc, Hc, k, k], bias [3Hc]) in (update, reset, candidate) order

    Returns:
        h'
    """
    w_x, w_hzr, w_hc, bias = params
    if x.shape[2:] != h.shape[2:]:
        raise ShapeError(f"convgru_cell spatial mismatch: x {x.shape}, h {h.shape}")
    hidden = h.shape[1]
    pad = w_x.shape[2] // 2
    x_gates = tc.conv2d(x, w_x, bias, padding=pad)
    xz, xr, xc = _split_channels(x_gates, hidden, 3)
    hz, hr = _split_channels(tc.conv2d(h, w_hzr, padding=w_hzr.shape[2] // 2), hidden, 2)
    z = tc.sigmoid(xz + hz)
    r = tc.sigmoid(xr + hr)
    candidate = tc.tanh(xc + tc.conv2d(r * h, w_hc, padding=w_hc.shape[2] // 2))
    return (1.0 - z) * h + z * candidate


class LSTMCell:
    """Linear LSTM cell registered in a ParamStore"""

    def __init__(self, store: ParamStore, name: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator):
        self.hidden_size = hidden_size
        self.w_ih = store.uniform(f'{name}.w_ih', (4 * hidden_size, input_size), input_size, rng)
        self.w_hh = store.uniform(f'{name}.w_hh', (4 * hidden_size, hidden_size), hidden_size, rng)
        self.bias = store.zeros(f'{name}.bias', (4 * hidden_size,))

    def zero_state(self, batch: int) -> Tuple[Tensor, Tensor]:
        return tc.zeros((batch, self.hidden_size)), tc.zeros((batch, self.hidden_size))

    def __call__(self, x: Tensor, state: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
        return lstm_cell(x, state[0], state[1], (self.w_ih, self.w_hh, self.bias))


class ConvLSTMCell:
    """Convolutional LSTM cell registered in a ParamStore"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, hidden_channels: int,
                 rng: np.random.Generator, kernel_size: int = 3):
        self.hidden_channels = hidden_channels
        k = kernel_size
        self.w_x = store.uniform(f'{name}.w_x', (4 * hidden_channels, in_channels, k, k),
                                 in_channels * k * k, rng)
        self.w_h = store.uniform(f'{name}.w_h', (4 * hidden_channels, hidden_channels, k, k),
                                 hidden_channels * k * k, rng)
        self.bias = store.zeros(f'{name}.bias', (4 * hidden_channels,))

    def zero_state(self, batch: int, height: int, width: int) -> Tuple[Tensor, Tensor]:
        shape = (batch, self.hidden_channels, height, width)
        return tc.zeros(shape), tc.zeros(shape)

    def __call__(self, x: Tensor, state: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
        return convlstm_cell(x, state[0], state[1], (self.w_x, self.w_h, self.bias))


class ConvGRUCell:
    """Convolutional GRU cell registered in a ParamStore"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, hidden_channels: int,
                 rng: np.random.Generator, kernel_size: int = 3):
        self.hidden_channels = hidden_channels
        k = kernel_size
        self.w_x = store.uniform(f'{name}.w_x', (3 * hidden_channels, in_channels, k, k),
                                 in_channels * k * k, rng)
        self.w_hzr = store.uniform(f'{name}.w_hzr', (2 * hidden_channels, hidden_channels, k, k),
                                   hidden_channels * k * k, rng)
        self.w_hc = store.uniform(f'{name}.w_hc', (hidden_channels, hidden_channels, k, k),
                                  hidden_channels * k * k, rng)
        self.bias = store.zeros(f'{name}.bias', (3 * hidden_channels,))

    def zero_state(self, batch: int, height: int, width: int) -> Tensor:
        return tc.zeros((batch, self.hidden_channels, height, width))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return convgru_cell(x, h, (self.w_x, self.w_hzr, self.w_hc, self.bias))
