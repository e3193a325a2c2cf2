"""Bit-exact checkpoint files

Layout (all integers little-endian)::

    b"SDLCKPT1"
    u32 entry count
    per entry: u32 name length, UTF-8 name, u8 dtype tag, u8 rank,
               rank x u32 extents, raw little-endian payload
    sections until EOF: 4-byte tag, u64 payload length, payload

Section tags: ``ADAM`` optimizer state, ``KIND`` model-kind tag,
``META`` UTF-8 ``key = value`` lines.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from stoch_future.errors import CheckpointError
from stoch_future.layers import ParamStore
from stoch_future.optim import AdamState

MAGIC = b'SDLCKPT1'
DTYPE_TAGS = {0: np.dtype('<f8'), 1: np.dtype('<f4')}
TAG_FOR_DTYPE = {np.dtype('float64'): 0, np.dtype('float32'): 1}


@dataclass
class ModelCheckpoint:
    """Parameters, optimizer state and the model kind they belong to"""
    params: Dict[str, np.ndarray]
    model_kind: str = ''
    adam_state: Optional[AdamState] = None
    meta: Dict[str, str] = field(default_factory=dict)


def _encode_entries(arrays: Dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack('<I', len(arrays))]
    for name in sorted(arrays):
        data = np.asarray(arrays[name])
        if data.dtype not in TAG_FOR_DTYPE:
            raise CheckpointError(f"Unsupported dtype for {name}: {data.dtype}")
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<BB', TAG_FOR_DTYPE[data.dtype], data.ndim))
        chunks.append(struct.pack(f'<{data.ndim}I', *data.shape))
        chunks.append(data.astype(data.dtype.newbyteorder('<'), copy=False).tobytes(order='C'))
    return b''.join(chunks)


def _decode_entries(blob: bytes, offset: int) -> Tuple[Dict[str, np.ndarray], int]:
    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError("Checkpoint is truncated")
        chunk = blob[offset:offset + count]
        offset += count
        return chunk

    (count,) = struct.unpack('<I', take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack('<I', take(4))
        name = take(name_len).decode('utf-8')
        tag, rank = struct.unpack('<BB', take(2))
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f'<{rank}I', take(4 * rank)) if rank else ()
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).astype(
            dtype.newbyteorder('='))
    return arrays, offset


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack('<Q', len(payload)) + payload


def _encode_adam(state: AdamState) -> bytes:
    header = struct.pack('<ddddQ', state.learning_rate, state.beta1, state.beta2,
                         state.eps, state.step)
    moments = {f'm:{k}': v for k, v in state.first_moment.items()}
    moments.update({f'v:{k}': v for k, v in state.second_moment.items()})
    return header + _encode_entries(moments)


def _decode_adam(payload: bytes) -> AdamState:
    lr, b1, b2, eps, step = struct.unpack('<ddddQ', payload[:40])
    moments, _ = _decode_entries(payload, 40)
    return AdamState(
        learning_rate=lr, beta1=b1, beta2=b2, eps=eps, step=step,
        first_moment={k[2:]: v for k, v in moments.items() if k.startswith('m:')},
        second_moment={k[2:]: v for k, v in moments.items() if k.startswith('v:')},
    )


def serialize(checkpoint: ModelCheckpoint) -> bytes:
    """Encode a checkpoint to bytes"""
    chunks = [MAGIC, _encode_entries(checkpoint.params)]
    if checkpoint.adam_state is not None:
        chunks.append(_section(b'ADAM', _encode_adam(checkpoint.adam_state)))
    chunks.append(_section(b'KIND', checkpoint.model_kind.encode('utf-8')))
    if checkpoint.meta:
        text = ''.join(f'{k} = {checkpoint.meta[k]}\n' for k in sorted(checkpoint.meta))
        chunks.append(_section(b'META', text.encode('utf-8')))
    return b''.join(chunks)


def deserialize(blob: bytes) -> ModelCheckpoint:
    """Decode bytes produced by ``serialize``"""
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    params, offset = _decode_entries(blob, len(MAGIC))
    checkpoint = ModelCheckpoint(params=params)
    while offset < len(blob):
        if offset + 12 > len(blob):
            raise CheckpointError("Checkpoint section header is truncated")
        tag = blob[offset:offset + 4]
        (length,) = struct.unpack('<Q', blob[offset + 4:offset + 12])
        payload = blob[offset + 12:offset + 12 + length]
        if len(payload) != length:
            raise CheckpointError(f"Checkpoint section {tag!r} is truncated")
        offset += 12 + length
        if tag == b'ADAM':
            checkpoint.adam_state = _decode_adam(payload)
        elif tag == b'KIND':
            checkpoint.model_kind = payload.decode('utf-8')
        elif tag == b'META':
            for line in payload.decode('utf-8').splitlines():
                key, _, value = line.partition(' = ')
                checkpoint.meta[key] = value
        else:
            raise CheckpointError(f"Unknown checkpoint section {tag!r}")
    return checkpoint


def save_checkpoint(path: str, params: ParamStore, model_kind: str,
                    adam_state: Optional[AdamState] = None,
                    meta: Optional[Dict[str, str]] = None) -> str:
    """
    Write a checkpoint file

    Args:
        path: Destination file
        params: Parameters to store
        model_kind: Model-kind tag checked on restore
        adam_state: Optional optimizer state
        meta: Optional free-form key/value pairs

    Returns:
        Path written
    """
    checkpoint = ModelCheckpoint(params=params.state_dict(), model_kind=model_kind,
                                 adam_state=adam_state, meta=dict(meta or {}))
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(serialize(checkpoint))
    return str(target)


def load_checkpoint(path: str) -> ModelCheckpoint:
    """Read a checkpoint file"""
    target = Path(path)
    if not target.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return deserialize(target.read_bytes())


def restore_into(params: ParamStore, checkpoint: ModelCheckpoint, expected_kind: str) -> None:
    """
    Copy checkpoint values into an existing store

    Raises:
        CheckpointError: model kind or parameter layout differs
    """
    if checkpoint.model_kind != expected_kind:
        raise CheckpointError(f"Checkpoint holds a '{checkpoint.model_kind}' model, "
                              f"expected '{expected_kind}'")
    try:
        params.load_state_dict(checkpoint.params)
    except Exception as exc:
        raise CheckpointError(f"Checkpoint does not match model parameters: {exc}") from exc
