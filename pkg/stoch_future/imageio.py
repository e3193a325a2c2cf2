"""Binary array dumps, sequence bundles and PGM previews

SDLIMG1 block::

    7-byte magic b"SDLIMG1", u8 dtype code, u8 rank, 7 reserved zero bytes
    rank x u32 extents (little-endian)
    planar little-endian payload

A bundle file is a sequence of named blocks: u16 name length, UTF-8 name,
SDLIMG1 block.  Names are written in sorted order.
"""

import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from stoch_future.errors import DatasetError

MAGIC = b'SDLIMG1'
HEADER_SIZE = 16
DTYPE_CODES = {
    0: np.dtype('<f8'),
    1: np.dtype('<f4'),
    2: np.dtype('u1'),
    3: np.dtype('<i4'),
}
CODE_FOR_KIND = {
    np.dtype('float64'): 0,
    np.dtype('float32'): 1,
    np.dtype('uint8'): 2,
    np.dtype('int32'): 3,
}

# Fixed grey palette for instance maps; id 0 (background) is black.
INSTANCE_PALETTE = np.array([0, 255, 128, 200, 64, 160, 96, 224, 32, 176, 112, 240,
                             48, 144, 80, 208], dtype=np.uint8)


def encode_array(array: np.ndarray) -> bytes:
    """Encode one array as an SDLIMG1 block"""
    array = np.asarray(array)
    if array.dtype == np.int64:
        array = array.astype(np.int32)
    if array.dtype not in CODE_FOR_KIND:
        raise DatasetError(f"Unsupported array dtype: {array.dtype}")
    code = CODE_FOR_KIND[array.dtype]
    header = MAGIC + struct.pack('<BB', code, array.ndim) + bytes(7)
    extents = struct.pack(f'<{array.ndim}I', *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + extents + payload


def decode_array(blob: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """
    Decode an SDLIMG1 block

    Args:
        blob: Bytes holding one or more blocks
        offset: Start of the block

    Returns:
        (array, offset just past the block)
    """
    if blob[offset:offset + 7] != MAGIC:
        raise DatasetError("Bad SDLIMG1 magic")
    code, rank = struct.unpack('<BB', blob[offset + 7:offset + 9])
    if code not in DTYPE_CODES:
        raise DatasetError(f"Unknown SDLIMG1 dtype code {code}")
    offset += HEADER_SIZE
    shape = struct.unpack(f'<{rank}I', blob[offset:offset + 4 * rank]) if rank else ()
    offset += 4 * rank
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if offset + nbytes > len(blob):
        raise DatasetError("SDLIMG1 payload is truncated")
    array = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(shape)
    return array.astype(dtype.newbyteorder('=')), offset + nbytes


def write_array(path: str, array: np.ndarray) -> str:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_array(array))
    return str(target)


def read_array(path: str) -> np.ndarray:
    array, _ = decode_array(Path(path).read_bytes())
    return array


def write_bundle(path: str, arrays: Dict[str, np.ndarray]) -> str:
    """Write several named arrays into one file"""
    chunks = []
    for name in sorted(arrays):
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)) + encoded + encode_array(arrays[name]))
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(b''.join(chunks))
    return str(target)


def read_bundle(path: str) -> Dict[str, np.ndarray]:
    """Read a file written by ``write_bundle``"""
    target = Path(path)
    if not target.exists():
        raise DatasetError(f"Sequence file not found: {path}")
    blob = target.read_bytes()
    arrays = {}
    offset = 0
    while offset < len(blob):
        (name_len,) = struct.unpack('<H', blob[offset:offset + 2])
        name = blob[offset + 2:offset + 2 + name_len].decode('utf-8')
        arrays[name], offset = decode_array(blob, offset + 2 + name_len)
    return arrays


def to_uint8(image: np.ndarray, vmin: Optional[float] = None,
             vmax: Optional[float] = None) -> np.ndarray:
    """Scale a 2-D array into 0..255"""
    image = np.asarray(image, dtype=np.float64)
    low = float(image.min()) if vmin is None else vmin
    high = float(image.max()) if vmax is None else vmax
    if high <= low:
        return np.zeros(image.shape, dtype=np.uint8)
    scaled = (np.clip(image, low, high) - low) / (high - low)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path: str, image: np.ndarray, vmin: Optional[float] = None,
              vmax: Optional[float] = None) -> str:
    """
    Write an 8-bit binary PGM (P5)

    Args:
        path: Destination file
        image: 2-D array
        vmin: Value mapped to black (default: image minimum)
        vmax: Value mapped to white (default: image maximum)
    """
    if image.ndim != 2:
        raise DatasetError(f"PGM export needs a 2-D image, got shape {image.shape}")
    pixels = image if image.dtype == np.uint8 else to_uint8(image, vmin, vmax)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    header = f'P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n'.encode('ascii')
    target.write_bytes(header + pixels.tobytes())
    return str(target)


def read_pgm(path: str) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b'\n', 3)
    if parts[0] != b'P5':
        raise DatasetError(f"Not a binary PGM: {path}")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width).copy()


def instance_map_to_gray(ids: np.ndarray) -> np.ndarray:
    """Map instance ids onto the fixed palette (ids above 0 cycle through it)"""
    ids = np.asarray(ids, dtype=np.int64)
    index = np.where(ids > 0, (ids - 1) % (len(INSTANCE_PALETTE) - 1) + 1, 0)
    return INSTANCE_PALETTE[index]


def write_instance_pgm(path: str, ids: np.ndarray) -> str:
    return write_pgm(path, instance_map_to_gray(ids))


def tile_frames(frames: Sequence[np.ndarray], columns: Optional[int] = None,
                pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Arrange 2-D frames into a grid image"""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        return np.zeros((1, 1))
    columns = columns or len(frames)
    rows = (len(frames) + columns - 1) // columns
    height, width = frames[0].shape
    grid = np.full((rows * (height + pad) + pad, columns * (width + pad) + pad), fill)
    for i, frame in enumerate(frames):
        r, c = divmod(i, columns)
        top = pad + r * (height + pad)
        left = pad + c * (width + pad)
        grid[top:top + height, left:left + width] = frame
    return grid


def frame_to_2d(frame: np.ndarray) -> np.ndarray:
    """Collapse a [C, H, W] frame to 2-D (mean over channels) for previews"""
    frame = np.asarray(frame)
    if frame.ndim == 3:
        return frame.mean(axis=0)
    return frame


def write_sequence_preview(path: str, rows: List[Sequence[np.ndarray]]) -> str:
    """Write rows of [C, H, W] frames as one PGM grid in [0, 1]"""
    flat = []
    columns = max(len(r) for r in rows)
    for row in rows:
        padded = [frame_to_2d(f) for f in row]
        while len(padded) < columns:
            padded.append(np.ones_like(padded[0]))
        flat.extend(padded)
    return write_pgm(path, tile_frames(flat, columns=columns), 0.0, 1.0)
