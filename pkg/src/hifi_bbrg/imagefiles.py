"""Image and tensor file formats.

Raw float dumps are little-endian with a small fixed header::

    magic   8 bytes   b"HBBRAW01"
    dtype   u8        0 = float32, 1 = float64
    ndim    u8
    pad     2 bytes
    dims    ndim x u32
    data    prod(dims) values, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

RAW_MAGIC = b"HBBRAW01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class RawFormatError(ValueError):
    pass


def write_raw(path: str | Path, array) -> Path:
    arr = array.detach().cpu().numpy() if isinstance(array, torch.Tensor) else np.asarray(array)
    if arr.dtype not in _CODES:
        raise RawFormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    header = RAW_MAGIC + struct.pack("<BB2x", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return path


def read_raw(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != RAW_MAGIC:
        raise RawFormatError(f"{path}: bad magic")
    code, ndim = struct.unpack_from("<BB2x", blob, 8)
    if code not in _DTYPES:
        raise RawFormatError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise RawFormatError(f"{path}: payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(C, H, W) image in [-1, 1] to an 8-bit (H, W) or (H, W, C) array."""
    arr = image.detach().cpu().double().numpy()
    arr = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        return arr[0]
    return np.moveaxis(arr, 0, -1)


def write_png(path: str | Path, image: torch.Tensor) -> Path:
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, H, W) image, got {tuple(image.shape)}")
    path = Path(path)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def write_heatmap(path: str | Path, values: np.ndarray, vmax: float | None = None) -> Path:
    """Render a 2-D non-negative map with the viridis colormap."""
    from matplotlib import colormaps

    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if vmax is None else vmax
    scaled = values / top if top > 0 else np.zeros_like(values)
    rgba = colormaps["viridis"](np.clip(scaled, 0.0, 1.0))
    path = Path(path)
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path, format="PNG")
    return path
