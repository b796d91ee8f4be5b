"""File formats: the SWTENSOR container plus PNG and NIfTI ingestion."""
from __future__ import annotations

import struct
from pathlib import Path

import nibabel as nib
import numpy as np
import torch
from PIL import Image as PILImage

__all__ = [
    "MAGIC",
    "save_tensor",
    "load_tensor",
    "read_png",
    "write_png",
    "read_nifti",
    "read_image",
    "normalize",
]

MAGIC = b"SWTENSOR"
_DTYPES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    pass


def save_tensor(path, array) -> None:
    """Write a float32 array as ``magic | u8 dtype | u8 rank | u32 extents... | C-order payload``."""
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<BB", 0, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not an SWTENSOR file")
    if len(data) < 10:
        raise FormatError(f"{path}: truncated header")
    code, rank = struct.unpack_from("<BB", data, 8)
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    offset = 10 + 4 * rank
    if len(data) < offset:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", data, 10)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(f"{path}: payload has {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape).astype(np.float32)


def normalize(array) -> np.ndarray:
    """Min-max scale to [0, 1]; constant images map to zeros."""
    array = np.asarray(array, dtype=np.float32)
    lo, hi = float(array.min()), float(array.max())
    if hi <= lo:
        return np.zeros_like(array)
    return (array - lo) / (hi - lo)


def read_png(path) -> np.ndarray:
    """Grayscale PNG (8 or 16 bit) as a float array with the raw intensity values."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "I;16B", "I;16L"):
            im = im.convert("L")
        return np.asarray(im).astype(np.float32)


def write_png(path, array, bits: int = 8) -> None:
    """Write an image in [0, 1] (clipped) as 8- or 16-bit grayscale, or an RGB uint8 array as-is."""
    array = np.asarray(array)
    if array.ndim == 3 and array.shape[-1] == 3:
        PILImage.fromarray(array.astype(np.uint8), mode="RGB").save(path)
        return
    clipped = np.clip(array, 0, 1)
    if bits == 8:
        PILImage.fromarray(np.round(clipped * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        PILImage.fromarray(np.round(clipped * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def read_nifti(path) -> np.ndarray:
    data = np.asarray(nib.load(str(path)).get_fdata(dtype=np.float32))
    # drop trailing singleton axes (e.g. 2D slices stored as X x Y x 1)
    while data.ndim > 2 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim not in (2, 3):
        raise FormatError(f"{path}: expected a 2D or 3D volume, got shape {data.shape}")
    return data


def read_image(path) -> np.ndarray:
    """Read PNG, NIfTI (.nii / .nii.gz) or SWTENSOR by extension, without normalisation."""
    name = str(path).lower()
    if name.endswith(".png"):
        return read_png(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti(path)
    if name.endswith(".swt"):
        return load_tensor(path)
    raise FormatError(f"{path}: unsupported image format")
