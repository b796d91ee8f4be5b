"""Displacement-field algebra on voxel lattices.

Conventions used throughout the package:

* Coordinates are voxel indices, origin at voxel ``(0, ..., 0)``; axis ``c``
  of a field is the displacement along array axis ``c``.
* Fields have shape ``(d, *spatial)`` and hold displacements in voxel units
  of their own resolution.
* Warping is pull (backward) sampling: ``out[x] = img[x + field[x]]``, with
  coordinates clamped to the lattice (replicate boundary).
* Affine transforms are ``(d+1, d+1)`` homogeneous float64 numpy arrays
  acting on voxel coordinates.

Public functions take unbatched tensors (or numpy arrays, converted on entry)
and return torch tensors. The ``*_batched`` helpers operate on
``(B, C, *spatial)`` tensors and are what the network uses.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "identity_grid",
    "warp",
    "warp_batched",
    "affine_to_field",
    "apply_affine",
    "invert_affine",
    "compose_ground_truth",
    "compose_fields_batched",
    "resize_field",
    "resize_batched",
    "laplacian_energy",
    "flow_residual",
]

_SINGULAR_DET = 1e-12


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"invalid lattice shape {shape}")
    return shape


def _check_field(field: torch.Tensor) -> int:
    d = field.shape[0] if field.ndim else 0
    if field.ndim < 2 or d != field.ndim - 1:
        raise ValueError(
            f"field must have shape (d, *spatial) with d spatial axes, got {tuple(field.shape)}"
        )
    return d


def identity_grid(shape: Sequence[int], dtype=None, device=None) -> torch.Tensor:
    """Return the ``(d, *shape)`` grid whose channel ``c`` holds the ``c``-th voxel index."""
    shape = _check_shape(shape)
    dtype = dtype or torch.get_default_dtype()
    axes = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


# ---------------------------------------------------------------------------
# sampling


def _sample_batched(x: torch.Tensor, coords: torch.Tensor, interp: str) -> torch.Tensor:
    """Sample ``x`` (B, C, *S_in) at voxel ``coords`` (B, d, *S_out), replicate boundary."""
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    d = len(spatial)
    out_shape = coords.shape[2:]
    flat = x.reshape(B, C, -1)
    strides = [math.prod(spatial[c + 1:]) for c in range(d)]

    def gather(index: torch.Tensor) -> torch.Tensor:
        index = index.reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, index).reshape(B, C, *out_shape)

    if interp == "nearest":
        index = 0
        for c in range(d):
            pos = torch.nan_to_num(coords[:, c].detach(), nan=0.0).clamp(0, spatial[c] - 1)
            index = index + torch.round(pos).long() * strides[c]
        return gather(index)

    lo, hi, w_hi = [], [], []
    for c in range(d):
        pos = coords[:, c].clamp(0, spatial[c] - 1)
        # non-finite coordinates get a valid index; their NaN weights still propagate
        i0 = torch.floor(torch.nan_to_num(pos.detach(), nan=0.0)).clamp(0, max(spatial[c] - 2, 0))
        lo.append(i0.long())
        hi.append((i0.long() + 1).clamp(max=spatial[c] - 1))
        w_hi.append((pos - i0).unsqueeze(1))

    out = 0
    for corner in range(2 ** d):
        index = 0
        weight = 1
        for c in range(d):
            if (corner >> (d - 1 - c)) & 1:
                index = index + hi[c] * strides[c]
                weight = weight * w_hi[c]
            else:
                index = index + lo[c] * strides[c]
                weight = weight * (1 - w_hi[c])
        out = out + weight * gather(index)
    return out


def warp_batched(x: torch.Tensor, field: torch.Tensor, interp: str = "linear") -> torch.Tensor:
    """Pull-warp ``x`` (B, C, *S) by ``field`` (B, d, *S)."""
    if interp not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if field.shape[0] != x.shape[0] or field.shape[2:] != x.shape[2:] or field.shape[1] != x.ndim - 2:
        raise ValueError(
            f"image {tuple(x.shape)} and field {tuple(field.shape)} are incompatible"
        )
    grid = identity_grid(field.shape[2:], dtype=field.dtype, device=field.device)
    return _sample_batched(x, grid + field, interp)


def warp(img, field, interp: str = "linear", boundary: str = "replicate") -> torch.Tensor:
    """Warp ``img`` by ``field`` with pull semantics, ``out[x] = img[x + field[x]]``.

    ``img`` is either a scalar image with the field's spatial shape or a
    multi-channel image ``(C, *spatial)``; channels are warped identically.
    """
    if boundary != "replicate":
        raise ValueError(f"unsupported boundary {boundary!r}")
    img, field = _tensor(img), _tensor(field)
    d = _check_field(field)
    spatial = field.shape[1:]
    if img.shape[-d:] != spatial or img.ndim not in (d, d + 1):
        raise ValueError(f"image shape {tuple(img.shape)} does not match field {tuple(field.shape)}")
    scalar = img.ndim == d
    x = img[None, None] if scalar else img[None]
    if not x.is_floating_point():
        x = x.to(field.dtype)
    if field.dtype != x.dtype:
        field = field.to(x.dtype)
    out = warp_batched(x, field[None], interp)[0]
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# affine transforms


def _check_affine(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] not in (3, 4):
        raise ValueError(f"affine must be a 3x3 or 4x4 homogeneous matrix, got {A.shape}")
    return A


def apply_affine(A, coords: torch.Tensor) -> torch.Tensor:
    """Apply homogeneous ``A`` to coordinates of shape ``(d, *spatial)``."""
    A = _check_affine(A)
    d = A.shape[0] - 1
    if coords.shape[0] != d:
        raise ValueError(f"{d}-D affine applied to {coords.shape[0]}-D coordinates")
    M = torch.as_tensor(A[:d, :d], dtype=coords.dtype, device=coords.device)
    t = torch.as_tensor(A[:d, d], dtype=coords.dtype, device=coords.device)
    out = torch.einsum("ij,j...->i...", M, coords)
    return out + t.reshape(d, *([1] * (coords.ndim - 1)))


def affine_to_field(A, shape: Sequence[int], dtype=None) -> torch.Tensor:
    """Displacement field ``A x - x`` of an affine transform on a lattice."""
    A = _check_affine(A)
    shape = _check_shape(shape)
    if len(shape) != A.shape[0] - 1:
        raise ValueError(f"{A.shape[0] - 1}-D affine used with a {len(shape)}-D lattice")
    grid = identity_grid(shape, dtype=torch.float64)
    field = apply_affine(A, grid) - grid
    return field.to(dtype or torch.get_default_dtype())


def invert_affine(A) -> np.ndarray:
    A = _check_affine(A)
    if abs(np.linalg.det(A)) < _SINGULAR_DET:
        raise np.linalg.LinAlgError("affine transform is singular")
    inv = np.linalg.inv(A)
    inv[-1] = 0.0
    inv[-1, -1] = 1.0
    return inv


def compose_ground_truth(phi0, A1) -> torch.Tensor:
    """Displacement taking fixed-image coordinates to moving-image coordinates.

    With ``f0 = f o (Id + phi0)`` and ``f1 = f o A1`` this returns
    ``A1^-1 (x + phi0[x]) - x``, so that ``f1 o (Id + result) = f0``.
    The inverse is analytic; no numerical field inversion is involved.
    """
    phi0 = _tensor(phi0)
    _check_field(phi0)
    A1inv = invert_affine(A1)
    grid = identity_grid(phi0.shape[1:], dtype=torch.float64, device=phi0.device)
    mapped = apply_affine(A1inv, grid + phi0.to(torch.float64))
    return (mapped - grid).to(phi0.dtype)


def compose_fields_batched(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """Displacement of ``(Id + outer) o (Id + inner)``: ``inner + outer(x + inner)``."""
    return inner + warp_batched(outer, inner)


# ---------------------------------------------------------------------------
# resampling


def _interp_mode(d: int) -> str:
    return {2: "bilinear", 3: "trilinear"}[d]


def resize_batched(field: torch.Tensor, factor: float) -> torch.Tensor:
    """Resize a (B, d, *S) field by ``factor`` and rescale its values by ``factor``.

    Voxel centres follow the half-voxel convention, so a coarse voxel ``j``
    covers fine voxels ``[j/factor, (j+1)/factor)``; this is the geometry that
    makes multiplying displacements by ``factor`` exact.
    """
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    if factor == 1:
        return field
    spatial = field.shape[2:]
    size = [int(round(s * factor)) for s in spatial]
    if any(s < 1 for s in size):
        raise ValueError(f"resizing {tuple(spatial)} by {factor} gives a degenerate lattice")
    out = F.interpolate(field, size=size, mode=_interp_mode(len(spatial)), align_corners=False)
    return out * factor


def resize_field(field, factor: float) -> torch.Tensor:
    """Resample a ``(d, *spatial)`` field to ``factor`` times its extent, in output voxel units."""
    field = _tensor(field)
    _check_field(field)
    return resize_batched(field[None], factor)[0]


# ---------------------------------------------------------------------------
# differential operators


def laplacian_energy(field) -> torch.Tensor:
    """Mean over interior voxels of the squared Laplacian, summed over components.

    Central second differences are evaluated only where the full stencil is
    available, so the energy of any affine field is exactly zero.
    """
    field = _tensor(field)
    d = _check_field(field)
    if any(s < 3 for s in field.shape[1:]):
        raise ValueError(f"laplacian needs extents >= 3, got {tuple(field.shape[1:])}")
    inner = (slice(None),) + (slice(1, -1),) * d
    lap = -2 * d * field[inner]
    for c in range(d):
        for shift in (slice(0, -2), slice(2, None)):
            index = [slice(None)] + [slice(1, -1)] * d
            index[c + 1] = shift
            lap = lap + field[tuple(index)]
    return (lap ** 2).sum(0).mean()


def flow_residual(f0, f1, field) -> torch.Tensor:
    """Per-voxel ``|grad f1 . field - (f0 - f1)|``, the linearised brightness-constancy error."""
    f0, f1, field = _tensor(f0), _tensor(f1), _tensor(field)
    d = _check_field(field)
    if f0.shape != f1.shape or f1.shape != field.shape[1:]:
        raise ValueError("f0, f1 and field must share a spatial shape")
    grads = torch.gradient(f1.to(field.dtype), dim=tuple(range(d)))
    lhs = sum(g * field[c] for c, g in enumerate(grads))
    return (lhs - (f0 - f1).to(field.dtype)).abs()
