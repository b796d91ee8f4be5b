"""Synthetic supervised training triplets with exactly known target fields.

A source image ``f`` is warped twice: by ``phi0`` (affine plus a small
elastic component) into the fixed image, and by a pure affine ``A1`` into the
moving image. Because ``A1`` is affine the target field has a closed form,
see :func:`superwarp.fieldcore.compose_ground_truth`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .fieldcore import affine_to_field, compose_ground_truth, identity_grid, resize_field, warp

__all__ = [
    "SpatialParams",
    "IntensityParams",
    "TrainingTriplet",
    "draw_affine_params",
    "affine_from_params",
    "sample_affine",
    "sample_elastic",
    "augment_intensity",
    "make_training_pair",
    "pyramid_targets",
    "derive_seed",
    "valid_sampling_mask",
    "reconstruction_error",
]


@dataclass
class SpatialParams:
    """Ranges for random spatial transforms.

    Translations are in voxels, rotations in degrees, shear entries are
    dimensionless. ``elastic`` and ``elastic_spacing`` are given in voxels of
    a ``reference_extent``-sized lattice and scale with the actual image.
    ``max_displacement`` rejects draws whose target exceeds the bound.
    """

    translate: float = 12.0
    scale: tuple[float, float] = (0.75, 1.25)
    rotate: float = 30.0
    shear: float = 0.012
    elastic: float = 4.0
    elastic_spacing: float = 32.0
    reference_extent: int = 256
    p_translate: float = 1.0
    p_scale: float = 1.0
    p_rotate: float = 1.0
    p_shear: float = 1.0
    p_elastic: float = 1.0
    max_displacement: Optional[float] = None

    def __post_init__(self):
        self.scale = tuple(self.scale)
        if self.scale[0] > self.scale[1] or self.scale[0] <= 0:
            raise ValueError(f"bad scale range {self.scale}")
        for name in ("translate", "rotate", "shear", "elastic"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} range must be nonnegative")
        for name in ("p_translate", "p_scale", "p_rotate", "p_shear", "p_elastic"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "SpatialParams":
        return cls(p_translate=0, p_scale=0, p_rotate=0, p_shear=0, p_elastic=0)


@dataclass
class IntensityParams:
    noise_std: tuple[float, float] = (0.0, 0.05)
    multiply: tuple[float, float] = (0.75, 1.25)
    contrast: tuple[float, float] = (0.75, 1.25)
    gamma: tuple[float, float] = (0.70, 1.50)
    p_noise: float = 0.5
    p_multiply: float = 0.5
    p_contrast: float = 0.5
    p_gamma: float = 0.5

    def __post_init__(self):
        for name in ("noise_std", "multiply", "contrast", "gamma"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"bad {name} range {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        for name in ("p_noise", "p_multiply", "p_contrast", "p_gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def none(cls) -> "IntensityParams":
        return cls(p_noise=0, p_multiply=0, p_contrast=0, p_gamma=0)


@dataclass
class TrainingTriplet:
    fixed: torch.Tensor
    moving: torch.Tensor
    target: torch.Tensor
    seed: int
    fixed_clean: Optional[torch.Tensor] = None
    moving_clean: Optional[torch.Tensor] = None
    fixed_labels: Optional[torch.Tensor] = None
    moving_labels: Optional[torch.Tensor] = None
    phi0: Optional[torch.Tensor] = None
    moving_affine: Optional[np.ndarray] = None


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed for a tuple of integer keys (e.g. run seed, iteration)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# spatial


def draw_affine_params(params: SpatialParams, rng: np.random.Generator, dims: int) -> dict:
    """Draw the individual transform parameters; disabled transforms get neutral values.

    Every value is drawn regardless of its probability so that the random
    stream does not depend on which transforms fire.
    """
    n_rot = 1 if dims == 2 else 3
    n_shear = dims * (dims - 1) // 2
    translate = rng.uniform(-params.translate, params.translate, dims)
    scale = rng.uniform(*params.scale, dims)
    rotate = rng.uniform(-params.rotate, params.rotate, n_rot)
    shear = rng.uniform(-params.shear, params.shear, n_shear)
    fire = rng.random(4) < [params.p_translate, params.p_scale, params.p_rotate, params.p_shear]
    return {
        "translate": translate if fire[0] else np.zeros(dims),
        "scale": scale if fire[1] else np.ones(dims),
        "rotate": rotate if fire[2] else np.zeros(n_rot),
        "shear": shear if fire[3] else np.zeros(n_shear),
    }


def _rotation(angles_deg: np.ndarray, dims: int) -> np.ndarray:
    a = np.deg2rad(angles_deg)
    if dims == 2:
        c, s = math.cos(a[0]), math.sin(a[0])
        return np.array([[c, -s], [s, c]])
    R = np.eye(3)
    for angle, (i, j) in zip(a, [(1, 2), (0, 2), (0, 1)]):
        G = np.eye(3)
        c, s = math.cos(angle), math.sin(angle)
        G[i, i] = G[j, j] = c
        G[i, j], G[j, i] = -s, s
        R = R @ G
    return R


def affine_from_params(p: dict, shape: Sequence[int]) -> np.ndarray:
    """Homogeneous matrix ``T(c + t) R S H T(-c)`` about the lattice centre ``c``."""
    dims = len(shape)
    centre = (np.asarray(shape, dtype=np.float64) - 1) / 2
    H = np.eye(dims)
    H[np.triu_indices(dims, 1)] = p["shear"]
    linear = _rotation(p["rotate"], dims) @ np.diag(p["scale"]) @ H
    A = np.eye(dims + 1)
    A[:dims, :dims] = linear
    A[:dims, dims] = centre + p["translate"] - linear @ centre
    return A


def sample_affine(params: SpatialParams, rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    return affine_from_params(draw_affine_params(params, rng, len(shape)), shape)


def sample_elastic(
    shape: Sequence[int],
    amplitude: float,
    control_spacing: float,
    rng: np.random.Generator,
    reference_extent: int = 256,
) -> torch.Tensor:
    """Smooth random field: uniform control values on a coarse grid, linearly upsampled.

    ``amplitude`` is in voxels of a ``reference_extent`` lattice; the actual
    bound is ``amplitude * min(shape) / reference_extent``.
    """
    shape = tuple(int(s) for s in shape)
    if control_spacing < 2:
        raise ValueError(f"control spacing must be >= 2, got {control_spacing}")
    n = [int((s - 1) // control_spacing) + 1 for s in shape]
    if any(k < 2 for k in n):
        raise ValueError(f"control grid {n} for lattice {shape} has fewer than 2 points per axis")
    bound = amplitude * min(shape) / reference_extent
    control = rng.uniform(-bound, bound, (len(shape), *n))
    mode = "bilinear" if len(shape) == 2 else "trilinear"
    out = F.interpolate(torch.from_numpy(control)[None], size=shape, mode=mode, align_corners=True)
    return out[0].to(torch.get_default_dtype())


# ---------------------------------------------------------------------------
# intensity


def augment_intensity(img, params: IntensityParams, rng: np.random.Generator) -> torch.Tensor:
    """Noise, brightness multiplication, mean-anchored contrast, then gamma, each with its probability."""
    img = torch.as_tensor(img).clone()
    fire = rng.random(4) < [params.p_noise, params.p_multiply, params.p_contrast, params.p_gamma]
    std = rng.uniform(*params.noise_std)
    mult = rng.uniform(*params.multiply)
    contrast = rng.uniform(*params.contrast)
    gamma = rng.uniform(*params.gamma)
    if fire[0]:
        noise = rng.standard_normal(tuple(img.shape)) * std
        img = img + torch.from_numpy(noise).to(img.dtype)
    if fire[1]:
        img = img * mult
    if fire[2]:
        mean = img.mean()
        img = (img - mean) * contrast + mean
    if fire[3]:
        img = img.clamp(0, 1) ** gamma
    return img


# ---------------------------------------------------------------------------
# triplets


def _spatial_draw(f_shape, sp: SpatialParams, rng):
    dims = len(f_shape)
    A0 = sample_affine(sp, rng, f_shape)
    phi0 = affine_to_field(A0, f_shape)
    spacing = sp.elastic_spacing * min(f_shape) / sp.reference_extent
    elastic = sample_elastic(f_shape, sp.elastic, max(spacing, 2.0), rng, sp.reference_extent)
    if rng.random() < sp.p_elastic:
        phi0 = phi0 + elastic
    A1 = sample_affine(sp, rng, f_shape)
    return phi0, A1


def make_training_pair(
    f,
    sp: SpatialParams,
    ip: IntensityParams,
    seed: int,
    zero_displacement: bool = False,
    labels=None,
    max_tries: int = 100,
) -> TrainingTriplet:
    """Synthesise ``(fixed, moving, target)`` from one image.

    ``zero_displacement`` gives the warm-start curriculum: identical geometry,
    independent intensity augmentation, exactly zero target.
    """
    f = torch.as_tensor(f).to(torch.get_default_dtype())
    shape = tuple(f.shape)
    dims = len(shape)
    rng = np.random.default_rng(seed)

    if zero_displacement:
        phi0 = torch.zeros((dims, *shape))
        A1 = np.eye(dims + 1)
    else:
        for _ in range(max_tries):
            phi0, A1 = _spatial_draw(shape, sp, rng)
            target = compose_ground_truth(phi0, A1)
            if sp.max_displacement is None or target.abs().max() <= sp.max_displacement:
                break
        else:
            raise RuntimeError(
                f"no draw within max_displacement={sp.max_displacement} after {max_tries} tries"
            )

    if zero_displacement:
        f0 = f.clone()
        f1 = f.clone()
        target = torch.zeros((dims, *shape))
    else:
        f0 = warp(f, phi0)
        f1 = warp(f, affine_to_field(A1, shape))

    fixed = augment_intensity(f0, ip, rng)
    moving = augment_intensity(f1, ip, rng)

    fixed_labels = moving_labels = None
    if labels is not None:
        labels = torch.as_tensor(labels)
        fixed_labels = warp(labels, phi0, interp="nearest").to(labels.dtype)
        moving_labels = warp(labels, affine_to_field(A1, shape), interp="nearest").to(labels.dtype)

    return TrainingTriplet(
        fixed=fixed,
        moving=moving,
        target=target,
        seed=int(seed),
        fixed_clean=f0,
        moving_clean=f1,
        fixed_labels=fixed_labels,
        moving_labels=moving_labels,
        phi0=phi0,
        moving_affine=A1,
    )


def pyramid_targets(target, levels: int) -> list[torch.Tensor]:
    """Target resampled to every decoder level, coarsest first, in each level's voxel units."""
    target = torch.as_tensor(target)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    step = 2 ** (levels - 1)
    if any(s % step for s in target.shape[1:]):
        raise ValueError(f"extents {tuple(target.shape[1:])} not divisible by {step}")
    return [resize_field(target, 2.0 ** (lvl - levels + 1)) for lvl in range(levels)]


def valid_sampling_mask(triplet: TrainingTriplet, margin: float = 0.0) -> torch.Tensor:
    """Voxels whose source coordinates, for both the fixed image and the reconstruction
    through the target, stay inside the lattice (so no boundary clamping occurred)."""
    shape = tuple(triplet.target.shape[1:])
    grid = identity_grid(shape, dtype=torch.float64)
    upper = torch.tensor(shape, dtype=torch.float64).reshape(-1, *([1] * len(shape))) - 1
    ok = torch.ones(shape, dtype=torch.bool)
    for disp in (triplet.target, triplet.phi0):
        if disp is None:
            continue
        pos = grid + disp.to(torch.float64)
        ok &= ((pos >= margin) & (pos <= upper - margin)).all(0)
    return ok


def reconstruction_error(triplet: TrainingTriplet) -> float:
    """MSE between the moving clean image warped by the target and the fixed clean image,
    over :func:`valid_sampling_mask`."""
    rec = warp(triplet.moving_clean, triplet.target)
    mask = valid_sampling_mask(triplet)
    if not mask.any():
        return float("nan")
    return float(((rec - triplet.fixed_clean)[mask] ** 2).mean())
