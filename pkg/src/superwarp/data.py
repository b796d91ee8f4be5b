"""Image collections: synthetic textures and manifest-described datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .io import normalize, read_image

__all__ = ["Sample", "Dataset", "synthetic_texture", "synthetic_labels", "synthetic_dataset", "load_manifest"]


@dataclass
class Sample:
    image: torch.Tensor
    labels: Optional[torch.Tensor] = None
    name: str = ""


@dataclass
class Dataset:
    samples: list[Sample]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def has_labels(self) -> bool:
        return all(s.labels is not None for s in self.samples)


def synthetic_texture(
    shape: Sequence[int],
    rng: np.random.Generator,
    sigmas: Sequence[float] = (1.5, 3.0, 6.0, 12.0),
) -> np.ndarray:
    """Band-limited random texture in [0, 1]: a random mix of smoothed white-noise octaves."""
    out = np.zeros(shape)
    for sigma in sigmas:
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
        out += rng.uniform(0.5, 1.5) * layer / (layer.std() + 1e-12)
    return normalize(out)


def synthetic_labels(
    shape: Sequence[int], rng: np.random.Generator, n_labels: int = 4, sigma: float = 8.0
) -> np.ndarray:
    """Piecewise-constant label map from quantiles of a smooth random field (labels 0..n-1)."""
    smooth = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    edges = np.quantile(smooth, np.linspace(0, 1, n_labels + 1)[1:-1])
    return np.digitize(smooth, edges).astype(np.int64)


def synthetic_dataset(
    n: int, shape: Sequence[int], seed: int, with_labels: bool = False, n_labels: int = 4
) -> Dataset:
    """``n`` textures (optionally with label maps whose boundaries carry intensity edges)."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img = synthetic_texture(shape, rng)
        labels = None
        if with_labels:
            lab = synthetic_labels(shape, rng, n_labels)
            img = normalize(0.6 * img + 0.4 * ndimage.gaussian_filter(lab / max(n_labels - 1, 1), 1.5))
            labels = torch.from_numpy(lab)
        samples.append(Sample(torch.from_numpy(img.astype(np.float32)), labels, f"texture_{i:05d}"))
    return Dataset(samples, seed)


def load_manifest(path) -> Dataset:
    """Dataset from a JSON manifest ``{"images": [...], "labels": [...], "seed": int}``.

    Paths are relative to the manifest. Unreadable entries are collected and
    reported together in one ``ValueError``.
    """
    path = Path(path)
    manifest = json.loads(path.read_text())
    unknown = set(manifest) - {"images", "labels", "seed"}
    if unknown:
        raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
    images = manifest.get("images")
    if not isinstance(images, list) or not images:
        raise ValueError("manifest must list at least one image")
    labels = manifest.get("labels")
    if labels is not None and len(labels) != len(images):
        raise ValueError("labels list must match images list")
    samples, errors = [], []
    for i, rel in enumerate(images):
        try:
            img = torch.from_numpy(normalize(read_image(path.parent / rel)))
            lab = None
            if labels is not None and labels[i] is not None:
                lab = torch.from_numpy(np.rint(read_image(path.parent / labels[i])).astype(np.int64))
                if lab.shape != img.shape:
                    raise ValueError(f"label shape {tuple(lab.shape)} != image shape {tuple(img.shape)}")
            samples.append(Sample(img, lab, str(rel)))
        except Exception as exc:  # noqa: BLE001 - itemised report below
            errors.append(f"{rel}: {exc}")
    if errors:
        raise ValueError("unreadable manifest entries:\n  " + "\n  ".join(errors))
    return Dataset(samples, int(manifest.get("seed", 0)))
