"""Flow-colour images and metric plots."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from matplotlib.figure import Figure

__all__ = ["color_wheel", "flow_to_color", "epe_map", "plot_curves", "plot_fields"]


def color_wheel() -> np.ndarray:
    """The 55-entry Middlebury optical-flow colour wheel, RGB in [0, 255]."""
    segments = [(15, (255, 0, 0), (255, 255, 0)),    # red -> yellow
                (6, (255, 255, 0), (0, 255, 0)),     # yellow -> green
                (4, (0, 255, 0), (0, 255, 255)),     # green -> cyan
                (11, (0, 255, 255), (0, 0, 255)),    # cyan -> blue
                (13, (0, 0, 255), (255, 0, 255)),    # blue -> magenta
                (6, (255, 0, 255), (255, 0, 0))]     # magenta -> red
    rows = []
    for n, start, stop in segments:
        t = np.arange(n)[:, None] / n
        rows.append(np.asarray(start) * (1 - t) + np.asarray(stop) * t)
    return np.floor(np.concatenate(rows))


def flow_to_color(field, max_norm: float | None = None) -> np.ndarray:
    """Render a 2D field ``(2, H, W)`` as uint8 RGB; hue encodes direction, saturation magnitude.

    Channel 0 (rows) is treated as the vertical component. Magnitudes are
    normalised by the image's own maximum unless ``max_norm`` is given.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[0] != 2:
        raise ValueError("flow_to_color needs a 2D field of shape (2, H, W)")
    v, u = field
    mag = np.hypot(u, v)
    scale = max_norm if max_norm is not None else mag.max()
    if scale > 0:
        u, v, mag = u / scale, v / scale, mag / scale
    wheel = color_wheel()
    n = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % n
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255
    radius = np.clip(mag, 0, 1)[..., None]
    col = 1 - radius * (1 - col)
    return np.floor(255 * col).astype(np.uint8)


def epe_map(pred, target) -> np.ndarray:
    """Per-voxel end-point error ``|pred - target|_2``."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return np.sqrt(((pred - target) ** 2).sum(0))


def plot_curves(records: dict, path, metrics: Sequence[str] = ("dice", "epe")):
    """Validation curves (one line per run) in the style of a training-accuracy figure.

    ``records`` maps run names to lists of validation rows with an
    ``iteration`` key and one key per metric.
    """
    present = [m for m in metrics if any(m in row for rows in records.values() for row in rows)]
    fig = Figure(figsize=(5 * len(present), 3.5))
    axes = fig.subplots(1, len(present), squeeze=False)
    for ax, metric in zip(axes[0], present):
        for name, rows in records.items():
            pts = [(r["iteration"], r[metric]) for r in rows if metric in r]
            if pts:
                ax.plot(*zip(*pts), label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean " + metric.upper())
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def plot_fields(rows: dict, path, max_norm: float | None = None):
    """Grid of flow-colour renderings; ``rows`` maps a label to a ``(2, H, W)`` field."""
    if max_norm is None:
        max_norm = max(float(np.hypot(*np.asarray(f)).max()) for f in rows.values()) or 1.0
    fig = Figure(figsize=(3 * len(rows), 3.2))
    axes = fig.subplots(1, len(rows), squeeze=False)
    for ax, (name, f) in zip(axes[0], rows.items()):
        ax.imshow(flow_to_color(f, max_norm))
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
