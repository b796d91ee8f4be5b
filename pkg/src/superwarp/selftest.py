"""Installation self-check behind `superwarp selftest`."""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch

from . import fieldcore as fc
from .data import synthetic_dataset
from .network import ModelConfig
from .objectives import LossConfig, dice_loss, epe, mse_flow_loss
from .synthgen import IntensityParams, SpatialParams, affine_from_params
from .trainer import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train

SMOKE_ITERATIONS = 200


def _check_compose():
    rng = np.random.default_rng(0)
    for shape in ((8, 8), (9, 7)):
        phi0 = torch.from_numpy(rng.uniform(-2, 2, (2, *shape)))
        A = affine_from_params(
            {"translate": rng.uniform(-3, 3, 2), "scale": rng.uniform(0.8, 1.2, 2),
             "rotate": rng.uniform(-30, 30, 1), "shear": rng.uniform(-0.1, 0.1, 1)}, shape)
        gt = fc.compose_ground_truth(phi0, A).numpy()
        Ainv = np.linalg.inv(A)
        for i in range(shape[0]):
            for j in range(shape[1]):
                x = np.array([i, j, 1.0])
                x[:2] += phi0[:, i, j].numpy()
                assert np.abs((Ainv @ x)[:2] - [i, j] - gt[:, i, j]).max() < 1e-5


def _check_warp():
    img = torch.rand(6, 7, dtype=torch.float64)
    assert torch.equal(fc.warp(img, torch.zeros(2, 6, 7, dtype=torch.float64)), img)
    ramp = torch.arange(8.0, dtype=torch.float64)[:, None].expand(8, 8).clone()
    field = torch.zeros(2, 8, 8, dtype=torch.float64)
    field[0] = 0.5
    assert torch.allclose(fc.warp(ramp, field)[:7], ramp[:7] + 0.5)


def _check_resize_and_laplacian():
    g = fc.identity_grid((16, 16), dtype=torch.float64)
    lin = torch.stack([0.3 * g[0] + 0.1 * g[1], -0.2 * g[1] + 1])
    back = fc.resize_field(fc.resize_field(lin, 0.5), 2)
    assert (back - lin)[:, 2:-2, 2:-2].abs().max() < 1e-5
    quad = torch.stack([g[0] ** 2, torch.zeros(16, 16, dtype=torch.float64)])
    assert abs(float(fc.laplacian_energy(quad)) - 4.0) < 1e-12
    assert float(fc.laplacian_energy(lin)) < 1e-20


def _check_gradients():
    rng = torch.Generator().manual_seed(0)
    img = torch.rand(1, 1, 6, 6, dtype=torch.float64, generator=rng, requires_grad=True)
    field = (torch.rand(1, 2, 6, 6, dtype=torch.float64, generator=rng) * 2 - 1).mul(0.7).requires_grad_()
    assert torch.autograd.gradcheck(fc.warp_batched, (img, field), eps=1e-6, atol=1e-6, rtol=1e-3)
    a = torch.randn(2, 6, 6, dtype=torch.float64, generator=rng, requires_grad=True)
    b = torch.randn(2, 6, 6, dtype=torch.float64, generator=rng)
    assert torch.autograd.gradcheck(lambda p: mse_flow_loss([p], [b]), (a,), rtol=1e-3)
    assert torch.autograd.gradcheck(lambda p: epe(p, b, eps=1e-6), (a,), rtol=1e-3)
    seg = torch.zeros(2, 6, 6, dtype=torch.float64)
    seg[0, :3] = 1
    seg[1] = 1 - seg[0]
    f = (torch.rand(2, 6, 6, dtype=torch.float64, generator=rng) * 0.8 - 0.4).requires_grad_()
    assert torch.autograd.gradcheck(lambda p: dice_loss(seg, seg.flip(1), p, 0.5), (f,), rtol=1e-3)


def _smoke_cfg() -> TrainConfig:
    return TrainConfig(
        total_iterations=SMOKE_ITERATIONS,
        warmstart_iterations=20,
        lr_start=1e-3,
        lr_end=1e-5,
        validation_every=100,
        model=ModelConfig(levels=3, features_per_level=[8, 12, 16]),
        spatial=SpatialParams(translate=2, scale=(0.95, 1.05), rotate=5, elastic=4),
        intensity=IntensityParams(),
        loss=LossConfig(),
    )


def _check_smoke_train(out: Path):
    data = synthetic_dataset(4, (32, 32), seed=0)
    a = train(_smoke_cfg(), data, out_dir=out / "smoke_a")
    b = train(_smoke_cfg(), data)
    assert a.losses == b.losses, "seeded runs diverged"
    assert all(np.isfinite(a.losses))
    model, meta = load_checkpoint(a.checkpoints[0])
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])
    bad = out / "corrupt.pt"
    bad.write_bytes(Path(a.checkpoints[0]).read_bytes()[:100])
    try:
        load_checkpoint(bad)
    except CheckpointError:
        pass
    else:
        raise AssertionError("corrupted checkpoint was accepted")


CHECKS = {
    "compose_ground_truth oracle": _check_compose,
    "warp identity and subvoxel shift": _check_warp,
    "resize round trip and laplacian": _check_resize_and_laplacian,
    "gradient checks": _check_gradients,
}


def run_selftest(out=None, smoke: bool = True) -> bool:
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(out) if out is not None else Path(tmp)
        out.mkdir(parents=True, exist_ok=True)
        checks = dict(CHECKS)
        if smoke:
            checks[f"{SMOKE_ITERATIONS}-iteration smoke train"] = lambda: _check_smoke_train(out)
        for name, check in checks.items():
            try:
                check()
                print(f"PASS  {name}")
            except Exception as exc:  # noqa: BLE001 - reported per check
                ok = False
                print(f"FAIL  {name}: {exc!r}")
    return ok
