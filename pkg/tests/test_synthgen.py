import numpy as np
import pytest
import torch
from scipy import ndimage

from superwarp import fieldcore as fc
from superwarp.data import synthetic_texture
from superwarp.synthgen import (
    IntensityParams,
    SpatialParams,
    affine_from_params,
    augment_intensity,
    draw_affine_params,
    make_training_pair,
    pyramid_targets,
    reconstruction_error,
    sample_affine,
    sample_elastic,
)


def only(**kwargs):
    """IntensityParams with every augmentation off except the given ones (probability 1)."""
    params = dict(p_noise=0, p_multiply=0, p_contrast=0, p_gamma=0)
    for name, rng in kwargs.items():
        params[name] = (rng, rng)
        params["p_" + name.replace("_std", "")] = 1.0
    return IntensityParams(**params)


@pytest.fixture
def smooth_image():
    rng = np.random.default_rng(11)
    return torch.from_numpy(synthetic_texture((64, 64), rng).astype(np.float32))


def test_default_ranges():
    sp, ip = SpatialParams(), IntensityParams()
    assert (sp.translate, sp.scale, sp.rotate, sp.shear, sp.elastic) == (12, (0.75, 1.25), 30, 0.012, 4)
    assert (sp.p_translate, sp.p_scale, sp.p_rotate, sp.p_shear, sp.p_elastic) == (1, 1, 1, 1, 1)
    assert ip.noise_std == (0, 0.05) and ip.multiply == (0.75, 1.25)
    assert ip.contrast == (0.75, 1.25) and ip.gamma == (0.70, 1.50)
    assert (ip.p_noise, ip.p_multiply, ip.p_contrast, ip.p_gamma) == (0.5, 0.5, 0.5, 0.5)


def test_param_validation():
    with pytest.raises(ValueError):
        SpatialParams(scale=(1.2, 0.8))
    with pytest.raises(ValueError):
        SpatialParams(p_rotate=1.5)
    with pytest.raises(ValueError):
        IntensityParams(gamma=(1.5, 0.7))


def test_sample_affine_all_disabled_is_identity():
    A = sample_affine(SpatialParams.identity(), np.random.default_rng(0), (32, 32))
    np.testing.assert_allclose(A, np.eye(3), atol=1e-15)


def test_translation_only_matrix():
    p = {"translate": np.array([5.0, -3.0]), "scale": np.ones(2), "rotate": np.zeros(1), "shear": np.zeros(1)}
    A = affine_from_params(p, (40, 30))
    np.testing.assert_allclose(A[:, 2], [5, -3, 1], atol=1e-12)
    np.testing.assert_allclose(A[:2, :2], np.eye(2), atol=1e-15)


def test_rotation_is_about_lattice_centre():
    p = {"translate": np.zeros(2), "scale": np.ones(2), "rotate": np.array([25.0]), "shear": np.zeros(1)}
    A = affine_from_params(p, (33, 21))
    centre = np.array([16.0, 10.0, 1.0])
    np.testing.assert_allclose(A @ centre, centre, atol=1e-12)


def test_monte_carlo_ranges():
    rng = np.random.default_rng(0)
    sp = SpatialParams()
    draws = [draw_affine_params(sp, rng, 2) for _ in range(10_000)]
    t = np.array([d["translate"] for d in draws])
    r = np.array([d["rotate"] for d in draws])
    s = np.array([d["scale"] for d in draws])
    h = np.array([d["shear"] for d in draws])
    assert np.abs(t).max() <= 12 and np.abs(t).max() > 11.9
    assert np.abs(r).max() <= 30 and np.abs(r).max() > 29.9
    assert s.min() >= 0.75 and s.max() <= 1.25
    assert np.abs(h).max() <= 0.012
    draws3 = [draw_affine_params(sp, rng, 3) for _ in range(1000)]
    assert all(np.abs(d["rotate"]).max() <= 30 for d in draws3)


def test_sample_affine_deterministic():
    a = sample_affine(SpatialParams(), np.random.default_rng(5), (16, 16, 16))
    b = sample_affine(SpatialParams(), np.random.default_rng(5), (16, 16, 16))
    np.testing.assert_array_equal(a, b)


def test_elastic_amplitude_zero():
    f = sample_elastic((64, 64), 0.0, 32, np.random.default_rng(0))
    assert not f.any()


@pytest.mark.parametrize("extent,bound", [(256, 4.0), (128, 2.0)])
def test_elastic_amplitude_bound(extent, bound):
    rng = np.random.default_rng(1)
    peak = max(float(sample_elastic((extent, extent), 4.0, 32, rng).abs().max()) for _ in range(20))
    assert peak <= bound
    assert peak > 0.8 * bound


def test_elastic_is_smooth():
    f = sample_elastic((128, 128), 4.0, 16, np.random.default_rng(2))
    steps = f[:, 1:] - f[:, :-1]
    assert float(steps.abs().max()) <= 2 * 2.0 / 16 + 1e-6


def test_elastic_invalid_control_grid():
    with pytest.raises(ValueError):
        sample_elastic((8, 8), 4.0, 32, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_elastic((64, 64), 4.0, 1, np.random.default_rng(0))


def test_augment_disabled_is_identity():
    img = torch.rand(16, 16)
    assert torch.equal(augment_intensity(img, IntensityParams.none(), np.random.default_rng(0)), img)


def test_contrast_fixed_point_of_constant():
    img = torch.full((8, 8), 0.5)
    out = augment_intensity(img, only(contrast=0.8), np.random.default_rng(0))
    assert torch.allclose(out, img)


def test_gamma_of_constant():
    out = augment_intensity(torch.full((8, 8), 0.25), only(gamma=2.0), np.random.default_rng(0))
    assert torch.allclose(out, torch.tensor(0.0625))


def test_multiply_and_contrast_preserve_mean_relation():
    img = torch.rand(16, 16, dtype=torch.float64)
    out = augment_intensity(img, only(multiply=1.2, contrast=0.9), np.random.default_rng(0))
    expected = (1.2 * img - 1.2 * img.mean()) * 0.9 + 1.2 * img.mean()
    assert torch.allclose(out, expected)


def test_noise_std():
    img = torch.zeros(256, 256, dtype=torch.float64)
    out = augment_intensity(img, only(noise_std=0.05), np.random.default_rng(0))
    assert float(out.std()) == pytest.approx(0.05, rel=0.02)


def test_identity_draws_give_identity_triplet(smooth_image):
    t = make_training_pair(smooth_image, SpatialParams.identity(), IntensityParams.none(), seed=3)
    assert torch.equal(t.fixed, smooth_image) and torch.equal(t.moving, smooth_image)
    assert not t.target.any()


def test_curriculum_triplet(smooth_image):
    ip = IntensityParams(p_noise=1, p_multiply=1, p_contrast=1, p_gamma=1)
    t = make_training_pair(smooth_image, SpatialParams(), ip, seed=4, zero_displacement=True)
    assert not t.target.any()
    assert not torch.equal(t.fixed, t.moving)
    assert torch.equal(t.fixed_clean, t.moving_clean)


@pytest.mark.parametrize("seed", range(6))
def test_random_triplet_reconstruction(smooth_image, seed):
    t = make_training_pair(smooth_image, SpatialParams(), IntensityParams(), seed=seed)
    assert reconstruction_error(t) < 1e-3


def test_seed_determinism(smooth_image):
    labels = torch.from_numpy((smooth_image.numpy() > 0.5).astype(np.int64))
    a = make_training_pair(smooth_image, SpatialParams(), IntensityParams(), seed=99, labels=labels)
    b = make_training_pair(smooth_image, SpatialParams(), IntensityParams(), seed=99, labels=labels)
    for name in ("fixed", "moving", "target", "fixed_labels", "moving_labels"):
        assert torch.equal(getattr(a, name), getattr(b, name))
    c = make_training_pair(smooth_image, SpatialParams(), IntensityParams(), seed=100)
    assert not torch.equal(a.target, c.target)


def test_labels_follow_geometry(smooth_image):
    labels = torch.from_numpy((smooth_image.numpy() > 0.5).astype(np.int64))
    t = make_training_pair(smooth_image, SpatialParams(), IntensityParams.none(), seed=1, labels=labels)
    assert t.fixed_labels.dtype == torch.int64
    assert set(torch.unique(t.fixed_labels).tolist()) <= {0, 1}
    assert torch.equal(t.fixed_labels, fc.warp(labels, t.phi0, "nearest").long())


def test_max_displacement_rejection(smooth_image):
    sp = SpatialParams(translate=3, scale=(0.95, 1.05), rotate=4, max_displacement=5.0)
    for seed in range(5):
        t = make_training_pair(smooth_image, sp, IntensityParams.none(), seed=seed)
        assert float(t.target.abs().max()) <= 5.0


def test_pyramid_single_level():
    target = torch.randn(2, 16, 16)
    (only_level,) = pyramid_targets(target, 1)
    assert torch.equal(only_level, target)


def test_pyramid_constant_values():
    target = torch.full((2, 16, 16), 4.0)
    levels = pyramid_targets(target, 3)
    assert [tuple(l.shape) for l in levels] == [(2, 4, 4), (2, 8, 8), (2, 16, 16)]
    for value, level in zip((1.0, 2.0, 4.0), levels):
        assert torch.allclose(level, torch.tensor(value))


def test_pyramid_consistent_with_resize():
    rng = np.random.default_rng(0)
    target = torch.from_numpy(ndimage.gaussian_filter(rng.standard_normal((2, 32, 32)), (0, 3, 3)))
    levels = pyramid_targets(target, 4)
    assert torch.equal(levels[-1], target)
    for k, level in enumerate(levels[:-1]):
        assert torch.equal(level, fc.resize_field(target, 2.0 ** (k - 3)))


def test_pyramid_not_divisible():
    with pytest.raises(ValueError):
        pyramid_targets(torch.zeros(2, 12, 12), 4)
