import json
import struct

import nibabel as nib
import numpy as np
import pytest

from superwarp.data import load_manifest, synthetic_dataset
from superwarp.io import MAGIC, FormatError, load_tensor, normalize, read_image, save_tensor, write_png


@pytest.mark.parametrize("shape", [(2, 5, 7), (3, 4, 4, 4), (6,)])
def test_swtensor_round_trip(tmp_path, shape):
    a = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    save_tensor(tmp_path / "a.swt", a)
    np.testing.assert_array_equal(load_tensor(tmp_path / "a.swt"), a)


def test_swtensor_layout(tmp_path):
    save_tensor(tmp_path / "a.swt", np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = (tmp_path / "a.swt").read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack_from("<BB2I", raw, 8) == (0, 2, 2, 3)
    assert np.frombuffer(raw[18:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_swtensor_bytes_are_reproducible(tmp_path):
    a = np.random.default_rng(1).standard_normal((2, 8, 8))
    save_tensor(tmp_path / "a.swt", a)
    save_tensor(tmp_path / "b.swt", a)
    assert (tmp_path / "a.swt").read_bytes() == (tmp_path / "b.swt").read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXTENSOR" + b[8:],
    lambda b: b[:-4],
    lambda b: b[:8] + bytes([7]) + b[9:],
    lambda b: b[:9],
])
def test_swtensor_rejects_corruption(tmp_path, mutate):
    save_tensor(tmp_path / "a.swt", np.zeros((2, 3), np.float32))
    (tmp_path / "a.swt").write_bytes(mutate((tmp_path / "a.swt").read_bytes()))
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "a.swt")


def test_png_round_trip(tmp_path):
    img = np.linspace(0, 1, 64).reshape(8, 8)
    write_png(tmp_path / "a.png", img)
    back = normalize(read_image(tmp_path / "a.png"))
    assert np.abs(back - img).max() <= 1 / 255
    write_png(tmp_path / "b.png", img, bits=16)
    assert np.abs(normalize(read_image(tmp_path / "b.png")) - img).max() <= 1 / 65535 + 1e-6


def test_nifti_read(tmp_path):
    vol = np.random.default_rng(0).random((6, 7, 5)).astype(np.float32)
    nib.save(nib.Nifti1Image(vol, np.eye(4)), str(tmp_path / "v.nii.gz"))
    np.testing.assert_allclose(read_image(tmp_path / "v.nii.gz"), vol)
    nib.save(nib.Nifti1Image(vol[..., :1], np.eye(4)), str(tmp_path / "s.nii"))
    assert read_image(tmp_path / "s.nii").shape == (6, 7)


def test_unknown_extension(tmp_path):
    with pytest.raises(FormatError):
        read_image(tmp_path / "x.jpg")


def test_normalize_constant():
    assert not normalize(np.full((3, 3), 7.0)).any()


def test_synthetic_dataset_deterministic():
    a = synthetic_dataset(2, (32, 32), seed=4, with_labels=True)
    b = synthetic_dataset(2, (32, 32), seed=4, with_labels=True)
    assert all((x.image == y.image).all() and (x.labels == y.labels).all() for x, y in zip(a, b))
    assert float(a[0].image.min()) == 0.0 and float(a[0].image.max()) == 1.0
    assert a.has_labels


def test_manifest(tmp_path):
    write_png(tmp_path / "a.png", np.random.default_rng(0).random((16, 16)))
    write_png(tmp_path / "lab.png", np.zeros((16, 16)))
    (tmp_path / "m.json").write_text(json.dumps({"images": ["a.png"], "labels": ["lab.png"], "seed": 3}))
    ds = load_manifest(tmp_path / "m.json")
    assert len(ds) == 1 and ds.seed == 3 and ds.has_labels


def test_manifest_errors_are_itemised(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"images": ["missing1.png", "missing2.png"]}))
    with pytest.raises(ValueError) as err:
        load_manifest(tmp_path / "m.json")
    assert "missing1.png" in str(err.value) and "missing2.png" in str(err.value)
    (tmp_path / "k.json").write_text(json.dumps({"images": ["a.png"], "colour": 1}))
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "k.json")
