import hashlib
import json

import numpy as np
import pytest

from segrobust.data import (
    Dataset,
    Sample,
    SynthConfig,
    crop_center,
    generate_synthetic,
    preprocess_volume,
    raster_from_bytes,
    raster_to_bytes,
    read_dataset,
    scale_to_range,
    slice_volume,
    write_dataset,
    zero_pad,
)
from segrobust.errors import ConfigError, ContractError, IngestionError


def datasets_equal(a, b):
    return (
        a.ids() == b.ids()
        and np.array_equal(a.images(), b.images())
        and np.array_equal(a.masks(), b.masks())
        and (a.intensity_max, a.provenance, a.split, a.seed, a.pipeline) == (b.intensity_max, b.provenance, b.split, b.seed, b.pipeline)
    )


def test_pad_centering_rule():
    src = np.arange(1, 7).reshape(2, 3)
    out = zero_pad(src, (4, 4))
    np.testing.assert_array_equal(out[1:3, 0:3], src)
    assert out.sum() == src.sum()
    assert not out[:, 3].any() and not out[0].any() and not out[3].any()


def test_pad_identity_and_crop_inverse(rng):
    x = rng.normal(size=(5, 7))
    np.testing.assert_array_equal(zero_pad(x, (5, 7)), x)
    np.testing.assert_array_equal(crop_center(zero_pad(x, (9, 12)), (5, 7)), x)


def test_pad_smaller_target():
    with pytest.raises(ContractError):
        zero_pad(np.zeros((4, 4)), (3, 5))


def test_scale_endpoints():
    out = scale_to_range(np.array([[0, 255], [17, 100]]))
    assert out.max() == 0.2 and out.min() == 0.0


def test_scale_constant_and_idempotent(rng):
    assert not scale_to_range(np.full((3, 3), 7.0)).any()
    x = rng.normal(size=(6, 6))
    once = scale_to_range(x)
    np.testing.assert_allclose(scale_to_range(once), once, atol=1e-7)


def test_slice_volume_order():
    vol = np.arange(3 * 2 * 2).reshape(3, 2, 2)
    samples = slice_volume(vol, np.zeros_like(vol), "case7")
    assert [s.id for s in samples] == ["case7-d000", "case7-d001", "case7-d002"]
    for d, s in enumerate(samples):
        np.testing.assert_array_equal(s.image, vol[d])
    (one,) = slice_volume(vol[:1], np.zeros_like(vol[:1]))
    np.testing.assert_array_equal(one.image, vol[0])
    with pytest.raises(ContractError):
        slice_volume(vol, np.zeros((3, 2, 3)))


def test_preprocess_volume(rng):
    vol = rng.uniform(0, 1000, size=(2, 5, 6))
    masks = (rng.uniform(size=vol.shape) > 0.5).astype(np.uint8)
    out = preprocess_volume(vol, masks, (8, 8))
    assert len(out) == 2 and out[0].image.shape == (8, 8)
    assert out[0].image.max() == pytest.approx(0.2) and out[0].image.min() == 0.0
    assert out[1].mask.sum() == masks[1].sum()


def test_synthetic_deterministic_and_in_range():
    cfg = SynthConfig(count=10, seed=4)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert datasets_equal(a, b)
    imgs = a.images()
    assert imgs.min() >= 0 and imgs.max() <= np.float32(0.2)
    assert set(np.unique(a.masks())) <= {0, 1}
    assert not datasets_equal(a, generate_synthetic(SynthConfig(count=10, seed=5)))


def test_synthetic_prefix_stable():
    # sample i does not depend on how many samples were requested
    short = generate_synthetic(SynthConfig(count=3, seed=8))
    long = generate_synthetic(SynthConfig(count=9, seed=8))
    assert np.array_equal(short.images(), long.images()[:3])


def test_foreground_fraction():
    ds = generate_synthetic(SynthConfig(count=1000, seed=21))
    frac = ds.masks().reshape(len(ds), -1).mean(axis=1)
    assert frac.min() >= 0.01 and frac.max() <= 0.30


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(height=10)
    with pytest.raises(ConfigError):
        SynthConfig(family="stars")


def test_raster_round_trip(rng):
    s = Sample(rng.uniform(0, 0.2, (4, 5)), rng.integers(0, 2, (4, 5)), "x")
    raw = raster_to_bytes(s)
    assert raw[:4] == b"LSBR" and len(raw) == 12 + 5 * 20
    back = raster_from_bytes(raw, "x")
    assert np.array_equal(back.image, s.image) and np.array_equal(back.mask, s.mask)


def test_container_round_trip(tmp_path):
    ds = generate_synthetic(SynthConfig(count=4, seed=2)).subset(1, 4, "val")
    write_dataset(ds, tmp_path / "a")
    back = read_dataset(tmp_path / "a")
    assert datasets_equal(ds, back)
    write_dataset(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_missing_manifest(tmp_path):
    with pytest.raises(IngestionError, match="manifest"):
        read_dataset(tmp_path)


def test_missing_raster_names_sample(tmp_path):
    ds = generate_synthetic(SynthConfig(count=3, seed=2))
    write_dataset(ds, tmp_path)
    (tmp_path / "00001.lsbr").unlink()
    with pytest.raises(IngestionError, match=ds.ids()[1]):
        read_dataset(tmp_path)


def test_checksum_mismatch(tmp_path):
    write_dataset(generate_synthetic(SynthConfig(count=2, seed=2)), tmp_path)
    f = tmp_path / "00000.lsbr"
    raw = bytearray(f.read_bytes())
    raw[20] ^= 1
    f.write_bytes(bytes(raw))
    with pytest.raises(IngestionError, match="checksum"):
        read_dataset(tmp_path)


def test_mask_value_two_rejected(tmp_path):
    ds = Dataset([Sample(np.zeros((4, 4)), np.zeros((4, 4)), "m0")])
    write_dataset(ds, tmp_path)
    f = tmp_path / "00000.lsbr"
    raw = bytearray(f.read_bytes())
    raw[-1] = 2
    f.write_bytes(bytes(raw))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["samples"][0]["sha256"] = hashlib.sha256(bytes(raw)).hexdigest()
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IngestionError, match=r"m0: mask contains values \[2\]"):
        read_dataset(tmp_path)


def test_out_of_range_intensity(tmp_path):
    ds = Dataset([Sample(np.full((4, 4), 0.5), np.zeros((4, 4)), "hot")])
    write_dataset(ds, tmp_path)
    with pytest.raises(IngestionError, match="hot"):
        read_dataset(tmp_path)


def test_dataset_contracts():
    with pytest.raises(ContractError):
        Dataset([])
    with pytest.raises(ContractError):
        Dataset([Sample(np.zeros((4, 4)), np.zeros((4, 4)), "a"), Sample(np.zeros((4, 5)), np.zeros((4, 5)), "b")])
