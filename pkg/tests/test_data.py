import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msgan.autodiff.rng import RngStream
from msgan.data import (BANDS_10M, BANDS_20M, Band, FilterThresholds, MultiResSample, NormalizationError,
                        SyntheticSpec, Tile, TileDataset, TileExtentError, TileFormatError, TileMagicError,
                        TileTruncatedError, TileVersionError, band_correlation, box_downsample,
                        dataset_iter, default_correlation, denormalize, filter_sample, generate_synthetic,
                        normalize, read_tile, upsample_20m_nearest, write_tile)


def full_tile(size=8, value=5000.0):
    bands = [Band(n, 1, np.full((size, size), value, np.float32)) for n in BANDS_10M]
    bands += [Band(n, 2, np.full((size // 2, size // 2), value, np.float32)) for n in BANDS_20M]
    return Tile(size, size, bands)


# --------------------------------------------------------------- tile i/o

tiles = st.builds(
    lambda half, names, seed: _random_tile(2 * half, names, seed),
    st.integers(1, 6),
    st.lists(st.tuples(st.text(min_size=1, max_size=12), st.sampled_from([1, 2])), min_size=1, max_size=5,
             unique_by=lambda t: t[0]),
    st.integers(0, 2 ** 32 - 1))


def _random_tile(size, names, seed):
    rng = np.random.default_rng(seed)
    bands = [Band(n, d, rng.normal(size=(size // d, size // d)).astype(np.float32) * 1e4) for n, d in names]
    return Tile(size, size, bands)


@settings(max_examples=1000, deadline=None)
@given(tiles)
def test_tile_round_trip_bit_exact(tmp_path_factory, tile):
    path = tmp_path_factory.mktemp("t") / "x.mstl"
    write_tile(path, tile)
    back = read_tile(path)
    assert (back.width, back.height, back.band_names) == (tile.width, tile.height, tile.band_names)
    for a, b in zip(tile.bands, back.bands):
        assert a.divisor == b.divisor
        assert a.plane.tobytes() == b.plane.astype("<f4").tobytes()


def test_extent_mismatch_names_band():
    t = full_tile()
    t.bands[5] = Band(BANDS_20M[1], 2, np.zeros((3, 3), np.float32))
    with pytest.raises(TileExtentError, match="red_edge_2"):
        t.validate()


def test_empty_band_list_rejected(tmp_path):
    with pytest.raises(TileFormatError):
        write_tile(tmp_path / "e.mstl", Tile(4, 4, []))


def test_bad_magic_version_and_truncation(tmp_path):
    p = tmp_path / "t.mstl"
    write_tile(p, full_tile())
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(TileMagicError):
        read_tile(p)
    p.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(TileVersionError):
        read_tile(p)
    p.write_bytes(raw[:-3])
    with pytest.raises(TileTruncatedError):
        read_tile(p)


# --------------------------------------------------------- normalization

def test_normalize_endpoints_and_band_order():
    t = full_tile()
    t.band("blue").plane[:] = 0.0
    t.band("green").plane[:] = 10000.0
    s = normalize(t)
    assert s.group_10m.shape == (4, 8, 8) and s.group_20m.shape == (6, 4, 4)
    np.testing.assert_array_equal(s.group_10m[0], -1.0)
    np.testing.assert_array_equal(s.group_10m[1], 1.0)
    np.testing.assert_array_equal(s.group_10m[2], 0.0)
    assert BANDS_10M == ("blue", "green", "red", "nir")


def test_normalize_rejects_out_of_range_with_count():
    t = full_tile()
    t.band("nir").plane[0, :3] = 12000
    with pytest.raises(NormalizationError, match="3 values"):
        normalize(t)


def test_normalize_rejects_missing_band():
    t = full_tile()
    t.bands = t.bands[1:]
    with pytest.raises(NormalizationError, match="blue"):
        normalize(t)


def test_denormalize_inverts_normalize():
    rng = np.random.default_rng(0)
    t = full_tile(16)
    for b in t.bands:
        b.plane[:] = rng.uniform(0, 10000, b.plane.shape)
    back = denormalize(normalize(t))
    for a, b in zip(t.bands, back.bands):
        assert a.name == b.name
        np.testing.assert_allclose(a.plane / 5000 - 1, b.plane / 5000 - 1, atol=1e-3)


# -------------------------------------------------------------- resampling

def test_upsample_20m_shapes_and_replication():
    s = MultiResSample(np.zeros((4, 256, 256), np.float32), np.full((6, 128, 128), 0.25, np.float32))
    up = upsample_20m_nearest(s)
    assert up.shape == (10, 256, 256)
    np.testing.assert_array_equal(up[4:], 0.25)
    checker = np.array([[0.0, 1.0], [1.0, 0.0]], np.float32)
    s2 = MultiResSample(np.zeros((4, 4, 4), np.float32), np.tile(checker, (6, 1, 1)))
    np.testing.assert_array_equal(upsample_20m_nearest(s2)[4], np.kron(checker, np.ones((2, 2))))


def test_box_downsample_keeps_constants():
    np.testing.assert_array_equal(box_downsample(np.full((3, 16, 16), 2.0), 3), np.full((3, 2, 2), 2.0))


# --------------------------------------------------------------- filtering

def _sample(value_10m, nir=None):
    g10 = np.full((4, 8, 8), value_10m, np.float32)
    if nir is not None:
        g10[3] = nir
    return MultiResSample(g10, np.zeros((6, 4, 4), np.float32))


def test_filter_cloud_water_keep():
    assert filter_sample(_sample(1.0)).reason == "cloud"
    assert filter_sample(_sample(-0.5, nir=-0.95)).reason == "water"
    assert filter_sample(_sample(0.0)).keep


def test_filter_keeps_synthetic_samples():
    ds = generate_synthetic(SyntheticSpec(seed=3), 1000, 8)
    kept = np.mean([filter_sample(s).keep for s in ds.samples()])
    assert kept >= 0.99


# -------------------------------------------------------------- synthesis

def test_identity_correlation_recovered():
    ds = generate_synthetic(SyntheticSpec(correlation=np.eye(10), seed=1), 1000, 8)
    c = band_correlation(ds)
    assert np.abs(c - np.eye(10)).max() < 0.05


def test_red_nir_correlation_recovered():
    corr = np.eye(10)
    r, n = BANDS_10M.index("red"), BANDS_10M.index("nir")
    corr[r, n] = corr[n, r] = 0.8
    c = band_correlation(generate_synthetic(SyntheticSpec(correlation=corr, seed=2), 1000, 8))
    assert abs(c[r, n] - 0.8) < 0.05


def test_synthetic_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=9), 3, 8)
    b = generate_synthetic(SyntheticSpec(seed=9), 3, 8)
    for ta, tb in zip(a.tiles, b.tiles):
        for x, y in zip(ta.bands, tb.bands):
            assert x.plane.tobytes() == y.plane.tobytes()


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(correlation=np.ones((3, 3)))
    bad = np.eye(10)
    bad[0, 1] = bad[1, 0] = 1.5
    with pytest.raises(ValueError, match="semi-definite"):
        SyntheticSpec(correlation=bad)
    c = default_correlation()
    assert np.allclose(c, c.T) and np.linalg.eigvalsh(c).min() >= -1e-9


def test_dataset_save_load(tmp_path):
    ds = generate_synthetic(SyntheticSpec(seed=0), 3, 8)
    ds.save(tmp_path)
    back = TileDataset.load(tmp_path)
    assert len(back) == 3 and back[1].band_names == ds[1].band_names


# --------------------------------------------------------------- batching

def test_dataset_iter_order_and_count():
    data = list(range(10))
    a = list(dataset_iter(data, 4, RngStream(0, "e")))
    b = list(dataset_iter(data, 4, RngStream(0, "e")))
    assert a == b and len(a) == 2 and all(len(x) == 4 for x in a)


def test_dataset_iter_rejects_bad_batch():
    with pytest.raises(ValueError):
        list(dataset_iter([1, 2], 3, RngStream(0)))
