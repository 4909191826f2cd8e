import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nltvsar.core import (
    DimensionError,
    FormatError,
    LayerParams,
    ParameterError,
    RadarParams,
    SamplingMask,
    TruncationError,
    magnitude,
    read_image,
    write_image,
)


def test_round_trip_small(tmp_path):
    img = np.array([[1 + 0j, 0], [0, 1 + 0j]])
    write_image(img, tmp_path / "a.sphc")
    back = read_image(tmp_path / "a.sphc")
    assert back.dtype == np.complex128
    assert np.array_equal(back, img)


def test_round_trip_large_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.standard_normal((512, 512)) + 1j * rng.standard_normal((512, 512))).astype(np.complex64)
    write_image(img, tmp_path / "big.sphc")
    back = read_image(tmp_path / "big.sphc")
    assert np.max(np.abs(back - img)) == 0.0


def test_single_pixel_file_size(tmp_path):
    write_image(np.array([[3 - 4j]]), tmp_path / "one.sphc")
    raw = (tmp_path / "one.sphc").read_bytes()
    assert len(raw) == 24
    assert raw[:4] == b"SPHC"


def test_header_layout(tmp_path):
    write_image(np.zeros((2, 3)), tmp_path / "h.sphc")
    raw = (tmp_path / "h.sphc").read_bytes()
    assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [1, 2, 3]


def test_zero_dims_rejected(tmp_path):
    with pytest.raises(DimensionError):
        write_image(np.zeros((0, 3)), tmp_path / "z.sphc")


def test_rewrite_replaces(tmp_path):
    path = tmp_path / "r.sphc"
    write_image(np.ones((4, 4)), path)
    write_image(np.full((2, 2), 2 + 1j), path)
    assert np.array_equal(read_image(path), np.full((2, 2), 2 + 1j))
    assert not (tmp_path / "r.sphc.tmp").exists()


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.sphc"
    write_image(np.ones((2, 2)), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_image(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.sphc"
    write_image(np.ones((4, 4)), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncationError):
        read_image(path)


def test_short_header_and_trailing_bytes(tmp_path):
    path = tmp_path / "s.sphc"
    path.write_bytes(b"SPHC\x01")
    with pytest.raises(FormatError):
        read_image(path)
    write_image(np.ones((2, 2)), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_image(path)


def test_bad_version(tmp_path):
    path = tmp_path / "v.sphc"
    write_image(np.ones((2, 2)), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_image(path)


def test_magnitude_examples():
    assert magnitude(np.array([[3 - 4j]]))[0, 0] == 5.0
    assert np.all(magnitude(np.zeros((3, 3), complex)) == 0)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    assert np.array_equal(magnitude(np.conj(x)), magnitude(x))


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 2**31 - 1))
def test_magnitude_phase_invariant(phi, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 5)) + 1j * rng.standard_normal((6, 5))
    np.testing.assert_allclose(magnitude(np.exp(1j * phi) * x), magnitude(x), rtol=1e-14, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_persistence_property(tmp_path_factory, rows, cols, seed):
    rng = np.random.default_rng(seed)
    img = (rng.standard_normal((rows, cols)) * 1e3 + 1j * rng.standard_normal((rows, cols))).astype(np.complex64)
    path = tmp_path_factory.mktemp("p") / "x.sphc"
    write_image(img, path)
    assert np.array_equal(read_image(path), img.astype(np.complex128))


def test_radar_params_validation():
    r = RadarParams.for_grid(64, 64)
    assert r.azimuth_spacing == pytest.approx(4.0)
    assert r.range_spacing == pytest.approx(4.0)
    assert r.bandwidth == pytest.approx(r.sample_rate)
    with pytest.raises(ParameterError):
        RadarParams.for_grid(64, 64, sliding_factor=1.5)
    with pytest.raises(ParameterError):
        RadarParams.for_grid(64, 64, velocity=-1.0)


def test_radar_grid_matches_azimuth_rate():
    r = RadarParams.for_grid(128, 96)
    assert r.doppler_rate(r.ref_range) == pytest.approx(r.prf**2 / 128)


def test_mask_dsr_and_indicator():
    az = np.ones(10, bool)
    az[:1] = False
    rg = np.ones(10, bool)
    rg[-1] = False
    m = SamplingMask(az, rg)
    assert m.kept_fraction == pytest.approx(0.81)
    assert m.dsr == pytest.approx(0.19)
    ind = m.indicator
    assert ind[0].sum() == 0 and ind[:, -1].sum() == 0 and ind[1:, :-1].min() == 1
    assert SamplingMask.from_indicator(ind) == m
    with pytest.raises(ValueError):
        m.azimuth_keep[0] = True


def test_mask_from_non_separable_indicator():
    ind = np.eye(4)
    with pytest.raises(FormatError):
        SamplingMask.from_indicator(ind)


def test_layer_params_invariants():
    LayerParams(0.5, 0.0, 0.1, 0.0, 2.0)
    for bad in [(0.0, 1, 1, 1, 2), (1.0, 1, 1, 1, 2), (0.5, -1, 1, 1, 2),
                (0.5, 1, 0, 1, 2), (0.5, 1, 1, -1, 2), (0.5, 1, 1, 1, 1.0),
                (float("nan"), 1, 1, 1, 2)]:
        with pytest.raises(ParameterError):
            LayerParams(*bad)
