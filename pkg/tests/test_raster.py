import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iceflow.raster import (
    Raster,
    RasterFormatError,
    SceneSeries,
    SynthSpec,
    export_pgm,
    pgm_bytes,
    raster_to_bytes,
    read_pgm,
    read_raster,
    read_series,
    synth_series,
    write_raster,
    write_series,
)


def random_raster(rng, h, w, nodata_p=0.1):
    mask = rng.random((h, w)) < nodata_p
    return Raster(rng.random((h, w)).astype(np.float32), mask, rng.uniform(0, 1e4), rng.uniform(1, 60))


def test_smallest_raster_layout():
    data = raster_to_bytes(Raster(np.array([[0.5]], dtype=np.float32), timestamp=3.0))
    # 13-byte header, 4-byte pixel, 1 mask byte, 8-byte timestamp, 4-byte pixel size
    assert len(data) == 30
    assert data[:4] == b"ICEF"
    assert data[4] == 1
    assert struct.unpack("<II", data[5:13]) == (1, 1)
    assert struct.unpack("<f", data[13:17]) == (0.5,)
    assert data[17] == 0
    assert struct.unpack("<df", data[18:30]) == (3.0, 30.0)


def test_nodata_pixel_written_as_nan_with_mask_byte():
    mask = np.zeros((2, 3), dtype=bool)
    mask[1, 2] = True
    data = raster_to_bytes(Raster(np.full((2, 3), 0.25, dtype=np.float32), mask))
    pixels = np.frombuffer(data, "<f4", count=6, offset=13)
    masks = np.frombuffer(data, np.uint8, count=6, offset=13 + 24)
    assert np.isnan(pixels[5]) and not np.isnan(pixels[:5]).any()
    assert masks.tolist() == [0, 0, 0, 0, 0, 1]


def test_round_trip_128(rng, tmp_path):
    r = Raster(rng.random((128, 128)).astype(np.float32), timestamp=17.5)
    write_raster(r, tmp_path / "a.icef")
    back = read_raster(tmp_path / "a.icef")
    assert back == r
    assert back.pixels.tobytes() == r.pixels.tobytes()


def test_round_trip_many_random(rng):
    for _ in range(100):
        h, w = rng.integers(1, 40, 2)
        r = random_raster(rng, h, w)
        buf = io.BytesIO()
        write_raster(r, buf)
        assert read_raster(buf.getvalue()) == r


def test_bad_magic():
    data = bytearray(raster_to_bytes(Raster(np.zeros((2, 2), np.float32))))
    data[:4] = b"XXXX"
    with pytest.raises(RasterFormatError, match="magic"):
        read_raster(bytes(data))


def test_truncated_payload():
    data = raster_to_bytes(Raster(np.zeros((4, 4), np.float32)))
    with pytest.raises(RasterFormatError, match="truncated"):
        read_raster(data[:20])


def test_non_finite_outside_mask_rejected():
    data = bytearray(raster_to_bytes(Raster(np.zeros((1, 2), np.float32))))
    data[13:17] = struct.pack("<f", float("nan"))
    with pytest.raises(RasterFormatError, match="non-finite"):
        read_raster(bytes(data))


def test_raster_invariants():
    with pytest.raises(ValueError):
        Raster(np.array([[1.5]], np.float32))
    with pytest.raises(ValueError):
        Raster(np.zeros((2, 2), np.float32), pixel_size_m=0)
    with pytest.raises(ValueError):
        Raster(np.zeros((0, 3), np.float32))


def test_series_requires_increasing_time():
    a = Raster(np.zeros((2, 2), np.float32), timestamp=1)
    b = Raster(np.zeros((2, 2), np.float32), timestamp=1)
    with pytest.raises(ValueError):
        SceneSeries((a, b))


def test_manifest_round_trip(tmp_path):
    series, _ = synth_series(SynthSpec.constant(1, 0, n_frames=3, size=16, nodata_corner=0.2))
    manifest = write_series(series, tmp_path)
    back = read_series(manifest)
    assert back.region_id == series.region_id
    assert all(a == b for a, b in zip(back.frames, series.frames))


# --- PGM


def test_pgm_endpoints():
    px = read_pgm(io.BytesIO(pgm_bytes([[0.0], [1.0]], 0.0, 1.0)))
    assert px.ravel().tolist() == [0, 255]


def test_pgm_midpoint_rounds_half_up():
    px = read_pgm(io.BytesIO(pgm_bytes(np.full((3, 3), 0.5), 0.0, 1.0)))
    assert (px == 128).all()


def test_pgm_correlation_zero_maps_to_128(tmp_path):
    export_pgm(np.array([[0.0, -1.0, 1.0, np.nan]]), -1.0, 1.0, tmp_path / "m.pgm")
    px = read_pgm(tmp_path / "m.pgm")
    assert px.ravel().tolist() == [128, 0, 255, 0]
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n4 1\n255\n")


def test_pgm_rejects_bad_range():
    with pytest.raises(ValueError):
        pgm_bytes([[0.0]], 1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_pgm_monotone(a, b):
    v1, v2 = sorted((a, b))
    px = read_pgm(io.BytesIO(pgm_bytes([[v1, v2]], -3.0, 4.0)))
    assert px[0, 0] <= px[0, 1]


# --- synthetic scenes


def test_static_series_identical_frames():
    series, truth = synth_series(SynthSpec(seed=3, size=48, n_frames=4))
    for f in series.frames[1:]:
        assert np.array_equal(f.pixels, series.frames[0].pixels)
    assert (truth.displacements == 0).all()


def test_single_shift_right():
    series, truth = synth_series(SynthSpec(seed=1, size=40, n_frames=2, displacement_field=((3, 0),)))
    f0, f1 = series.frames[0].pixels, series.frames[1].pixels
    assert np.array_equal(f1[:, 3:], f0[:, :-3])
    assert truth.displacements[1].tolist() == [0, 3]


def test_synth_deterministic():
    spec = SynthSpec.constant(1.5, -0.5, n_frames=5, seed=99, size=32, occlusion_prob=0.5, noise_snr=10)
    a, ta = synth_series(spec)
    b, tb = synth_series(spec)
    assert all(x == y for x, y in zip(a.frames, b.frames))
    assert np.array_equal(ta.occluded, tb.occluded)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_integer_advection_exact(seed):
    rng = np.random.default_rng(seed)
    steps = tuple((int(a), int(b)) for a, b in rng.integers(-4, 5, (5, 2)))
    series, truth = synth_series(SynthSpec(seed=seed, size=48, n_frames=6, displacement_field=steps))
    f0 = series.frames[0].pixels
    for t, frame in enumerate(series.frames):
        dr, dc = truth.displacements[t]
        h = 48
        # interior where both frames see the same surface point
        rows = slice(max(0, dr), h + min(0, dr))
        cols = slice(max(0, dc), h + min(0, dc))
        src_rows = slice(max(0, -dr), h + min(0, -dr))
        src_cols = slice(max(0, -dc), h + min(0, -dc))
        assert np.array_equal(frame.pixels[rows, cols], f0[src_rows, src_cols])


def test_fractional_truth_is_rounded():
    series, truth = synth_series(SynthSpec.constant(0.6, 0.2, n_frames=4, size=24))
    assert truth.exact[-1].tolist() == pytest.approx([0.6000000000000001, 1.8], abs=1e-9)
    assert truth.displacements[-1].tolist() == [1, 2]


def test_clouds_are_bright_and_flagged():
    series, truth = synth_series(SynthSpec(seed=5, size=64, n_frames=3, occlusion_prob=(0, 1, 0), occlusion_size=30))
    assert not truth.occluded[0].any() and not truth.occluded[2].any()
    cloud = truth.occluded[1]
    assert cloud.sum() > 200
    assert (series.frames[1].pixels[cloud] >= 0.8).all()


def test_corner_nodata():
    series, _ = synth_series(SynthSpec(size=64, n_frames=2, nodata_corner=0.25))
    mask = series.frames[0].nodata
    assert mask[0, 0] and mask[0, -1] and mask[-1, 0] and mask[-1, -1]
    assert not mask[32, 32]


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(n_frames=1)
    with pytest.raises(ValueError):
        SynthSpec(n_frames=3, occlusion_prob=1.5)
    with pytest.raises(ValueError):
        SynthSpec(n_frames=3, displacement_field=((1, 1),))
