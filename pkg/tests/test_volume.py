import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vesseldistill.errors import FormatError, StitchingError
from vesseldistill.volume import (Volume, count_tiles, percentile_clip_normalize, read_volume,
                                  stitch, tile, write_volume)


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for kind, data in [("intensity", rng.standard_normal((8, 8, 8))),
                       ("probability", rng.random((5, 6, 7))),
                       ("label", rng.integers(0, 2, (4, 3, 9)))]:
        v = Volume(data, (0.5, 1.0, 2.5), kind)
        p = tmp_path / f"{kind}.vvol"
        write_volume(v, p)
        back = read_volume(p)
        assert back.kind == kind and back.spacing_um == (0.5, 1.0, 2.5)
        assert back.voxels.dtype == v.voxels.dtype
        assert back.voxels.tobytes() == v.voxels.tobytes()
        write_volume(back, tmp_path / "again.vvol")
        assert (tmp_path / "again.vvol").read_bytes() == p.read_bytes()


def test_truncated_payload(tmp_path):
    p = tmp_path / "v.vvol"
    write_volume(Volume(np.ones((2, 2, 2))), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])  # 7 float32 values instead of 8
    with pytest.raises(FormatError, match="7"):
        read_volume(p)


def test_bad_magic_and_checksum(tmp_path):
    p = tmp_path / "v.vvol"
    write_volume(Volume(np.ones((2, 2, 2))), p)
    raw = bytearray(p.read_bytes())
    bad = bytearray(raw)
    bad[:4] = b"NOPE"
    p.write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="magic"):
        read_volume(p)
    raw[-1] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        read_volume(p)


def test_label_with_two_rejected(tmp_path):
    lab = np.zeros((3, 3, 3), dtype=np.uint8)
    lab[1, 1, 1] = 2
    with pytest.raises(FormatError):
        write_volume(Volume(lab, kind="label"), tmp_path / "l.vvol")
    with pytest.raises(FormatError):
        write_volume(Volume(np.full((2, 2, 2), 1.5), kind="probability"), tmp_path / "p.vvol")


def test_normalize_one_to_hundred():
    vals = np.arange(1, 101, dtype=np.float64).reshape(4, 5, 5)
    out = percentile_clip_normalize(Volume(vals), 95).voxels.astype(np.float64)
    # sort-based oracle: nearest-rank 95th percentile of 1..100 is 95
    srt = np.sort(vals.ravel())
    cut = srt[int(np.ceil(0.95 * srt.size)) - 1]
    assert cut == 95
    ref = (np.minimum(vals, cut) - 1) / (cut - 1)
    np.testing.assert_allclose(out, ref, atol=1e-7)
    assert out.min() == 0 and out.max() == 1


def test_normalize_no_clip_and_constant():
    x = np.random.default_rng(0).random((4, 4, 4))
    x.flat[0], x.flat[1] = 0.0, 1.0
    out = percentile_clip_normalize(Volume(x), 100).voxels
    np.testing.assert_allclose(out, x.astype(np.float32), atol=1e-7)
    np.testing.assert_allclose(percentile_clip_normalize(Volume(out), 100).voxels, out, atol=1e-7)
    assert np.all(percentile_clip_normalize(Volume(np.full((3, 3, 3), 7.0))).voxels == 0)


@pytest.mark.parametrize("dims,size,overlap,expected", [
    ((64, 64, 64), 64, 0, 1), ((100, 100, 100), 64, 0, 8), ((32, 32, 32), 16, 8, 27),
    ((40, 33, 16), 16, 0, 3 * 3 * 1)])
def test_tile_counts(dims, size, overlap, expected):
    assert count_tiles(dims, size, overlap) == expected
    assert len(tile(Volume(np.zeros(dims)), size, overlap)) == expected


def test_tiles_are_raster_ordered_and_cover():
    dims = (20, 17, 9)
    tiles = tile(Volume(np.zeros(dims)), 8, 3)
    origins = [t.origin for t, _ in tiles]
    assert origins == sorted(origins)
    cover = np.zeros(dims, dtype=int)
    for t, v in tiles:
        z, y, x = t.origin
        cover[z:z + 8, y:y + 8, x:x + 8] += 1
        assert v.dims == (8, 8, 8)
    assert cover.min() >= 1


def test_stitch_single_tile_identity():
    v = Volume(np.random.default_rng(1).random((16, 16, 16)), kind="probability")
    out = stitch(tile(v, 16, 0))
    assert out.voxels.tobytes() == v.voxels.tobytes()


def test_stitch_averages_overlap():
    v = Volume(np.zeros((8, 8, 12)), kind="probability")
    tiles = tile(v, 8, 4)
    assert len(tiles) == 2
    filled = [(tiles[0][0], Volume(np.full((8, 8, 8), 0.2), kind="probability")),
              (tiles[1][0], Volume(np.full((8, 8, 8), 0.6), kind="probability"))]
    out = stitch(filled).voxels
    assert np.allclose(out[..., :4], 0.2) and np.allclose(out[..., 8:], 0.6)
    assert np.allclose(out[..., 4:8], 0.4)


def test_stitch_smooth_field_overlap8():
    z, y, x = np.meshgrid(*[np.linspace(0, 1, n) for n in (40, 37, 30)], indexing="ij")
    v = Volume(0.5 + 0.4 * np.sin(3 * z) * np.cos(2 * y) * x, kind="probability")
    out = stitch(tile(v, 16, 8))
    assert np.max(np.abs(out.voxels - v.voxels)) == 0


def test_stitch_rejects_mixed_plans():
    v = Volume(np.zeros((16, 16, 16)), kind="probability")
    a = tile(v, 8, 0)
    b = tile(v, 8, 4)
    with pytest.raises(StitchingError):
        stitch(a[:3] + b[3:])
    with pytest.raises(StitchingError):
        stitch(a[:-1])
    with pytest.raises(StitchingError):
        stitch([])


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(4, 20)] * 3), st.integers(2, 10), st.data())
def test_tile_stitch_identity_property(dims, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    rng = np.random.default_rng(sum(dims) * size + overlap)
    v = Volume(rng.random(dims), kind="probability")
    out = stitch(tile(v, size, overlap))
    assert out.voxels.tobytes() == v.voxels.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_normalize_range_property(seed):
    rng = np.random.default_rng(seed)
    v = Volume(rng.gamma(2.0, 3.0, size=(5, 6, 7)))
    out = percentile_clip_normalize(v, 95).voxels
    assert out.min() >= 0 and out.max() <= 1


def test_tile_edges_are_zero_padded():
    v = Volume(np.ones((10, 10, 10)))
    tiles = dict(tile(v, 8, 0))
    corner = [vol for t, vol in tiles.items() if t.origin == (8, 8, 8)][0].voxels
    assert corner[:2, :2, :2].sum() == 8 and corner.sum() == 8
    for t, vol in tiles.items():
        assert all(o + 8 <= 16 for o in t.origin)
    assert sorted(t.origin for t in tiles) == sorted(itertools.product((0, 8), repeat=3))
