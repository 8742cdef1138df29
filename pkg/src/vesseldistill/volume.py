"""Volume container, on-disk format, intensity preprocessing and tiling.

File layout (all little-endian)::

    offset  size  field
    0       4     magic b"VVOL"
    4       2     format version (uint16, currently 1)
    6       1     kind: 0 intensity, 1 label, 2 probability
    7       1     dtype: 1 float32, 2 uint8
    8       1     endianness marker b"<"
    9       12    dims D, H, W (3 x uint32)
    21      24    voxel spacing in micrometres (3 x float64)
    45      4     CRC-32 of the payload (uint32)
    49      ...   payload, C order, D*H*W voxels
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, StitchingError

MAGIC = b"VVOL"
VERSION = 1
_HEADER = struct.Struct("<4sHBBc3I3dI")
KINDS = ("intensity", "label", "probability")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}

PathLike = Union[str, Path]


@dataclass
class Volume:
    """A 3D scalar field with voxel spacing metadata."""

    voxels: np.ndarray
    spacing_um: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        arr = np.asarray(self.voxels)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {arr.shape}")
        if self.kind == "label":
            if arr.dtype != np.uint8:
                arr = arr.astype(np.uint8) if np.all((arr == 0) | (arr == 1)) else arr
        else:
            arr = arr.astype(np.float32, copy=False)
        self.voxels = np.ascontiguousarray(arr)
        self.spacing_um = tuple(float(s) for s in self.spacing_um)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def validate(self) -> None:
        v = self.voxels
        if self.kind == "label":
            if v.dtype != np.uint8 or not np.all((v == 0) | (v == 1)):
                raise FormatError("label volumes may only contain 0 and 1")
        elif self.kind == "probability":
            if not (np.all(v >= 0) and np.all(v <= 1)):
                raise FormatError("probability volumes must lie in [0, 1]")


def write_volume(v: Volume, path: PathLike) -> None:
    v.validate()
    dtype_code = 2 if v.kind == "label" else 1
    payload = np.ascontiguousarray(v.voxels, dtype=_DTYPES[dtype_code]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, KINDS.index(v.kind), dtype_code, b"<",
                          *v.dims, *v.spacing_um, zlib.crc32(payload))
    Path(path).write_bytes(header + payload)


def read_volume(path: PathLike) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the volume header")
    magic, version, kind, dtype_code, endian, D, H, W, sx, sy, sz, crc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if endian != b"<" or dtype_code not in _DTYPES or kind >= len(KINDS):
        raise FormatError(f"{path}: corrupt header")
    dtype = _DTYPES[dtype_code]
    n = D * H * W
    payload = raw[_HEADER.size:]
    if len(payload) != n * dtype.itemsize:
        raise FormatError(
            f"{path}: payload holds {len(payload) // dtype.itemsize} values, header promises {n}"
        )
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{path}: payload checksum mismatch")
    vox = np.frombuffer(payload, dtype=dtype).reshape(D, H, W).copy()
    if dtype == _DTYPES[1]:
        vox = vox.astype(np.float32)
    vol = Volume(vox, (sx, sy, sz), KINDS[kind])
    vol.validate()
    return vol


def percentile_clip_normalize(v: Volume, pct: float = 95.0) -> Volume:
    """Clip intensities above the ``pct``-th percentile, then min-max scale to [0, 1].

    The percentile uses the nearest-rank (inverted CDF) definition over the
    whole volume; min and max are taken after clipping. A constant volume maps
    to all zeros.
    """
    if not 0 < pct <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {pct}")
    x = v.voxels.astype(np.float64)
    hi = np.percentile(x, pct, method="inverted_cdf")
    x = np.minimum(x, hi)
    lo, top = x.min(), x.max()
    if top - lo <= 0:
        out = np.zeros_like(x)
    else:
        out = (x - lo) / (top - lo)
    return Volume(out.astype(np.float32), v.spacing_um, "intensity")


@dataclass(frozen=True)
class TileIndex:
    """Placement of one cubic tile in a tiling plan."""

    origin: Tuple[int, int, int]
    size: int
    overlap: int
    volume_dims: Tuple[int, int, int] = field(default=(0, 0, 0))


def _origins(n: int, size: int, overlap: int) -> List[int]:
    step = size - overlap
    return list(range(0, max(n - overlap, 1), step))


def tile_plan(dims: Sequence[int], size: int, overlap: int = 0) -> List[TileIndex]:
    if size < 1 or not 0 <= overlap < size:
        raise ValueError(f"need size >= 1 and 0 <= overlap < size, got {size}, {overlap}")
    dims = tuple(int(d) for d in dims)
    oz, oy, ox = (_origins(d, size, overlap) for d in dims)
    return [TileIndex((z, y, x), size, overlap, dims) for z in oz for y in oy for x in ox]


def _padded_extent(dims, plan):
    return tuple(max(max(t.origin[a] for t in plan) + plan[0].size, dims[a]) for a in range(3))


def tile(v: Volume, size: int, overlap: int = 0) -> List[Tuple[TileIndex, Volume]]:
    """Cut ``v`` into cubes of edge ``size`` in raster order; edge tiles are zero-padded."""
    plan = tile_plan(v.dims, size, overlap)
    ext = _padded_extent(v.dims, plan)
    padded = np.zeros(ext, dtype=v.voxels.dtype)
    D, H, W = v.dims
    padded[:D, :H, :W] = v.voxels
    out = []
    for t in plan:
        z, y, x = t.origin
        block = padded[z:z + size, y:y + size, x:x + size].copy()
        out.append((t, Volume(block, v.spacing_um, v.kind)))
    return out


def stitch(tiles: Sequence[Tuple[TileIndex, Volume]]) -> Volume:
    """Average overlapping tiles back into one probability volume and drop the padding."""
    if not tiles:
        raise StitchingError("no tiles to stitch")
    first = tiles[0][0]
    size, overlap, dims = first.size, first.overlap, first.volume_dims
    for t, vol in tiles:
        if (t.size, t.overlap, t.volume_dims) != (size, overlap, dims):
            raise StitchingError("tiles come from different tiling plans")
        if vol.dims != (size, size, size):
            raise StitchingError(f"tile at {t.origin} has shape {vol.dims}, expected {size}^3")
    expected = {t.origin for t in tile_plan(dims, size, overlap)}
    got = [t.origin for t, _ in tiles]
    if set(got) != expected or len(got) != len(expected):
        raise StitchingError("tile origins do not match the tiling plan")
    plan = [t for t, _ in tiles]
    ext = _padded_extent(dims, plan)
    acc = np.zeros(ext)
    cnt = np.zeros(ext)
    for t, vol in tiles:
        z, y, x = t.origin
        acc[z:z + size, y:y + size, x:x + size] += vol.voxels
        cnt[z:z + size, y:y + size, x:x + size] += 1.0
    D, H, W = dims
    out = (acc / cnt)[:D, :H, :W]
    return Volume(out.astype(np.float32), tiles[0][1].spacing_um, "probability")


def count_tiles(dims: Sequence[int], size: int, overlap: int = 0) -> int:
    return math.prod(len(_origins(int(d), size, overlap)) for d in dims)
