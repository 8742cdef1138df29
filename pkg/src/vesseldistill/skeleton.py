"""Topology-preserving 3D thinning for binary masks.

Foreground uses 26-connectivity and background 6-connectivity. A voxel is
removed when it is simple (its deletion changes neither the number of
foreground components, nor cavities, nor tunnels) and is not a curve end.
Removal sweeps the six face directions in turn and re-tests every candidate
against the current state before deleting it, so each single deletion is
topology preserving on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np

_OFFSETS = [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
_WEIGHTS = (1 << np.arange(27, dtype=np.int64)).reshape(3, 3, 3)
_CENTER_BIT = 1 << 13


def _adjacency(kind: int):
    """Neighbour lists among the 26 offsets for 6- or 26-adjacency."""
    adj = []
    for a in _OFFSETS:
        row = []
        for j, b in enumerate(_OFFSETS):
            d = [abs(a[k] - b[k]) for k in range(3)]
            if max(d) != 1:
                continue
            if kind == 6 and sum(d) != 1:
                continue
            row.append(j)
        adj.append(row)
    return adj


_ADJ26 = _adjacency(26)
_ADJ6 = _adjacency(6)
_IN_N18 = [sum(abs(c) for c in o) <= 2 for o in _OFFSETS]
_FACE = [sum(abs(c) for c in o) == 1 for o in _OFFSETS]
# bit position of each offset in the 3x3x3 key
_BITS = [(o[0] + 1) * 9 + (o[1] + 1) * 3 + (o[2] + 1) for o in _OFFSETS]


def _components(members, adj, seeds=None) -> int:
    members = set(members)
    seen = set()
    count = 0
    starts = members if seeds is None else [s for s in seeds if s in members]
    for s in starts:
        if s in seen:
            continue
        count += 1
        stack = [s]
        seen.add(s)
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v in members and v not in seen:
                    seen.add(v)
                    stack.append(v)
    return count


@lru_cache(maxsize=None)
def _classify(key: int):
    """Return ``(is_simple, foreground neighbour count)`` for a 27-bit neighbourhood key."""
    fg = [i for i, b in enumerate(_BITS) if key >> b & 1]
    if not fg:
        return False, 0
    if _components(fg, _ADJ26) != 1:
        return False, len(fg)
    bg = [i for i, b in enumerate(_BITS) if not key >> b & 1 and _IN_N18[i]]
    faces = [i for i in bg if _FACE[i]]
    return _components(bg, _ADJ6, seeds=faces) == 1, len(fg)


def is_simple(neighbourhood: np.ndarray) -> bool:
    """Simple-point test on a 3x3x3 boolean block (centre value ignored)."""
    key = int((np.asarray(neighbourhood, dtype=np.int64) * _WEIGHTS).sum()) | _CENTER_BIT
    return _classify(key)[0]


_DIRECTIONS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def thin(mask: np.ndarray) -> np.ndarray:
    """Curve skeleton of a 3-D boolean mask."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 3:
        raise ValueError(f"thinning needs a 3-D mask, got shape {m.shape}")
    vol = np.pad(m, 1).astype(np.int64)
    while True:
        changed = False
        for d in _DIRECTIONS:
            shifted = np.roll(vol, shift=tuple(-c for c in d), axis=(0, 1, 2))
            border = np.argwhere((vol == 1) & (shifted == 0))
            for z, y, x in border:
                block = vol[z - 1:z + 2, y - 1:y + 2, x - 1:x + 2]
                simple, n_fg = _classify(int((block * _WEIGHTS).sum()))
                if simple and n_fg > 1:
                    vol[z, y, x] = 0
                    changed = True
        if not changed:
            break
    return vol[1:-1, 1:-1, 1:-1].astype(bool)


@dataclass
class SkeletonCloud:
    """Integer voxel coordinates of a skeleton and which mask it came from."""

    points: np.ndarray
    source: str = "prediction"

    def __len__(self) -> int:
        return len(self.points)


def skeletonize3d(mask, source: str = "prediction") -> SkeletonCloud:
    vox = getattr(mask, "voxels", mask)
    return SkeletonCloud(np.argwhere(thin(vox)), source)
