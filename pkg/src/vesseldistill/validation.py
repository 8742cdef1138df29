"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .networks import DOWNSCALE


def as_volume_array(v, name: str = "volume") -> np.ndarray:
    """Return the voxels of a Volume or array-like as a finite 3-D float array."""
    arr = np.asarray(getattr(v, "voxels", v))
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be 3-D, got shape {arr.shape}")
    if arr.dtype.kind not in "biuf":
        raise ConfigurationError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def as_volume_list(X, name: str = "X") -> List[np.ndarray]:
    """Accept a 4-D array (n, D, H, W) or a sequence of 3-D volumes."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        items = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 3:
        raise DimensionError(f"{name} must be a collection of volumes; wrap a single volume in a list")
    else:
        items = list(X)
    if not items:
        raise ConfigurationError(f"{name} is empty")
    return [as_volume_array(v, f"{name}[{i}]") for i, v in enumerate(items)]


def as_binary_mask(m, name: str = "mask") -> np.ndarray:
    arr = np.asarray(getattr(m, "voxels", m))
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be 3-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ConfigurationError(f"{name} must be binary (0/1)")
    return arr.astype(np.uint8)


def as_label_list(y, n: int, shapes: Sequence[tuple]) -> List[Optional[np.ndarray]]:
    """Per-volume labels; ``None`` entries mark unlabeled volumes."""
    if y is None:
        return [None] * n
    labels = list(y)
    if len(labels) != n:
        raise DimensionError(f"got {n} volumes but {len(labels)} labels")
    out = []
    for i, (lab, shape) in enumerate(zip(labels, shapes)):
        if lab is None:
            out.append(None)
            continue
        m = as_binary_mask(lab, f"y[{i}]")
        if m.shape != tuple(shape):
            raise DimensionError(f"y[{i}] has shape {m.shape}, volume has {tuple(shape)}")
        out.append(m)
    return out


def check_patch_size(patch: int, shapes: Sequence[tuple]) -> None:
    if patch % DOWNSCALE:
        raise ConfigurationError(f"patch size {patch} must be a multiple of {DOWNSCALE}")
    for s in shapes:
        if min(s) < patch:
            raise ConfigurationError(f"volume of shape {s} is smaller than the patch size {patch}")


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} differ in shape: {a.shape} vs {b.shape}")
