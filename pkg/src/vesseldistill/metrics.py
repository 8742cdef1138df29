"""Segmentation quality metrics for tubular structures.

Overlap scores come from voxel confusion counts. When both masks are empty
DSC and Jaccard are defined as 1.0. HD95 pools the directed distances from
each 6-connectivity boundary voxel to the other mask's boundary and takes the
95th percentile (linear interpolation), in physical units. GWD (alias SMD)
is the entropic transport cost between the two skeleton clouds.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimensionError
from .skeleton import skeletonize3d, thin
from .transport import sinkhorn_smd
from .volume import read_volume

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("DSC", "Accuracy", "HD95", "Jaccard", "GWD", "Cl_Dice")
_FACE6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


def _mask(v) -> np.ndarray:
    arr = np.asarray(getattr(v, "voxels", v))
    return arr.astype(bool) if arr.dtype == bool or arr.dtype.kind in "iu" else arr >= 0.5


def _pair(pred, gt):
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def dsc(c: ConfusionCounts) -> float:
    denom = 2 * c.TP + c.FP + c.FN
    return 1.0 if denom == 0 else 2 * c.TP / denom


def jaccard(c: ConfusionCounts) -> float:
    denom = c.TP + c.FP + c.FN
    return 1.0 if denom == 0 else c.TP / denom


def accuracy(c: ConfusionCounts) -> float:
    return 1.0 if c.total == 0 else (c.TP + c.TN) / c.total


def boundary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, _FACE6, border_value=0)


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Directed boundary distances pred->gt followed by gt->pred."""
    p, g = _pair(pred, gt)
    sp = np.asarray(spacing, dtype=np.float64)
    bp = np.argwhere(boundary(p)) * sp
    bg = np.argwhere(boundary(g)) * sp
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return np.concatenate([d_pg, d_gp])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0), return_flag: bool = False):
    """95th-percentile symmetric surface distance; ``inf`` (flag True) if a mask is empty."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return (math.inf, True) if return_flag else math.inf
    value = float(np.percentile(surface_distances(p, g, spacing), 95))
    return (value, False) if return_flag else value


def cl_dice(pred, gt, return_flag: bool = False):
    """Harmonic mean of skeleton precision and skeleton sensitivity.

    Returns 0 (flag True) when either skeleton is empty or both ratios are 0.
    """
    p, g = _pair(pred, gt)
    sp, sg = thin(p), thin(g)
    if not sp.any() or not sg.any():
        return (0.0, True) if return_flag else 0.0
    tprec = np.count_nonzero(sp & g) / np.count_nonzero(sp)
    tsens = np.count_nonzero(sg & p) / np.count_nonzero(sg)
    if tprec + tsens == 0:
        return (0.0, True) if return_flag else 0.0
    value = 2 * tprec * tsens / (tprec + tsens)
    return (value, False) if return_flag else value


def gwd(pred, gt, eps: float = 1.0, max_iter: int = 500, tol: float = 1e-6, return_flag=False):
    """Transport cost between skeleton clouds; ``inf`` (flag True) when one is empty."""
    p, g = _pair(pred, gt)
    a = skeletonize3d(p, "prediction")
    b = skeletonize3d(g, "ground_truth")
    if len(a) == 0 or len(b) == 0:
        return (math.inf, True) if return_flag else math.inf
    res = sinkhorn_smd(a, b, eps, max_iter, tol, return_result=True)
    return (res.cost, not res.converged) if return_flag else res.cost


smd = gwd


def volume_metrics(pred, gt, spacing=(1.0, 1.0, 1.0), eps: float = 1.0) -> Dict[str, object]:
    c = confusion(pred, gt)
    h, h_flag = hd95(pred, gt, spacing, return_flag=True)
    cl, cl_flag = cl_dice(pred, gt, return_flag=True)
    w, w_flag = gwd(pred, gt, eps, return_flag=True)
    return {
        "DSC": dsc(c), "Accuracy": accuracy(c), "HD95": h, "Jaccard": jaccard(c),
        "GWD": w, "Cl_Dice": cl,
        "flags": {"hd95_empty": h_flag, "cl_dice_empty": cl_flag, "gwd_flag": w_flag},
        "confusion": {"TP": c.TP, "TN": c.TN, "FP": c.FP, "FN": c.FN},
    }


@dataclass
class MetricsReport:
    per_volume: Dict[str, Dict[str, object]] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for col in TABLE_COLUMNS:
            vals = np.array([float(m[col]) for m in self.per_volume.values()])
            if vals.size == 0:
                out[col] = {"mean": math.nan, "std": math.nan}
            else:
                out[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def records(self) -> List[str]:
        lines = [json.dumps({"volume": k, **v}, sort_keys=True) for k, v in self.per_volume.items()]
        lines.append(json.dumps({"aggregate": self.aggregate(), "n": len(self.per_volume),
                                 "skipped": self.skipped}, sort_keys=True))
        return lines

    def table(self, label: str = "model") -> str:
        agg = self.aggregate()
        cells = [f"{agg[c]['mean']:.3f} ± {agg[c]['std']:.3f}" for c in TABLE_COLUMNS]
        width = max(len(label), 8)
        colw = [max(len(h), len(x)) for h, x in zip(TABLE_COLUMNS, cells)]
        head = "Method".ljust(width) + " | " + " | ".join(h.ljust(w) for h, w in zip(TABLE_COLUMNS, colw))
        row = label.ljust(width) + " | " + " | ".join(x.ljust(w) for x, w in zip(cells, colw))
        return "\n".join([head, "-" * len(head), row])


_SUFFIXES = ("_label", "_prob", "_pred", "_image", "_seg")


def volume_key(path: Path) -> str:
    stem = Path(path).stem
    for s in _SUFFIXES:
        if stem.endswith(s):
            return stem[: -len(s)]
    return stem


def evaluate(pred_dir, gt_dir, threshold: float = 0.5, eps: float = 1.0) -> MetricsReport:
    """Score every prediction volume against the ground truth with the same key.

    Keys are file stems with a trailing ``_label``, ``_prob``, ``_pred``,
    ``_image`` or ``_seg`` removed. Intensity images are ignored on both sides.
    Unmatched files are logged and skipped.
    """
    preds = {volume_key(p): p for p in sorted(Path(pred_dir).glob("*.vvol"))
             if not p.stem.endswith("_image")}
    gts = {volume_key(p): p for p in sorted(Path(gt_dir).glob("*.vvol"))
           if not p.stem.endswith("_image")}
    report = MetricsReport()
    for key in sorted(set(preds) | set(gts)):
        if key not in preds or key not in gts:
            log.warning("no matching pair for %s; skipped", key)
            report.skipped.append(key)
            continue
        pv, gv = read_volume(preds[key]), read_volume(gts[key])
        pm = pv.voxels >= threshold if pv.kind != "label" else pv.voxels.astype(bool)
        report.per_volume[key] = volume_metrics(pm, gv.voxels.astype(bool), gv.spacing_um, eps)
    return report
