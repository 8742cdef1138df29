"""Synthetic vascular phantoms: branching tube trees, rasterisation and rendering."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import GenerationError
from .volume import Volume, write_volume

MURRAY_RATIO = 2.0 ** (-1.0 / 3.0)
FOREGROUND_BAND = (0.005, 0.10)


@dataclass
class TreeParams:
    root_radius: float = 2.0
    levels: int = 3
    branch_prob: float = 0.8
    tortuosity: float = 0.25
    steps_per_segment: int = 5
    step_length: float = 2.0
    taper: float = 0.97


@dataclass
class RenderParams:
    contrast: float = 1.0
    noise_sigma: float = 0.08
    bias_strength: float = 0.3
    psf_sigma: float = 0.7
    background: float = 0.0


@dataclass
class TubeTree:
    positions: np.ndarray  # (n, 3) voxel coordinates (z, y, x)
    radii: np.ndarray  # (n,)
    edges: List[Tuple[int, int]]
    branching_levels: int

    @property
    def n_nodes(self) -> int:
        return len(self.radii)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def sample_tree(rng_seed, volume_dims: Sequence[int], params: Optional[TreeParams] = None) -> TubeTree:
    """Grow a binary branching tree by a direction-perturbed random walk.

    Each segment takes ``steps_per_segment`` steps; at the end of a segment on
    level ``< levels`` each of two children is spawned with probability
    ``branch_prob``. Radii shrink by ``taper`` per step and by Murray's ratio
    at every bifurcation, so they strictly decrease away from the root.
    Steps that would leave the volume are reflected back inside.
    """
    p = params or TreeParams()
    if p.root_radius < 1:
        raise GenerationError(f"root radius must be >= 1 voxel, got {p.root_radius}")
    if p.levels < 1:
        raise GenerationError(f"levels must be >= 1, got {p.levels}")
    if p.steps_per_segment < 1:
        raise GenerationError("a segment needs at least one step")
    rng = np.random.default_rng(rng_seed)
    dims = np.asarray(volume_dims, dtype=np.float64)
    lo = np.full(3, 1.0)
    hi = dims - 2.0
    if np.any(hi <= lo):
        raise GenerationError(f"volume {tuple(volume_dims)} too small for a tree")

    # start on a random face, heading inwards
    axis = rng.integers(3)
    side = rng.integers(2)
    start = lo + rng.uniform(0.25, 0.75, 3) * (hi - lo)
    start[axis] = lo[axis] if side == 0 else hi[axis]
    heading = _unit(rng.normal(0, 0.3, 3))
    heading[axis] = 1.0 if side == 0 else -1.0
    heading = _unit(heading)

    positions = [start]
    radii = [float(p.root_radius)]
    edges: List[Tuple[int, int]] = []
    # (start node, direction, level, radius factor applied to the first step)
    frontier = [(0, heading, 1, 1.0)]
    while frontier:
        cur, d, level, factor = frontier.pop(0)
        for step in range(p.steps_per_segment):
            d = _unit(d + rng.normal(0.0, p.tortuosity, 3))
            nxt = positions[cur] + p.step_length * d
            for a in range(3):
                if nxt[a] < lo[a] or nxt[a] > hi[a]:
                    d[a] = -d[a]
            nxt = np.clip(positions[cur] + p.step_length * d, lo, hi)
            positions.append(nxt)
            radii.append(radii[cur] * p.taper * (factor if step == 0 else 1.0))
            edges.append((cur, len(positions) - 1))
            cur = len(positions) - 1
        if level < p.levels:
            for sign in (1.0, -1.0):
                if rng.uniform() < p.branch_prob:
                    ortho = _unit(np.cross(d, rng.normal(size=3)))
                    frontier.append((cur, _unit(d + sign * 0.9 * ortho), level + 1, MURRAY_RATIO))
    if len(positions) < 2:
        raise GenerationError("tree has no segments")
    return TubeTree(np.asarray(positions), np.asarray(radii), edges, p.levels)


def rasterize(tree: TubeTree, dims: Sequence[int], sample_spacing: float = 0.25):
    """Binary label of all voxels within the local radius of a centreline segment.

    Returns ``(label Volume, skeleton points (n, 3) float array)``. Voxels that
    contain a skeleton sample are always labelled, which gives the
    centreline-only limit for sub-voxel radii.
    """
    dims = tuple(int(d) for d in dims)
    label = np.zeros(dims, dtype=bool)
    skel = []
    grid_max = np.asarray(dims) - 1
    for a, b in tree.edges:
        p0, p1 = tree.positions[a], tree.positions[b]
        r0, r1 = tree.radii[a], tree.radii[b]
        seg = p1 - p0
        L2 = float(seg @ seg)
        rmax = max(r0, r1)
        lo = np.maximum(np.floor(np.minimum(p0, p1) - rmax - 1), 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(p0, p1) + rmax + 1), grid_max).astype(int)
        zz, yy, xx = np.meshgrid(*(np.arange(lo[i], hi[i] + 1) for i in range(3)), indexing="ij")
        pts = np.stack([zz, yy, xx], axis=-1).astype(np.float64)
        if L2 > 0:
            t = np.clip(((pts - p0) @ seg) / L2, 0.0, 1.0)
        else:
            t = np.zeros(pts.shape[:3])
        closest = p0 + t[..., None] * seg
        dist = np.linalg.norm(pts - closest, axis=-1)
        rad = r0 + t * (r1 - r0)
        inside = dist <= rad
        label[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= inside
        n = max(int(math.ceil(math.sqrt(L2) / sample_spacing)), 1)
        ts = np.linspace(0.0, 1.0, n + 1)
        skel.append(p0 + ts[:, None] * seg)
    skeleton = np.concatenate(skel, axis=0) if skel else np.zeros((0, 3))
    idx = np.clip(np.rint(skeleton).astype(int), 0, grid_max)
    label[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return Volume(label.astype(np.uint8), kind="label"), skeleton


def _bias_field(rng, dims, strength):
    if strength == 0:
        return np.ones(dims)
    grids = np.meshgrid(*(np.linspace(0, 1, d) for d in dims), indexing="ij")
    field_ = np.zeros(dims)
    for _ in range(3):
        k = rng.uniform(0.5, 1.5, 3)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * sum(k[i] * grids[i] for i in range(3)) + phase)
    field_ /= max(np.abs(field_).max(), 1e-12)
    return 1.0 + strength * field_


def render_intensity(label: Volume, skeleton=None, rng_seed=0,
                     params: Optional[RenderParams] = None) -> Volume:
    """Emulate a light-sheet acquisition of a labelled vessel tree.

    ``contrast * label`` (plus a constant background level) is modulated by a
    smooth multiplicative bias field, blurred by a Gaussian point-spread
    function, corrupted by additive Gaussian noise, and clipped at zero.
    ``skeleton`` is accepted for interface symmetry with :func:`rasterize`.
    """
    p = params or RenderParams()
    for name in ("contrast", "noise_sigma", "bias_strength", "psf_sigma", "background"):
        if getattr(p, name) < 0:
            raise ValueError(f"render parameter {name} must be non-negative")
    rng = np.random.default_rng(rng_seed)
    lab = label.voxels.astype(np.float64)
    img = p.background + p.contrast * lab
    img = img * _bias_field(rng, lab.shape, p.bias_strength)
    if p.psf_sigma > 0:
        img = ndimage.gaussian_filter(img, p.psf_sigma, mode="nearest")
    if p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, lab.shape)
    img = np.maximum(img, 0.0)
    return Volume(img.astype(np.float32), label.spacing_um, "intensity")


@dataclass
class PhantomSpec:
    """Everything needed to regenerate one phantom bit-for-bit."""

    seed: int
    dims: Tuple[int, int, int]
    n_trees: int
    tree: TreeParams
    render: RenderParams


def random_phantom_spec(seed: int, dims: Sequence[int]) -> PhantomSpec:
    rng = np.random.default_rng([seed, 17])
    tree = TreeParams(
        root_radius=float(rng.uniform(1.6, 2.6)),
        levels=int(rng.integers(2, 4)),
        branch_prob=float(rng.uniform(0.6, 1.0)),
        tortuosity=float(rng.uniform(0.15, 0.35)),
        steps_per_segment=int(rng.integers(4, 7)),
    )
    render = RenderParams(
        contrast=float(rng.uniform(0.7, 1.0)),
        noise_sigma=float(rng.uniform(0.05, 0.12)),
        bias_strength=float(rng.uniform(0.1, 0.4)),
        psf_sigma=float(rng.uniform(0.5, 0.9)),
        background=0.1,
    )
    return PhantomSpec(int(seed), tuple(int(d) for d in dims), int(rng.integers(2, 4)), tree, render)


def generate_phantom(spec: PhantomSpec):
    """Return ``(intensity, label, skeleton)`` for a phantom spec."""
    label = np.zeros(spec.dims, dtype=np.uint8)
    skels = []
    for k in range(spec.n_trees):
        tree = sample_tree([spec.seed, k], spec.dims, spec.tree)
        lab, sk = rasterize(tree, spec.dims)
        label |= lab.voxels
        skels.append(sk)
    label_vol = Volume(label, kind="label")
    skeleton = np.concatenate(skels, axis=0)
    intensity = render_intensity(label_vol, skeleton, [spec.seed, 99], spec.render)
    return intensity, label_vol, skeleton


def foreground_fraction(label: Volume) -> float:
    return float(label.voxels.mean())


def banded_phantom(seed: int, dims, band=FOREGROUND_BAND, max_attempts: int = 50):
    """Draw phantoms from successive derived seeds until the foreground fraction is in ``band``.

    Returns ``(spec, intensity, label)``; the spec's seed regenerates the same volume directly.
    """
    for attempt in range(max_attempts):
        s = seed if attempt == 0 else int(np.random.default_rng([seed, attempt]).integers(2 ** 31 - 1))
        spec = random_phantom_spec(s, dims)
        intensity, label, _ = generate_phantom(spec)
        if band[0] <= foreground_fraction(label) <= band[1]:
            return spec, intensity, label
    raise GenerationError(f"no phantom within foreground band {band} after {max_attempts} attempts")


def make_dataset(rng_seed: int, n_unlabeled: int, n_labeled: int, dims, out_dir,
                 n_test: int = 0, force: bool = False) -> Dict:
    """Write phantom volumes plus ``manifest.json`` describing seeds, parameters and splits.

    Unlabeled volumes are written without labels. Refuses a non-empty
    ``out_dir`` unless ``force`` is set.
    """
    for name, n in (("unlabeled", n_unlabeled), ("labeled", n_labeled), ("test", n_test)):
        if n < 0:
            raise ValueError(f"{name} count must be >= 0")
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass force=True to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.default_rng(rng_seed).integers(0, 2 ** 31 - 1, n_unlabeled + n_labeled + n_test)
    entries = []
    splits = ["unlabeled"] * n_unlabeled + ["labeled"] * n_labeled + ["test"] * n_test
    for i, (split, s) in enumerate(zip(splits, seeds)):
        spec, intensity, label = banded_phantom(int(s), dims)
        stem = f"{split}_{i:04d}"
        write_volume(intensity, out / f"{stem}_image.vvol")
        entry = {
            "id": stem,
            "split": split,
            "image": f"{stem}_image.vvol",
            "seed": spec.seed,
            "n_trees": spec.n_trees,
            "tree": asdict(spec.tree),
            "render": asdict(spec.render),
            "foreground_fraction": foreground_fraction(label),
        }
        if split != "unlabeled":
            write_volume(label, out / f"{stem}_label.vvol")
            entry["label"] = f"{stem}_label.vvol"
        entries.append(entry)
    manifest = {
        "format": "vesseldistill-dataset/1",
        "seed": int(rng_seed),
        "dims": list(dims),
        "counts": {"unlabeled": n_unlabeled, "labeled": n_labeled, "test": n_test},
        "volumes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def spec_from_entry(entry: Dict, dims) -> PhantomSpec:
    return PhantomSpec(int(entry["seed"]), tuple(dims), int(entry["n_trees"]),
                       TreeParams(**entry["tree"]), RenderParams(**entry["render"]))
