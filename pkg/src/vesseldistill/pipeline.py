"""Three-stage training pipeline and tiled whole-volume inference.

Randomness is derived per ``(seed, stage, epoch, stream)``; no generator
state is carried between epochs, so a run resumed from a checkpoint replays
the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import ModelCheckpoint, check_descriptor
from .codebook import align_down, code_perplexity, nearest_codes
from .errors import ConfigurationError, TrainingAborted
from .losses import (LossWeights, StageLossReport, student_loss, teacher_finetune_loss,
                     teacher_pretrain_loss)
from .metrics import confusion, dsc
from .networks import STUDENT_WIDTHS, TEACHER_WIDTHS, StudentNet, TeacherNet
from .nn import Module
from .optim import Adam
from .volume import Volume, percentile_clip_normalize, read_volume, stitch, tile

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "distill")
PAPER_EPOCHS = {"pretrain": 80, "finetune": 30, "distill": 300}
PAPER_LR = {"pretrain": 1e-3, "finetune": 1e-5, "distill": 1e-2}
PAPER_PATCH = 64
DESK_EPOCHS = {"pretrain": 20, "finetune": 10, "distill": 50}
DESK_LR = {"pretrain": 1e-3, "finetune": 1e-3, "distill": 1e-3}
DESK_PATCH = 32

_STAGE_CODE = {"pretrain": 1, "finetune": 2, "distill": 3, "baseline": 3}
_STREAM_CODE = {"unlabeled": 0, "labeled": 1, "gumbel": 2}
# fields that locate files rather than shape training; kept out of checkpoints
_LOCATION_FIELDS = ("manifest", "output_dir")


@dataclass
class RunConfig:
    """Settings for one pipeline stage.

    ``epochs``, ``learning_rate`` and ``patch_size`` left as ``None`` take the
    defaults of ``scale`` (``"desk"`` or ``"paper"``).
    """

    stage: str = "pretrain"
    scale: str = "desk"
    epochs: Optional[int] = None
    batch_size: int = 2
    patch_size: Optional[int] = None
    patch_stride: Optional[int] = None
    patches_per_volume: int = 1
    learning_rate: Optional[float] = None
    lr_decay: float = 0.97
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    quantizer: str = "gumbel"
    tau_start: float = 2.0
    tau_end: float = 0.5
    reconstruction: str = "mse"
    feature_target: str = "codebook"
    distill_on: str = "both"
    labeled_ratio: int = 1
    pseudo_threshold: float = 0.5
    infer_patch: Optional[int] = None
    infer_overlap: int = 0
    teacher_widths: Tuple[int, ...] = TEACHER_WIDTHS
    student_widths: Tuple[int, ...] = STUDENT_WIDTHS
    codebook_size: int = 256
    codebook_init: str = "uniform"
    codebook_lr_scale: float = 1.0
    manifest: Optional[str] = None
    output_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.teacher_widths = tuple(int(w) for w in self.teacher_widths)
        self.student_widths = tuple(int(w) for w in self.student_widths)
        choices = {
            "stage": STAGES, "scale": ("desk", "paper"), "quantizer": ("gumbel", "argmin"),
            "reconstruction": ("mse", "l1"), "feature_target": ("codebook", "intermediate"),
            "distill_on": ("both", "labeled", "unlabeled"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("batch_size", "patches_per_volume", "labeled_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.pseudo_threshold <= 1.0:
            raise ConfigurationError("pseudo_threshold must lie in [0, 1]")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ConfigurationError("Gumbel temperatures must be positive")

    def resolved(self) -> "RunConfig":
        paper = self.scale == "paper"
        epochs = self.epochs if self.epochs is not None else (PAPER_EPOCHS if paper else DESK_EPOCHS)[self.stage]
        lr = self.learning_rate if self.learning_rate is not None else (PAPER_LR if paper else DESK_LR)[self.stage]
        patch = self.patch_size if self.patch_size is not None else (PAPER_PATCH if paper else DESK_PATCH)
        stride = self.patch_stride if self.patch_stride is not None else max(patch // 2, 1)
        infer_patch = self.infer_patch if self.infer_patch is not None else patch
        return replace(self, epochs=epochs, learning_rate=lr, patch_size=patch,
                       patch_stride=stride, infer_patch=infer_patch)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["teacher_widths"] = list(self.teacher_widths)
        d["student_widths"] = list(self.student_widths)
        return d

    def training_dict(self) -> Dict:
        d = self.resolved().to_dict()
        for k in _LOCATION_FIELDS:
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- data


@dataclass
class VolumeRecord:
    key: str
    split: str
    image: np.ndarray
    label: Optional[np.ndarray] = None


class PhantomData:
    """Preprocessed images (95th-percentile clip + min-max) and labels, grouped by split."""

    def __init__(self, records: Sequence[VolumeRecord]):
        self.records = list(records)

    @classmethod
    def from_manifest(cls, path) -> "PhantomData":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"manifest {path} not found")
        manifest = json.loads(path.read_text())
        root = path.parent
        recs = []
        for e in manifest["volumes"]:
            img = percentile_clip_normalize(read_volume(root / e["image"])).voxels.astype(np.float64)
            lab = read_volume(root / e["label"]).voxels if "label" in e else None
            recs.append(VolumeRecord(e["id"], e["split"], img, lab))
        return cls(recs)

    @classmethod
    def from_arrays(cls, images, labels=None, split="labeled") -> "PhantomData":
        labels = labels if labels is not None else [None] * len(images)
        recs = []
        for i, (img, lab) in enumerate(zip(images, labels)):
            vol = percentile_clip_normalize(Volume(np.asarray(img, dtype=np.float32)))
            recs.append(VolumeRecord(f"{split}_{i:04d}", split, vol.voxels.astype(np.float64),
                                     None if lab is None else np.asarray(lab, dtype=np.uint8)))
        return cls(recs)

    def split(self, name: str) -> List[VolumeRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def unlabeled(self):
        return self.split("unlabeled")

    @property
    def labeled(self):
        return self.split("labeled")

    @property
    def test(self):
        return self.split("test")


def crop_origins(dims: Sequence[int], patch: int, stride: int) -> List[Tuple[int, int, int]]:
    axes = []
    for n in dims:
        if n < patch:
            raise ConfigurationError(f"volume extent {n} is smaller than the patch size {patch}")
        o = list(range(0, n - patch + 1, stride))
        if o[-1] != n - patch:
            o.append(n - patch)
        axes.append(o)
    return list(product(*axes))


def _crop(arr: np.ndarray, origin, patch: int) -> np.ndarray:
    z, y, x = origin
    return arr[z:z + patch, y:y + patch, x:x + patch]


def _rng(seed: int, stage: str, epoch: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STAGE_CODE[stage], int(epoch), _STREAM_CODE[stream]])


def _sample_items(records, rng, patch, stride, rounds) -> List[Tuple[int, Tuple[int, int, int]]]:
    """``rounds`` passes over the volumes in shuffled order, one random grid crop per visit."""
    grids = [crop_origins(r.image.shape, patch, stride) for r in records]
    items = []
    for _ in range(rounds):
        for i in rng.permutation(len(records)):
            g = grids[i]
            items.append((int(i), g[int(rng.integers(len(g)))]))
    return items


def _batches(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _stack(records, batch, patch, what="image") -> np.ndarray:
    arrs = [_crop(getattr(records[i], what), o, patch) for i, o in batch]
    return np.stack(arrs)[:, None].astype(np.float64)


# ---------------------------------------------------------------- model plumbing


def build_model(descriptor: Dict) -> Module:
    kind = descriptor.get("kind")
    if kind == "teacher":
        return TeacherNet(descriptor["widths"], descriptor["student_width"], descriptor["codebook_size"])
    if kind == "student":
        return StudentNet(descriptor["widths"])
    raise ConfigurationError(f"unknown model kind {kind!r}")


def model_checkpoint(model: Module, stage: str, epoch: int, cfg: RunConfig,
                     optimizer: Optional[Adam] = None, metrics: Optional[Dict] = None) -> ModelCheckpoint:
    tensors = OrderedDict((f"model.{k}", v) for k, v in model.state_dict().items())
    if isinstance(model, TeacherNet):
        tensors["buffer.codebook.usage_counts"] = model.codebook.usage_counts.copy()
    if optimizer is not None:
        for k, v in optimizer.state_arrays().items():
            tensors[f"optim.{k}"] = np.array(v)
    return ModelCheckpoint(model.descriptor(), stage, int(epoch), tensors, dict(metrics or {}),
                           cfg.training_dict())


def restore_model(ckpt: ModelCheckpoint, model: Optional[Module] = None) -> Module:
    """Load parameters (and codebook usage) from ``ckpt`` into ``model`` or a fresh model."""
    model = model if model is not None else build_model(ckpt.descriptor)
    check_descriptor(ckpt, model.descriptor())
    model.load_state_dict(ckpt.group("model."))
    if isinstance(model, TeacherNet):
        usage = ckpt.tensors.get("buffer.codebook.usage_counts")
        if usage is not None:
            model.codebook.usage_counts = np.array(usage, dtype=np.int64)
    return model


def parameter_digest(model: Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def segment(model: Module, x: np.ndarray) -> np.ndarray:
    """Foreground probabilities from either network, without building a graph."""
    with T.no_grad():
        if isinstance(model, TeacherNet):
            return model(x, mode="segment")["output"].data
        return model(x)["seg"].data


class MetricsLog:
    """Append-only line-delimited JSON records."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict] = []

    def write(self, record: Dict) -> None:
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class StageResult:
    model: Module
    checkpoint: ModelCheckpoint
    history: List[Dict] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)


class _EpochStats:
    def __init__(self):
        self.sums = defaultdict(float)
        self.counts = defaultdict(int)
        self.totals = []

    def add(self, rep: StageLossReport):
        for k, v in rep.terms.items():
            self.sums[k] += v
            self.counts[k] += 1
        self.totals.append(rep.total)

    def record(self) -> Dict[str, float]:
        rec = {k: self.sums[k] / self.counts[k] for k in sorted(self.sums)}
        rec["total"] = float(np.mean(self.totals)) if self.totals else 0.0
        rec["steps"] = len(self.totals)
        return rec


def _apply(rep: StageLossReport, model: Module, opt: Adam, stage: str, epoch: int, step: int) -> bool:
    """Back-propagate and update; returns False when the batch carried no trainable loss."""
    if not math.isfinite(rep.total):
        bad = [n for n, p in model.named_parameters() if not np.all(np.isfinite(p.data))]
        raise TrainingAborted(
            f"non-finite loss in {stage} at epoch {epoch}, step {step}: {rep.terms}",
            snapshot={"stage": stage, "epoch": epoch, "step": step, "terms": rep.terms,
                      "lr": opt.lr, "non_finite_parameters": bad},
        )
    if not rep.loss.requires_grad:
        return False
    model.zero_grad()
    T.backward(rep.loss)
    opt.step()
    model.zero_grad()
    return True


def _tau(cfg: RunConfig, epoch: int) -> float:
    span = max(cfg.epochs - 1, 1)
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * min(epoch, span) / span


# ---------------------------------------------------------------- stages


def pretrain_teacher(cfg: RunConfig, data: PhantomData, teacher: Optional[TeacherNet] = None,
                     resume: Optional[ModelCheckpoint] = None,
                     metrics_log: Optional[MetricsLog] = None, until: Optional[int] = None) -> StageResult:
    """Reconstruction + codebook training on unlabeled patches.

    ``until`` stops after that many epochs of the configured schedule; the
    checkpoint can then be passed back as ``resume`` to finish the run.
    """
    cfg = replace(cfg, stage="pretrain").resolved()
    records = data.unlabeled
    if not records:
        raise ConfigurationError("pretraining needs unlabeled volumes")
    if teacher is None:
        teacher = TeacherNet(cfg.teacher_widths, cfg.student_widths[-1], cfg.codebook_size,
                             seed=cfg.seed, codebook_init=cfg.codebook_init)
    params = teacher.pretrain_parameters()
    scales = [cfg.codebook_lr_scale if p is teacher.codebook.entries else 1.0 for p in params]
    opt = Adam(params, cfg.learning_rate, decay=cfg.lr_decay, scales=scales)
    start = 0
    if resume is not None:
        restore_model(resume, teacher)
        opt.load_state_arrays(resume.group("optim."))
        start = resume.epoch
    qmode = "gumbel_train" if cfg.quantizer == "gumbel" else "argmin_train"
    metrics_log = metrics_log or MetricsLog()
    result = StageResult(teacher, None)
    stop = cfg.epochs if until is None else min(until, cfg.epochs)
    for epoch in range(start, stop):
        opt.set_epoch(epoch)
        items = _sample_items(records, _rng(cfg.seed, "pretrain", epoch, "unlabeled"),
                              cfg.patch_size, cfg.patch_stride, cfg.patches_per_volume)
        grng = _rng(cfg.seed, "pretrain", epoch, "gumbel")
        tau = _tau(cfg, epoch)
        stats = _EpochStats()
        codes = []
        for step, batch in enumerate(_batches(items, cfg.batch_size)):
            x = _stack(records, batch, cfg.patch_size)
            out = teacher(x, mode="reconstruct", quantize_mode=qmode, rng=grng, temperature=tau)
            rep = teacher_pretrain_loss(x, out["output"], out["aligned"], out["quant"].z_code,
                                        cfg.weights, cfg.reconstruction)
            _apply(rep, teacher, opt, "pretrain", epoch, step)
            stats.add(rep)
            result.step_losses.append(rep.total)
            codes.append(out["quant"].codes.ravel())
        rec = {"stage": "pretrain", "epoch": epoch + 1, "lr": opt.lr, "tau": tau,
               "perplexity": code_perplexity(teacher.codebook, np.concatenate(codes)),
               **stats.record()}
        result.history.append(rec)
        metrics_log.write(rec)
    # "perplexity" is measured over the last epoch's training assignments; the
    # nearest-code perplexity over all grid crops is kept alongside it
    eval_ppl = eval_perplexity(teacher, records, cfg.patch_size, cfg.patch_stride)
    final = {"perplexity": eval_ppl, "eval_perplexity": eval_ppl}
    if result.history:
        final.update({k: result.history[-1][k] for k in ("perplexity", "L_rec", "L_cb", "total")})
    result.checkpoint = model_checkpoint(teacher, "pretrain", max(stop, start), cfg, opt, final)
    return result


def eval_perplexity(teacher: TeacherNet, records, patch: int, stride: int) -> float:
    """Perplexity of nearest-code assignments over every grid crop of ``records``."""
    codes = []
    for r in records:
        crops = np.stack([_crop(r.image, o, patch) for o in crop_origins(r.image.shape, patch, stride)])
        with T.no_grad():
            z, _ = teacher.encode(crops[:, None])
            za = align_down(z, teacher.align).data
        flat = np.moveaxis(za, 1, -1).reshape(-1, za.shape[1])
        codes.append(nearest_codes(flat, teacher.codebook.entries.data))
    return code_perplexity(teacher.codebook, np.concatenate(codes))


def finetune_teacher(cfg: RunConfig, data: PhantomData, pretrained: ModelCheckpoint,
                     metrics_log: Optional[MetricsLog] = None) -> StageResult:
    """Dice training of encoder, attention and segmentation decoder on labeled patches."""
    cfg = replace(cfg, stage="finetune").resolved()
    records = data.labeled
    if not records:
        raise ConfigurationError("fine-tuning needs labeled volumes")
    if any(r.label is None for r in records):
        raise ConfigurationError("a labeled volume has no label file")
    teacher = restore_model(pretrained)
    opt = Adam(teacher.finetune_parameters(), cfg.learning_rate, decay=cfg.lr_decay)
    metrics_log = metrics_log or MetricsLog()
    result = StageResult(teacher, None)
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        items = _sample_items(records, _rng(cfg.seed, "finetune", epoch, "labeled"),
                              cfg.patch_size, cfg.patch_stride, cfg.patches_per_volume)
        stats = _EpochStats()
        for step, batch in enumerate(_batches(items, cfg.batch_size)):
            x = _stack(records, batch, cfg.patch_size)
            y = _stack(records, batch, cfg.patch_size, "label")
            rep = teacher_finetune_loss(teacher(x, mode="segment")["output"], y)
            _apply(rep, teacher, opt, "finetune", epoch, step)
            stats.add(rep)
            result.step_losses.append(rep.total)
        rec = {"stage": "finetune", "epoch": epoch + 1, "lr": opt.lr, **stats.record()}
        result.history.append(rec)
        metrics_log.write(rec)
    metrics = {"L_seg": result.history[-1]["L_seg"]} if result.history else {}
    result.checkpoint = model_checkpoint(teacher, "finetune", cfg.epochs, cfg, opt, metrics)
    return result


def infer_volume(model: Module, volume, patch: int, overlap: int = 0) -> Volume:
    """Tile a preprocessed volume, run the network on each tile and average the overlaps."""
    vol = volume if isinstance(volume, Volume) else Volume(np.asarray(volume, dtype=np.float32))
    out = []
    for idx, t in tile(vol, patch, overlap):
        prob = segment(model, t.voxels.astype(np.float64)[None, None])[0, 0]
        out.append((idx, Volume(np.clip(prob, 0.0, 1.0).astype(np.float32), vol.spacing_um,
                                "probability")))
    return stitch(out)


@dataclass
class PseudoLabelSet:
    labels: Dict[str, np.ndarray]
    teacher_digest: str
    threshold: float
    diagnostics: Dict[str, float] = field(default_factory=dict)


def generate_pseudo_labels(teacher: TeacherNet, records: Sequence[VolumeRecord], threshold: float = 0.5,
                           patch: int = DESK_PATCH, overlap: int = 0,
                           reference: Sequence[VolumeRecord] = ()) -> PseudoLabelSet:
    """Binary teacher predictions; probabilities equal to ``threshold`` count as foreground.

    Labeled ``reference`` volumes are pseudo-labelled too and scored against
    their ground truth; the mean DSC lands in ``diagnostics``.
    """
    labels = {}
    for r in records:
        prob = infer_volume(teacher, r.image.astype(np.float32), patch, overlap).voxels
        labels[r.key] = (prob >= threshold).astype(np.uint8)
    out = PseudoLabelSet(labels, parameter_digest(teacher), float(threshold))
    if reference:
        scores = evaluate_model(teacher, reference, patch, overlap, threshold)
        out.diagnostics["pseudo_label_dsc"] = scores["dsc"]
    return out


class _TargetCache:
    """Frozen-teacher feature targets keyed by (split, volume index, crop origin)."""

    def __init__(self, teacher: TeacherNet, kind: str):
        self.teacher = teacher
        self.kind = kind
        self.store = {}

    def get(self, split, records, batch, patch) -> np.ndarray:
        out = []
        for i, o in batch:
            key = (split, i, o)
            if key not in self.store:
                x = _crop(records[i].image, o, patch)[None, None]
                if self.kind == "codebook":
                    self.store[key] = self.teacher.distill_target(x)[0]
                else:
                    with T.no_grad():
                        z, _ = self.teacher.encode(x)
                        self.store[key] = align_down(z, self.teacher.align).data[0]
            out.append(self.store[key])
        return np.stack(out)


def _labeled_steps(cfg: RunConfig, data: PhantomData) -> int:
    n_unl = len(data.unlabeled) * cfg.patches_per_volume
    if n_unl:
        return math.ceil(n_unl / cfg.batch_size) * cfg.labeled_ratio
    return math.ceil(len(data.labeled) * cfg.patches_per_volume / cfg.batch_size)


def _labeled_items(cfg, records, epoch, n_steps):
    rng = _rng(cfg.seed, "distill", epoch, "labeled")
    need = n_steps * cfg.batch_size
    rounds = math.ceil(need / len(records))
    return _sample_items(records, rng, cfg.patch_size, cfg.patch_stride, rounds)[:need]


def distill_student(cfg: RunConfig, data: PhantomData, teacher: Optional[TeacherNet] = None,
                    pseudo: Optional[PseudoLabelSet] = None, student: Optional[StudentNet] = None,
                    resume: Optional[ModelCheckpoint] = None,
                    metrics_log: Optional[MetricsLog] = None) -> StageResult:
    """Train the student on interleaved unlabeled and labeled batches.

    Each unlabeled batch is followed by ``labeled_ratio`` labeled batches.
    Weights of zero switch terms off entirely; with ``beta_max = gamma = 0``
    no teacher is needed and the labeled updates coincide with
    :func:`train_supervised`.
    """
    cfg = replace(cfg, stage="distill").resolved()
    w = cfg.weights
    labeled, unlabeled = data.labeled, data.unlabeled
    if not labeled or any(r.label is None for r in labeled):
        raise ConfigurationError("distillation needs labeled volumes with labels")
    need_teacher = w.gamma > 0 or (w.beta_max > 0 and pseudo is None and unlabeled)
    if need_teacher and teacher is None:
        raise ConfigurationError("distillation with beta_max > 0 or gamma > 0 needs a teacher checkpoint")
    if student is None:
        student = StudentNet(cfg.student_widths, seed=cfg.seed)
    if teacher is not None:
        if teacher.student_width != student.bottleneck_width:
            raise ConfigurationError(
                f"teacher aligns to {teacher.student_width} channels, student bottleneck has "
                f"{student.bottleneck_width}")
        teacher.set_trainable(False)
    if w.beta_max > 0 and pseudo is None and unlabeled:
        pseudo = generate_pseudo_labels(teacher, unlabeled, cfg.pseudo_threshold,
                                        cfg.infer_patch, cfg.infer_overlap, reference=labeled)
    targets = _TargetCache(teacher, cfg.feature_target) if w.gamma > 0 else None
    unl_pseudo = [pseudo.labels[r.key] for r in unlabeled] if (pseudo and w.beta_max > 0) else None

    opt = Adam(student.parameters(), cfg.learning_rate, decay=cfg.lr_decay)
    start = 0
    if resume is not None:
        restore_model(resume, student)
        opt.load_state_arrays(resume.group("optim."))
        start = resume.epoch
    n_lab = _labeled_steps(cfg, data)
    metrics_log = metrics_log or MetricsLog()
    result = StageResult(student, None)
    P = cfg.patch_size
    dis_unl = targets is not None and cfg.distill_on in ("both", "unlabeled")
    dis_lab = targets is not None and cfg.distill_on in ("both", "labeled")
    checked = False

    for epoch in range(start, cfg.epochs):
        opt.set_epoch(epoch)
        unl_batches = _batches(_sample_items(unlabeled, _rng(cfg.seed, "distill", epoch, "unlabeled"),
                                             P, cfg.patch_stride, cfg.patches_per_volume),
                               cfg.batch_size) if unlabeled else []
        lab_batches = _batches(_labeled_items(cfg, labeled, epoch, n_lab), cfg.batch_size)
        schedule = []
        li = 0
        for ub in unl_batches:
            schedule.append(("unlabeled", ub))
            for _ in range(cfg.labeled_ratio):
                if li < len(lab_batches):
                    schedule.append(("labeled", lab_batches[li]))
                    li += 1
        schedule.extend(("labeled", b) for b in lab_batches[li:])
        stats = _EpochStats()
        for step, (kind, batch) in enumerate(schedule):
            if kind == "unlabeled":
                y_pse = None
                if unl_pseudo is not None:
                    y_pse = np.stack([_crop(unl_pseudo[i], o, P) for i, o in batch])[:, None].astype(np.float64)
                z_t = targets.get("unlabeled", unlabeled, batch, P) if dis_unl else None
                if y_pse is None and z_t is None:
                    continue
                x = _stack(unlabeled, batch, P)
                y_gt = None
            else:
                x = _stack(labeled, batch, P)
                y_gt = _stack(labeled, batch, P, "label")
                y_pse = None
                z_t = targets.get("labeled", labeled, batch, P) if dis_lab else None
            out = student(x)
            if z_t is not None and not checked:
                if out["bottleneck"].shape != z_t.shape:
                    raise ConfigurationError(
                        f"student bottleneck {out['bottleneck'].shape} does not match teacher "
                        f"target {z_t.shape}")
                checked = True
            rep = student_loss(out["seg"], y_gt, y_pse, out["bottleneck"] if z_t is not None else None,
                               z_t, w, epoch)
            if _apply(rep, student, opt, "distill", epoch, step):
                result.step_losses.append(rep.total)
                stats.add(rep)
        rec = {"stage": "distill", "epoch": epoch + 1, "lr": opt.lr,
               "beta": _beta(w, epoch), **stats.record()}
        result.history.append(rec)
        metrics_log.write(rec)
    metrics = {}
    if teacher is not None:
        metrics["teacher_digest"] = parameter_digest(teacher)
    if pseudo is not None and "pseudo_label_dsc" in pseudo.diagnostics:
        metrics["pseudo_label_dsc"] = pseudo.diagnostics["pseudo_label_dsc"]
    result.checkpoint = model_checkpoint(student, "distill", cfg.epochs, cfg, opt, metrics)
    return result


def _beta(w: LossWeights, epoch: int) -> float:
    from .losses import beta_ramp
    return beta_ramp(epoch, w.ramp_epochs, w.beta_max)


def train_supervised(cfg: RunConfig, data: PhantomData, student: Optional[StudentNet] = None,
                     metrics_log: Optional[MetricsLog] = None) -> StageResult:
    """Dice-only student training on labeled batches (the baseline).

    Uses the same labeled batch stream and step count as
    :func:`distill_student`, so the two agree when distillation weights are 0.
    """
    cfg = replace(cfg, stage="distill").resolved()
    labeled = data.labeled
    if not labeled or any(r.label is None for r in labeled):
        raise ConfigurationError("supervised training needs labeled volumes with labels")
    student = student if student is not None else StudentNet(cfg.student_widths, seed=cfg.seed)
    opt = Adam(student.parameters(), cfg.learning_rate, decay=cfg.lr_decay)
    n_lab = _labeled_steps(cfg, data)
    metrics_log = metrics_log or MetricsLog()
    result = StageResult(student, None)
    P = cfg.patch_size
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        stats = _EpochStats()
        for step, batch in enumerate(_batches(_labeled_items(cfg, labeled, epoch, n_lab), cfg.batch_size)):
            x = _stack(labeled, batch, P)
            y = _stack(labeled, batch, P, "label")
            rep = teacher_finetune_loss(student(x)["seg"], y)
            _apply(rep, student, opt, "baseline", epoch, step)
            result.step_losses.append(rep.total)
            stats.add(rep)
        rec = {"stage": "baseline", "epoch": epoch + 1, "lr": opt.lr, **stats.record()}
        result.history.append(rec)
        metrics_log.write(rec)
    result.checkpoint = model_checkpoint(student, "distill", cfg.epochs, cfg, opt, {})
    return result


def evaluate_model(model: Module, records: Sequence[VolumeRecord], patch: int, overlap: int = 0,
                   threshold: float = 0.5) -> Dict[str, float]:
    """Mean and per-volume DSC of thresholded predictions against labels."""
    scores = []
    for r in records:
        prob = infer_volume(model, r.image.astype(np.float32), patch, overlap).voxels
        scores.append(dsc(confusion(prob >= threshold, r.label.astype(bool))))
    return {"dsc": float(np.mean(scores)) if scores else math.nan, "per_volume": scores}


def run_all(cfg: RunConfig, data: PhantomData, epochs: Optional[Dict[str, int]] = None,
            cfgs: Optional[Dict[str, RunConfig]] = None):
    """Pretrain, fine-tune and distill in sequence; returns the three stage results."""
    cfgs = dict(cfgs or {})
    for s in STAGES:
        c = cfgs.get(s, replace(cfg, stage=s))
        if epochs and s in epochs:
            c = replace(c, epochs=epochs[s])
        cfgs[s] = c
    pre = pretrain_teacher(cfgs["pretrain"], data)
    fine = finetune_teacher(cfgs["finetune"], data, pre.checkpoint)
    dis = distill_student(cfgs["distill"], data, fine.model)
    return pre, fine, dis
