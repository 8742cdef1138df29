"""scikit-learn style wrappers around the training pipeline.

Volumes are passed as a list of 3-D arrays (or a 4-D array). Labels are a
parallel list in which ``None`` marks an unlabeled volume.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .losses import LossWeights
from .metrics import confusion, dsc
from .networks import STUDENT_WIDTHS, TEACHER_WIDTHS
from .pipeline import (PhantomData, RunConfig, VolumeRecord, distill_student, eval_perplexity,
                       finetune_teacher, infer_volume, pretrain_teacher, train_supervised)
from .validation import as_label_list, as_volume_list, check_patch_size
from .volume import Volume, percentile_clip_normalize


class IntensityNormalizer(TransformerMixin, BaseEstimator):
    """Clip each volume at its own percentile and rescale it to [0, 1]. Stateless."""

    def __init__(self, percentile: float = 95.0):
        self.percentile = percentile

    def fit(self, X, y=None):
        vols = as_volume_list(X)
        self.n_volumes_seen_ = len(vols)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_volumes_seen_")
        return [percentile_clip_normalize(Volume(v.astype(np.float32)), self.percentile).voxels
                for v in as_volume_list(X)]


def _dataset(X, y, split_labeled="labeled"):
    vols = as_volume_list(X)
    labels = as_label_list(y, len(vols), [v.shape for v in vols])
    norm = IntensityNormalizer().fit(vols).transform(vols)
    recs = []
    for i, (img, lab) in enumerate(zip(norm, labels)):
        split = "unlabeled" if lab is None else split_labeled
        recs.append(VolumeRecord(f"{split}_{i:04d}", split, img.astype(np.float64), lab))
    return PhantomData(recs), [v.shape for v in vols]


class _SegmenterMixin:
    threshold = 0.5

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        norm = IntensityNormalizer().fit(X).transform(X)
        patch = self.patch_size
        return [infer_volume(self.model_, v, patch, self.infer_overlap).voxels for v in norm]

    def predict(self, X):
        return [(p >= self.threshold).astype(np.uint8) for p in self.predict_proba(X)]

    def score(self, X, y):
        """Mean DSC of thresholded predictions."""
        preds = self.predict(X)
        labels = as_label_list(y, len(preds), [p.shape for p in preds])
        return float(np.mean([dsc(confusion(p, t)) for p, t in zip(preds, labels)]))


class VesselTeacher(_SegmenterMixin, BaseEstimator):
    """Codebook teacher: reconstruction pretraining on every volume, then Dice
    fine-tuning on the labeled ones."""

    def __init__(self, pretrain_epochs: int = 20, finetune_epochs: int = 10, patch_size: int = 32,
                 batch_size: int = 2, pretrain_lr: float = 1e-3, finetune_lr: float = 1e-3,
                 quantizer: str = "gumbel", codebook_size: int = 256, alpha: float = 0.1,
                 widths: Sequence[int] = TEACHER_WIDTHS, student_width: int = 32,
                 patches_per_volume: int = 1, infer_overlap: int = 0, seed: int = 0):
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.pretrain_lr = pretrain_lr
        self.finetune_lr = finetune_lr
        self.quantizer = quantizer
        self.codebook_size = codebook_size
        self.alpha = alpha
        self.widths = widths
        self.student_width = student_width
        self.patches_per_volume = patches_per_volume
        self.infer_overlap = infer_overlap
        self.seed = seed

    def _config(self) -> RunConfig:
        return RunConfig(patch_size=self.patch_size, batch_size=self.batch_size, seed=self.seed,
                         quantizer=self.quantizer, codebook_size=self.codebook_size,
                         teacher_widths=tuple(self.widths),
                         student_widths=STUDENT_WIDTHS[:-1] + (self.student_width,),
                         patches_per_volume=self.patches_per_volume,
                         weights=LossWeights(alpha=self.alpha))

    def fit(self, X, y=None):
        """Pretrain on all volumes, then fine-tune on those with labels.

        Sets ``perplexity_`` (codebook usage over the last pretraining epoch)
        and ``eval_perplexity_`` (nearest-code usage over all grid crops).
        """
        data, shapes = _dataset(X, y)
        check_patch_size(self.patch_size, shapes)
        cfg = self._config()
        pre_data = PhantomData([replace(r, split="unlabeled") for r in data.records])
        pre = pretrain_teacher(replace(cfg, epochs=self.pretrain_epochs,
                                       learning_rate=self.pretrain_lr), pre_data)
        self.pretrain_history_ = pre.history
        if data.labeled:
            fine = finetune_teacher(replace(cfg, epochs=self.finetune_epochs,
                                            learning_rate=self.finetune_lr), data, pre.checkpoint)
            self.model_, self.checkpoint_ = fine.model, fine.checkpoint
            self.finetune_history_ = fine.history
        else:
            self.model_, self.checkpoint_ = pre.model, pre.checkpoint
            self.finetune_history_ = []
        self.perplexity_ = pre.checkpoint.metrics["perplexity"]
        self.eval_perplexity_ = eval_perplexity(self.model_, pre_data.records, self.patch_size,
                                                max(self.patch_size // 2, 1))
        return self

    def transform(self, X):
        """Quantised, aligned bottleneck features for whole volumes (one array per volume)."""
        check_is_fitted(self, "model_")
        norm = IntensityNormalizer().fit(X).transform(X)
        return [self.model_.distill_target(v.astype(np.float64)[None, None])[0] for v in norm]


class VesselStudent(_SegmenterMixin, BaseEstimator):
    """Lightweight student trained with Dice, pseudo-label Dice and codebook feature distillation.

    ``teacher`` is a fitted :class:`VesselTeacher`; with ``beta_max=0`` and
    ``gamma=0`` it may be omitted and the student trains on labels alone.
    """

    def __init__(self, teacher: Optional[VesselTeacher] = None, epochs: int = 50,
                 patch_size: int = 32, batch_size: int = 2, learning_rate: float = 1e-3,
                 beta_max: float = 1.0, ramp_epochs: int = 10, gamma: float = 1.0,
                 widths: Sequence[int] = STUDENT_WIDTHS, feature_target: str = "codebook",
                 pseudo_threshold: float = 0.5, infer_overlap: int = 0, seed: int = 0):
        self.teacher = teacher
        self.epochs = epochs
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta_max = beta_max
        self.ramp_epochs = ramp_epochs
        self.gamma = gamma
        self.widths = widths
        self.feature_target = feature_target
        self.pseudo_threshold = pseudo_threshold
        self.infer_overlap = infer_overlap
        self.seed = seed

    def fit(self, X, y=None):
        data, shapes = _dataset(X, y)
        check_patch_size(self.patch_size, shapes)
        cfg = RunConfig(stage="distill", epochs=self.epochs, patch_size=self.patch_size,
                        batch_size=self.batch_size, learning_rate=self.learning_rate,
                        seed=self.seed, student_widths=tuple(self.widths),
                        feature_target=self.feature_target, pseudo_threshold=self.pseudo_threshold,
                        infer_overlap=self.infer_overlap,
                        weights=LossWeights(beta_max=self.beta_max, ramp_epochs=self.ramp_epochs,
                                            gamma=self.gamma))
        teacher_model = None
        if self.teacher is not None:
            check_is_fitted(self.teacher, "model_")
            teacher_model = self.teacher.model_
        if teacher_model is None and self.beta_max == 0 and self.gamma == 0:
            res = train_supervised(cfg, data)
        else:
            res = distill_student(cfg, data, teacher_model)
        self.model_, self.checkpoint_, self.history_ = res.model, res.checkpoint, res.history
        return self
