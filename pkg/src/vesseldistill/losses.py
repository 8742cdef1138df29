"""Training objectives for teacher pretraining, fine-tuning and student distillation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

from . import tensor as T
from .codebook import codebook_loss
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor

TERM_NAMES = ("L_rec", "L_cb", "L_seg", "L_semi", "L_dis")


@dataclass
class LossWeights:
    """Scalar weights of the composite losses.

    ``alpha`` weights the codebook loss during pretraining, ``beta_max`` and
    ``ramp_epochs`` shape the pseudo-label weight schedule, ``gamma`` weights
    feature distillation and ``lam`` is the commitment weight.
    """

    alpha: float = 0.1
    beta_max: float = 1.0
    ramp_epochs: int = 60
    gamma: float = 1.0
    lam: float = 0.25

    def __post_init__(self):
        for name in ("alpha", "beta_max", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")
        if self.ramp_epochs < 1:
            raise ConfigurationError("ramp_epochs must be >= 1")


@dataclass
class StageLossReport:
    """Per-term loss values plus the weighted total that was optimised."""

    terms: Dict[str, float] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    loss: Optional[Tensor] = field(default=None, repr=False)

    def weighted_sum(self) -> float:
        return math.fsum(self.weights.get(k, 0.0) * v for k, v in self.terms.items())

    def as_record(self) -> Dict[str, float]:
        rec = {k: self.terms.get(k, 0.0) for k in TERM_NAMES}
        rec["total"] = self.total
        return rec


def _same_shape(a: Tensor, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def mse_loss(x, x_rec) -> Tensor:
    x, x_rec = T._as_tensor(x), T._as_tensor(x_rec)
    _same_shape(x, x_rec, "mse_loss")
    d = x_rec - x
    return T.mean(d * d)


def l1_loss(a, b) -> Tensor:
    a, b = T._as_tensor(a), T._as_tensor(b)
    _same_shape(a, b, "l1_loss")
    return T.mean(T.tabs(a - b))


def soft_dice_loss(pred, target, smooth: float = 1.0) -> Tensor:
    """``1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth)`` over the whole batch."""
    pred, target = T._as_tensor(pred), T._as_tensor(target)
    _same_shape(pred, target, "soft_dice_loss")
    if smooth <= 0:
        raise ConfigurationError("dice smoothing must be positive")
    inter = T.tsum(pred * target)
    denom = T.tsum(pred) + float(target.data.sum()) + smooth
    return 1.0 - (inter * 2.0 + smooth) / denom


def beta_ramp(epoch: int, ramp_epochs: int, beta_max: float) -> float:
    """Sigmoid-shaped warm-up ``beta_max * exp(-5 (1 - min(e/ramp, 1))^2)``."""
    if ramp_epochs < 1:
        raise ConfigurationError("ramp_epochs must be >= 1")
    phase = 1.0 - min(max(epoch, 0) / ramp_epochs, 1.0)
    return beta_max * math.exp(-5.0 * phase * phase)


def _report(terms: Dict[str, Tensor], weights: Dict[str, float]) -> StageLossReport:
    """Sum only terms with non-zero weight into the optimised graph."""
    total = None
    values = {}
    for name, t in terms.items():
        values[name] = float(t.data)
        w = weights[name]
        if w == 0.0:
            continue
        part = t if w == 1.0 else t * w
        total = part if total is None else total + part
    if total is None:
        total = T.Tensor(0.0)
    return StageLossReport(terms=values, weights=dict(weights), total=float(total.data), loss=total)


def teacher_pretrain_loss(x, x_rec, z_aligned, z_code, w: LossWeights,
                          reconstruction: str = "mse") -> StageLossReport:
    """Reconstruction loss plus ``alpha`` times the codebook loss."""
    if reconstruction == "mse":
        rec = mse_loss(x, x_rec)
    elif reconstruction == "l1":
        rec = l1_loss(x, x_rec)
    else:
        raise ConfigurationError(f"unknown reconstruction loss {reconstruction!r}")
    cb = codebook_loss(z_aligned, z_code, w.lam)
    return _report({"L_rec": rec, "L_cb": cb}, {"L_rec": 1.0, "L_cb": w.alpha})


def teacher_finetune_loss(seg, y_gt, smooth: float = 1.0) -> StageLossReport:
    return _report({"L_seg": soft_dice_loss(seg, y_gt, smooth)}, {"L_seg": 1.0})


def student_loss(seg, y_gt=None, y_pse=None, z_stu=None, z_tea_q=None,
                 w: LossWeights = None, epoch: int = 0, smooth: float = 1.0) -> StageLossReport:
    """Supervised Dice + ramped pseudo-label Dice + ``gamma`` L1 feature distillation.

    Labeled batches pass ``y_gt``; unlabeled batches pass ``y_pse``. Terms whose
    weight is zero are reported but kept out of the optimised graph, so their
    parameter gradients are exactly zero.
    """
    w = w or LossWeights()
    beta = beta_ramp(epoch, w.ramp_epochs, w.beta_max)
    if y_gt is None and y_pse is None and beta > 0:
        raise ContractError("student_loss with beta > 0 needs y_gt or y_pse")
    terms, weights = {}, {}
    if y_gt is not None:
        terms["L_seg"] = soft_dice_loss(seg, y_gt, smooth)
        weights["L_seg"] = 1.0
    if y_pse is not None:
        terms["L_semi"] = soft_dice_loss(seg, y_pse, smooth)
        weights["L_semi"] = beta
    if z_stu is not None and z_tea_q is not None:
        terms["L_dis"] = l1_loss(z_stu, z_tea_q)
        weights["L_dis"] = w.gamma
    return _report(terms, weights)
