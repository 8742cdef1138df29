"""Codebook-bridged teacher/student distillation for 3-D vessel segmentation."""

from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .codebook import Codebook, code_perplexity, codebook_loss, init_codebook, quantize
from .estimators import IntensityNormalizer, VesselStudent, VesselTeacher
from .losses import LossWeights, StageLossReport
from .metrics import MetricsReport, cl_dice, confusion, dsc, evaluate, hd95, jaccard
from .networks import StudentNet, TeacherNet, count_parameters
from .pipeline import RunConfig
from .transport import sinkhorn_smd
from .volume import Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "Codebook", "IntensityNormalizer", "LossWeights", "MetricsReport", "ModelCheckpoint",
    "RunConfig", "StageLossReport", "StudentNet", "TeacherNet", "VesselStudent", "VesselTeacher",
    "Volume", "cl_dice", "code_perplexity", "codebook_loss", "confusion", "count_parameters", "dsc",
    "evaluate", "hd95", "init_codebook", "jaccard", "load_checkpoint", "quantize", "read_volume",
    "save_checkpoint", "sinkhorn_smd", "write_volume",
]
