"""Teacher and student segmentation networks.

Both networks share one layout so their bottlenecks line up voxel for voxel:
four encoder levels, each a stride-1 conv block followed by a stride-2 conv
block, giving a bottleneck at 1/16 of the input extent. Decoder levels run a
conv block at the coarse resolution, upsample by two, add the matching
encoder feature map, then apply a second convolution at the fine resolution.
The last decoder level ends in a 1x1x1 head so no 3x3x3 convolution runs on a
wide full-resolution feature map.

The teacher is wider, carries a self-attention block at the bottleneck, a
reconstruction decoder fed through the codebook, and a segmentation decoder
fed directly by the bottleneck.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .codebook import AlignmentPair, align_down, align_up, init_codebook, quantize
from .errors import ConfigurationError, DimensionError
from .nn import AttentionBlock, Conv3d, ConvNormAct, Module, count_parameters
from .tensor import Tensor

__all__ = ["StudentNet", "TeacherNet", "count_parameters", "DOWNSCALE"]

DOWNSCALE = 16
STUDENT_WIDTHS = (8, 16, 24, 32)
TEACHER_WIDTHS = (32, 64, 96, 128)


def _check_input(x: Tensor) -> None:
    if x.ndim != 5:
        raise DimensionError(f"expected input [B,C,D,H,W], got shape {x.shape}")
    for ax, n in zip(("depth", "height", "width"), x.shape[2:]):
        if n % DOWNSCALE:
            raise DimensionError(f"input {ax} extent {n} is not divisible by {DOWNSCALE}")


class Encoder(Module):
    def __init__(self, in_channels, widths, groups, slope, rng):
        self.same = []
        self.down = []
        prev = in_channels
        for w in widths:
            self.same.append(ConvNormAct(prev, w, 1, groups, slope, rng))
            self.down.append(ConvNormAct(w, w, 2, groups, slope, rng))
            prev = w

    def __call__(self, x):
        skips = []
        h = x
        for same, down in zip(self.same, self.down):
            h = same(h)
            skips.append(h)
            h = down(h)
        return h, skips


class Decoder(Module):
    """Mirror of :class:`Encoder`; ``use_skips=False`` gives a plain upsampling head."""

    def __init__(self, widths, out_channels, groups, slope, rng, use_skips=True,
                 in_channels: Optional[int] = None):
        self.use_skips = use_skips
        self.slope = slope
        self.coarse = []
        self.fine = []
        ws = list(widths)
        top = in_channels if in_channels is not None else ws[-1]
        for level in range(len(ws) - 1, -1, -1):
            cin = top if level == len(ws) - 1 else ws[level]
            self.coarse.append(ConvNormAct(cin, ws[level], 1, groups, slope, rng))
            if level > 0:
                self.fine.append(ConvNormAct(ws[level], ws[level - 1], 1, groups, slope, rng))
        self.head = Conv3d(ws[0], out_channels, 1, padding=0, rng=rng)

    def __call__(self, z, skips=None):
        h = z
        n = len(self.coarse)
        for i, coarse in enumerate(self.coarse):
            level = n - 1 - i
            h = T.upsample_nearest(coarse(h), 2)
            if self.use_skips:
                h = h + skips[level]
            if level > 0:
                h = self.fine[i](h)
        return self.head(h)


class StudentNet(Module):
    """Lightweight UNet: 4 encoder levels of two conv blocks, mirrored decoder, residual skips."""

    def __init__(self, widths: Sequence[int] = STUDENT_WIDTHS, in_channels: int = 1,
                 groups: int = 4, slope: float = 0.01, seed: int = 0):
        if len(widths) != 4:
            raise ConfigurationError("student needs exactly 4 encoder widths")
        rng = np.random.default_rng(seed)
        self.widths = tuple(int(w) for w in widths)
        self.encoder = Encoder(in_channels, self.widths, groups, slope, rng)
        self.decoder = Decoder(self.widths, 1, groups, slope, rng)

    @property
    def bottleneck_width(self) -> int:
        return self.widths[-1]

    def descriptor(self) -> dict:
        return {"kind": "student", "widths": list(self.widths)}

    def forward(self, x) -> Dict[str, Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        _check_input(x)
        z, skips = self.encoder(x)
        seg = T.sigmoid(self.decoder(z, skips))
        return {"seg": seg, "bottleneck": z}

    __call__ = forward


class TeacherNet(Module):
    """Attention-augmented encoder with a codebook-bottlenecked reconstruction
    decoder and a skip-connected segmentation decoder."""

    def __init__(self, widths: Sequence[int] = TEACHER_WIDTHS, student_width: int = 32,
                 codebook_size: int = 256, in_channels: int = 1, groups: int = 4,
                 slope: float = 0.01, seed: int = 0, codebook_init: str = "uniform"):
        if len(widths) != 4:
            raise ConfigurationError("teacher needs exactly 4 encoder widths")
        if widths[-1] <= student_width:
            raise ConfigurationError(
                f"teacher bottleneck width {widths[-1]} must exceed student width {student_width}"
            )
        rng = np.random.default_rng(seed)
        self.widths = tuple(int(w) for w in widths)
        self.student_width = int(student_width)
        self.encoder = Encoder(in_channels, self.widths, groups, slope, rng)
        self.attention = AttentionBlock(self.widths[-1], rng)
        self.align = AlignmentPair(self.widths[-1], self.student_width, rng)
        self.codebook = init_codebook(seed, codebook_size, self.student_width, codebook_init)
        self.decoder_rec = Decoder(self.widths, in_channels, groups, slope, rng, use_skips=False)
        self.decoder_seg = Decoder(self.widths, 1, groups, slope, rng)

    @property
    def bottleneck_width(self) -> int:
        return self.widths[-1]

    def descriptor(self) -> dict:
        return {
            "kind": "teacher",
            "widths": list(self.widths),
            "student_width": self.student_width,
            "codebook_size": self.codebook.size,
        }

    def encode(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        _check_input(x)
        h, skips = self.encoder(x)
        return self.attention(h), skips

    def forward(self, x, mode: str = "segment", quantize_mode: str = "argmax_eval",
                rng: Optional[np.random.Generator] = None, temperature: Optional[float] = None):
        """Run the teacher.

        ``mode="reconstruct"`` routes the bottleneck through align-down,
        quantisation and align-up into the reconstruction decoder.
        ``mode="segment"`` bypasses quantisation and returns sigmoid
        probabilities. The returned dict always carries the bottleneck ``Z``.
        """
        z, skips = self.encode(x)
        if mode == "segment":
            seg = T.sigmoid(self.decoder_seg(z, skips))
            return {"output": seg, "bottleneck": z}
        if mode != "reconstruct":
            raise ConfigurationError(f"unknown teacher mode {mode!r}")
        za = align_down(z, self.align)
        q = quantize(za, self.codebook, quantize_mode, rng=rng, temperature=temperature)
        recon = self.decoder_rec(align_up(q.z_q, self.align))
        return {"output": recon, "bottleneck": z, "aligned": za, "quant": q}

    __call__ = forward

    def distill_target(self, x) -> np.ndarray:
        """Quantised, aligned bottleneck (``d_s`` channels) used as the student's feature target."""
        with T.no_grad():
            z, _ = self.encode(x)
            za = align_down(z, self.align)
            q = quantize(za, self.codebook, "argmax_eval", update_usage=False)
        return q.z_code.data

    def pretrain_parameters(self):
        """Everything trained by reconstruction pretraining (no segmentation head)."""
        return (self.encoder.parameters() + self.attention.parameters() + self.align.parameters()
                + self.codebook.parameters() + self.decoder_rec.parameters())

    def finetune_parameters(self):
        """Encoder, attention and segmentation decoder; codebook and alignment stay frozen."""
        return self.encoder.parameters() + self.attention.parameters() + self.decoder_seg.parameters()
