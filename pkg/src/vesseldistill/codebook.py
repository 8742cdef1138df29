"""Vessel-pattern codebook: dimension alignment, quantisation and codebook loss.

Teacher bottleneck features of width ``d_t`` are projected to the student's
width ``d_s`` by a 1x1x1 convolution, snapped to one of ``N`` learned code
vectors, and (for reconstruction) projected back to ``d_t``.

Code selection uses negated squared Euclidean distance as logits, so the most
probable code under Gumbel-Softmax sampling is the nearest one and the
zero-temperature limit coincides with nearest-neighbour assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Conv3d, Module, parameter
from .tensor import Tensor

QUANTIZE_MODES = ("gumbel_train", "argmin_train", "argmax_eval")


class Codebook(Module):
    """``N x M`` table of code vectors plus assignment counts.

    Parameters
    ----------
    entries : ndarray of shape (N, M)
    temperature : float
        Gumbel-Softmax temperature used when ``quantize`` is not given one.
    """

    def __init__(self, entries: np.ndarray, temperature: float = 1.0):
        entries = np.asarray(entries, dtype=np.float64)
        if entries.ndim != 2:
            raise DimensionError(f"codebook entries must be 2-D (N, M), got shape {entries.shape}")
        if entries.shape[0] < 2:
            raise ConfigurationError(f"codebook needs at least 2 entries, got {entries.shape[0]}")
        if not np.all(np.isfinite(entries)):
            raise ConfigurationError("codebook entries must be finite")
        self.entries = parameter(entries)
        self.usage_counts = np.zeros(entries.shape[0], dtype=np.int64)
        self.temperature = float(temperature)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


class AlignmentPair(Module):
    """1x1x1 convolutions mapping ``d_t -> d_s`` (down) and ``d_s -> d_t`` (up)."""

    def __init__(self, d_t: int, d_s: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_t = d_t
        self.d_s = d_s
        self.down = Conv3d(d_t, d_s, 1, padding=0, rng=rng)
        self.up = Conv3d(d_s, d_t, 1, padding=0, rng=rng)


def align_down(z: Tensor, pair: AlignmentPair) -> Tensor:
    if z.shape[1] != pair.d_t:
        raise DimensionError(f"align_down axis 1 (channel): expected {pair.d_t}, got {z.shape[1]}")
    return pair.down(z)


def align_up(zq: Tensor, pair: AlignmentPair) -> Tensor:
    if zq.shape[1] != pair.d_s:
        raise DimensionError(f"align_up axis 1 (channel): expected {pair.d_s}, got {zq.shape[1]}")
    return pair.up(zq)


@dataclass
class QuantizeResult:
    """Outputs of :func:`quantize`.

    ``z_q`` feeds downstream layers (its gradient follows the straight-through
    rule of the chosen mode); ``z_code`` is the bare code lookup whose only
    gradient path leads to the codebook entries and is what
    :func:`codebook_loss` expects.
    """

    z_q: Tensor
    z_code: Tensor
    codes: np.ndarray
    one_hot: np.ndarray
    soft: Optional[Tensor] = None


def _to_vectors(z: Tensor) -> Tensor:
    B, M = z.shape[:2]
    perm = (0,) + tuple(range(2, z.ndim)) + (1,)
    return T.reshape(T.transpose(z, perm), (-1, M))


def _from_vectors(v: Tensor, like_shape: tuple) -> Tensor:
    B, M = like_shape[:2]
    spatial = like_shape[2:]
    back = T.reshape(v, (B,) + spatial + (M,))
    perm = (0, len(like_shape) - 1) + tuple(range(1, len(like_shape) - 1))
    return T.transpose(back, perm)


def squared_distances(vectors: np.ndarray, entries: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact ``||x_i - v_j||^2`` by explicit differences (no expansion shortcut)."""
    out = np.empty((vectors.shape[0], entries.shape[0]))
    for s in range(0, vectors.shape[0], chunk):
        diff = vectors[s:s + chunk, None, :] - entries[None, :, :]
        out[s:s + chunk] = np.einsum("nkm,nkm->nk", diff, diff)
    return out


def nearest_codes(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    return np.argmin(squared_distances(vectors, entries), axis=1)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def quantize(
    z_aligned: Tensor,
    cb: Codebook,
    mode: str = "argmax_eval",
    rng: Optional[np.random.Generator] = None,
    temperature: Optional[float] = None,
    noise: bool = True,
    update_usage: bool = True,
) -> QuantizeResult:
    """Snap every voxel feature of ``z_aligned[B, M, ...]`` to a code vector.

    Modes
    -----
    ``gumbel_train``
        Sample with Gumbel-Softmax at ``temperature``; the forward value is the
        hard one-hot selection, the gradient follows the soft probabilities.
    ``argmin_train``
        Deterministic nearest code with the identity straight-through
        estimator onto ``z_aligned`` (plain VQ-VAE training).
    ``argmax_eval``
        Deterministic nearest code, no gradient to ``z_aligned``.
    """
    if mode not in QUANTIZE_MODES:
        raise ConfigurationError(f"unknown quantize mode {mode!r}; expected one of {QUANTIZE_MODES}")
    if cb.size == 0:
        raise ConfigurationError("empty codebook")
    z_aligned = z_aligned if isinstance(z_aligned, Tensor) else Tensor(z_aligned)
    if z_aligned.shape[1] != cb.dim:
        raise DimensionError(
            f"quantize axis 1 (channel): features have {z_aligned.shape[1]}, codebook dim is {cb.dim}"
        )
    flat = _to_vectors(z_aligned)
    entries = cb.entries
    n, N = flat.shape[0], cb.size
    soft = None

    if mode == "gumbel_train":
        tau = cb.temperature if temperature is None else float(temperature)
        if tau <= 0:
            raise ConfigurationError(f"Gumbel temperature must be positive, got {tau}")
        frozen = T.stop_gradient(entries)
        diff = T.reshape(flat, (n, 1, cb.dim)) - T.reshape(frozen, (1, N, cb.dim))
        logits = -T.tsum(diff * diff, axis=2)
        if noise:
            if rng is None:
                raise ConfigurationError("gumbel_train with noise requires an rng")
            logits = logits + sample_gumbel(rng, (n, N))
        soft = T.softmax(logits * (1.0 / tau), axis=1)
        codes = np.argmax(soft.data, axis=1)
        one_hot = np.zeros((n, N))
        one_hot[np.arange(n), codes] = 1.0
        hard = T.straight_through(one_hot, soft)
        zq_flat = T.matmul(hard, frozen)
    else:
        codes = nearest_codes(flat.data, entries.data)
        one_hot = np.zeros((n, N))
        one_hot[np.arange(n), codes] = 1.0
        lookup = entries.data[codes]
        if mode == "argmin_train":
            zq_flat = T.straight_through(lookup, flat)
        else:
            zq_flat = None

    z_code_flat = T.matmul(Tensor(one_hot), entries)
    if zq_flat is None:
        zq_flat = z_code_flat
    if update_usage and mode != "argmax_eval":
        np.add.at(cb.usage_counts, codes, 1)
    B = z_aligned.shape[0]
    spatial = z_aligned.shape[2:]
    return QuantizeResult(
        z_q=_from_vectors(zq_flat, z_aligned.shape),
        z_code=_from_vectors(z_code_flat, z_aligned.shape),
        codes=codes.reshape((B,) + spatial),
        one_hot=one_hot,
        soft=soft,
    )


def codebook_loss_terms(z_aligned: Tensor, z_code: Tensor):
    """Return ``(||sg[z] - e||^2, ||z - sg[e]||^2)``, each averaged over voxels."""
    if z_aligned.shape != z_code.shape:
        raise DimensionError(f"codebook_loss shape mismatch: {z_aligned.shape} vs {z_code.shape}")
    d1 = T.stop_gradient(z_aligned) - z_code
    d2 = z_aligned - T.stop_gradient(z_code)
    codebook_term = T.mean(T.tsum(d1 * d1, axis=1))
    commitment_term = T.mean(T.tsum(d2 * d2, axis=1))
    return codebook_term, commitment_term


def codebook_loss(z_aligned: Tensor, z_code: Tensor, lam: float = 0.25) -> Tensor:
    """Codebook term plus ``lam`` times the commitment term.

    The first term moves only codebook entries, the second only the encoder
    side; pass the ``z_code`` field of :class:`QuantizeResult`.
    """
    first, second = codebook_loss_terms(z_aligned, z_code)
    return first + second * lam


def code_perplexity(cb: Optional[Codebook] = None, window=None) -> float:
    """``exp(entropy)`` of the empirical code distribution, in ``[1, N]``.

    ``window`` is an array of recent code indices; when omitted the codebook's
    accumulated usage counts are used.
    """
    if window is not None:
        idx = np.asarray(window).reshape(-1)
        if idx.size == 0:
            raise ConfigurationError("perplexity window is empty")
        minlength = cb.size if cb is not None else int(idx.max()) + 1
        counts = np.bincount(idx, minlength=minlength).astype(np.float64)
    else:
        counts = cb.usage_counts.astype(np.float64)
        if counts.sum() == 0:
            raise ConfigurationError("codebook has no recorded assignments")
    p = counts[counts > 0] / counts.sum()
    return float(math.exp(-np.sum(p * np.log(p))))


def kmeans(features: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding and a fixed iteration count."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        j = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[i] = x[j]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    for _ in range(iters):
        assign = nearest_codes(x, centers)
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return centers


def init_codebook(seed: int, N: int, M: int, strategy: str = "uniform", features=None,
                  temperature: float = 1.0, kmeans_iters: int = 25) -> Codebook:
    """Build a codebook.

    ``uniform`` draws entries from U(-1/N, 1/N). ``kmeans_warmstart`` runs
    k-means over ``features`` (rows of aligned teacher features); when fewer
    than ``N`` distinct rows are available the remaining entries stay uniform.
    """
    if N < 2:
        raise ConfigurationError(f"codebook needs N >= 2, got {N}")
    rng = np.random.default_rng(seed)
    entries = rng.uniform(-1.0 / N, 1.0 / N, size=(N, M))
    if strategy == "kmeans_warmstart":
        if features is None:
            raise ConfigurationError("kmeans_warmstart needs a feature batch")
        feats = np.asarray(features, dtype=np.float64).reshape(-1, M)
        k = min(N, len(np.unique(feats, axis=0)))
        entries[:k] = kmeans(feats, k, rng, kmeans_iters)
    elif strategy != "uniform":
        raise ConfigurationError(f"unknown codebook init strategy {strategy!r}")
    return Codebook(entries, temperature=temperature)
