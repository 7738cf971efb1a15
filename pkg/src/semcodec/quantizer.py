"""Codebook quantization of frame embeddings.

The codebook is trained by exponential moving averages of assignment
statistics, not by gradients, so it is a plain object rather than a
module.  ``ema_counts`` starts at one per entry and ``ema_sums`` starts
at the initial entries, which keeps entries equal to sums / counts from
step zero and makes the update's effect on a held-still input stream a
clean geometric series.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .config import REAL_DTYPE
from .errors import ConsistencyError, DegenerateInputError, ParameterError, ShapeError


@dataclass
class Codebook:
    entries: Tensor      # [K, d]
    ema_counts: Tensor   # [K]
    ema_sums: Tensor     # [K, d]
    decay: float = 0.99
    epsilon: float = 1e-5

    def __post_init__(self) -> None:
        if self.entries.ndim != 2:
            raise ShapeError(f"entries must be [K, d], got shape {tuple(self.entries.shape)}")
        if not 0.0 < self.decay < 1.0:
            raise ParameterError(f"decay must lie in (0, 1), got {self.decay}")
        if self.epsilon <= 0.0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def init_codebook(
    latents: Tensor,
    size: int,
    decay: float = 0.99,
    epsilon: float = 1e-5,
    generator: torch.Generator | None = None,
) -> Codebook:
    """Seed a codebook from observed encoder outputs.

    Rows of ``latents`` [N, d] are sampled without replacement.  If fewer
    than ``size`` rows are available the sample is recycled with small
    Gaussian jitter so no two entries start identical.
    """
    if latents.ndim != 2:
        raise ShapeError(f"latents must be [N, d], got shape {tuple(latents.shape)}")
    n = latents.shape[0]
    if n == 0:
        raise DegenerateInputError("cannot initialise a codebook from zero frames")
    latents = latents.detach().to(REAL_DTYPE)
    if n >= size:
        perm = torch.randperm(n, generator=generator)[:size]
        entries = latents[perm].clone()
    else:
        idx = torch.arange(size) % n
        entries = latents[idx].clone()
        noise = torch.randn(entries.shape, generator=generator, dtype=REAL_DTYPE)
        entries[n:] += 0.01 * noise[n:]
    return Codebook(
        entries=entries,
        ema_counts=torch.ones(size, dtype=REAL_DTYPE),
        ema_sums=entries.clone(),
        decay=decay,
        epsilon=epsilon,
    )


@dataclass
class Quantized:
    """Result of snapping a latent sequence to the codebook.

    ``values`` holds exact codebook rows; ``ste_values`` re-attaches the
    encoder's gradient by the straight-through trick and is what training
    feeds to the decoders.  ``commitment`` is the mean over valid frames
    of the squared distance between each latent and its entry, and is the
    only gradient path from quantization back to the encoder besides the
    pass-through.  Padded positions get index 0 and are excluded from the
    commitment mean; consumers must honour the mask.
    """

    values: Tensor        # [B, T, d] exact codebook rows
    ste_values: Tensor    # [B, T, d] latents + (values - latents).detach()
    indices: Tensor       # [B, T] long
    mask: Tensor          # [B, T] bool
    commitment: Tensor    # scalar


def _nearest(flat: Tensor, entries: Tensor) -> Tensor:
    """Index of the closest entry per row, exact squared distances.

    Computed via the difference form (not the expanded dot-product form)
    so distances are nonnegative and ties break to the lowest index by
    argmin semantics.
    """
    # [N, K] in chunks to bound memory at full-scale codebooks
    out = torch.empty(flat.shape[0], dtype=torch.long)
    chunk = 4096
    for lo in range(0, flat.shape[0], chunk):
        part = flat[lo : lo + chunk]
        d2 = ((part[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
        out[lo : lo + chunk] = d2.argmin(dim=1)
    return out


def quantize(latents: Tensor, codebook: Codebook, mask: Tensor | None = None) -> Quantized:
    """Snap each frame to its nearest codebook entry.

    ``latents`` is [B, T, d] (or [T, d], treated as batch of one).  The
    mask marks valid frames; padded frames are still assigned an index so
    decoder inputs stay rectangular, but they do not touch the commitment
    term and must not be fed to the EMA update.
    """
    if latents.ndim == 2:
        latents = latents[None]
        if mask is not None and mask.ndim == 1:
            mask = mask[None]
    if latents.ndim != 3:
        raise ShapeError(f"latents must be [B, T, d], got shape {tuple(latents.shape)}")
    if latents.shape[-1] != codebook.dim:
        raise ShapeError(
            f"latent width {latents.shape[-1]} does not match codebook width {codebook.dim}"
        )
    b, t, d = latents.shape
    if mask is None:
        mask = torch.ones(b, t, dtype=torch.bool)
    else:
        mask = mask.to(torch.bool)
        if mask.shape != (b, t):
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not match latents {(b, t)}")
    if not mask.any():
        raise DegenerateInputError("no valid frames to quantize")
    flat = latents.reshape(-1, d)
    indices = _nearest(flat.detach(), codebook.entries).reshape(b, t)
    indices = torch.where(mask, indices, torch.zeros_like(indices))
    values = codebook.entries[indices]
    diff2 = ((latents - values.detach()) ** 2).sum(-1)
    commitment = diff2[mask].mean()
    ste = latents + (values - latents).detach()
    return Quantized(values=values, ste_values=ste, indices=indices, mask=mask, commitment=commitment)


def ema_update(codebook: Codebook, latents: Tensor, quantized: Quantized) -> None:
    """Fold one batch of assignments into the codebook, in place.

    Per entry: counts <- decay * counts + (1 - decay) * n_assigned, sums
    likewise with the summed latents, then entries = sums / counts with
    counts Laplace-smoothed as (c + eps) / (total + K * eps) * total so
    untouched entries stay finite.  Only valid frames contribute.
    """
    if latents.ndim == 2:
        latents = latents[None]
    if latents.shape[-1] != codebook.dim:
        raise ShapeError(
            f"latent width {latents.shape[-1]} does not match codebook width {codebook.dim}"
        )
    if latents.shape[:2] != quantized.indices.shape:
        raise ConsistencyError(
            f"latents {tuple(latents.shape[:2])} and assignments "
            f"{tuple(quantized.indices.shape)} come from different sequences"
        )
    mask = quantized.mask
    flat = latents.detach().reshape(-1, codebook.dim)[mask.reshape(-1)]
    idx = quantized.indices.reshape(-1)[mask.reshape(-1)]
    k = codebook.size
    batch_counts = torch.bincount(idx, minlength=k).to(REAL_DTYPE)
    batch_sums = torch.zeros(k, codebook.dim, dtype=REAL_DTYPE)
    batch_sums.index_add_(0, idx, flat)
    g = codebook.decay
    codebook.ema_counts.mul_(g).add_(batch_counts, alpha=1.0 - g)
    codebook.ema_sums.mul_(g).add_(batch_sums, alpha=1.0 - g)
    total = codebook.ema_counts.sum()
    smoothed = (codebook.ema_counts + codebook.epsilon) / (total + k * codebook.epsilon) * total
    codebook.entries.copy_(codebook.ema_sums / smoothed[:, None])
