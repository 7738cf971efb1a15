"""Loss kernels shared by training and the test oracles.

Three pieces that are easy to get subtly wrong live here on their own:
the margin-clamped KL of a diagonal Gaussian against the standard
normal, the Gram-matrix style-consistency penalty, and the symmetric
frame-level contrastive loss.  Each takes plain tensors so brute-force
recomputation in tests needs no model in the loop.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import (
    ConsistencyError,
    DegenerateInputError,
    DomainError,
    ParameterError,
    ShapeError,
)


def kl_margin_loss(mu: Tensor, sigma: Tensor, margin: float) -> Tensor:
    """max(0, KL(N(mu, sigma^2) || N(0, I)) - margin), averaged over the batch.

    The KL is the diagonal-Gaussian closed form 0.5 * sum(mu^2 + sigma^2
    - 1 - log sigma^2).  The margin keeps the penalty from collapsing the
    posterior all the way onto the prior.
    """
    if margin < 0.0:
        raise ParameterError(f"margin must be nonnegative, got {margin}")
    if mu.shape != sigma.shape:
        raise ShapeError(f"mu {tuple(mu.shape)} and sigma {tuple(sigma.shape)} differ")
    if (sigma <= 0).any():
        raise DomainError("sigma must be strictly positive")
    if mu.ndim == 1:
        mu, sigma = mu[None], sigma[None]
    kl = 0.5 * (mu ** 2 + sigma ** 2 - 1.0 - torch.log(sigma ** 2)).sum(dim=-1)
    return torch.clamp(kl - margin, min=0.0).mean()


def gram_consistency_loss(ga: Tensor, gb: Tensor) -> Tensor:
    """Mean squared difference of the two batches' Gram matrices.

    ga and gb are [B, D] batches of voice vectors; the penalty is
    ||ga^T ga - gb^T gb||_F^2 / D^2, which compares correlation structure
    without requiring row-to-row correspondence.
    """
    if ga.ndim != 2 or gb.ndim != 2:
        raise ShapeError("voice vector batches must be 2-D [B, D]")
    if ga.shape[1] != gb.shape[1]:
        raise ShapeError(f"vector widths differ: {ga.shape[1]} vs {gb.shape[1]}")
    d = ga.shape[1]
    diff = ga.T @ ga - gb.T @ gb
    return (diff ** 2).sum() / float(d * d)


def contrastive_loss(
    speech: Tensor,
    phoneme: Tensor,
    tau: Tensor | float,
    mask: Tensor | None = None,
    phoneme_mask: Tensor | None = None,
) -> Tensor:
    """Symmetric frame-matching loss between the two embedding streams.

    Valid frames from both [B, T, d] sequences are flattened to [N, d]
    in the same order, scaled dot products form an N x N score matrix
    with matching frames on the diagonal, and the loss is the mean of
    the row-wise and column-wise cross-entropies against the diagonal.
    Both streams must carry the same validity pattern; a frame only
    makes sense as a positive pair if both sides have it.
    """
    if speech.ndim == 2:
        speech = speech[None]
    if phoneme.ndim == 2:
        phoneme = phoneme[None]
    if speech.shape != phoneme.shape:
        raise ShapeError(
            f"speech {tuple(speech.shape)} and phoneme {tuple(phoneme.shape)} sequences differ"
        )
    b, t, _ = speech.shape
    if mask is None:
        mask = torch.ones(b, t, dtype=torch.bool)
    else:
        mask = mask.to(torch.bool)
        if mask.ndim == 1:
            mask = mask[None]
    if phoneme_mask is not None:
        phoneme_mask = phoneme_mask.to(torch.bool)
        if phoneme_mask.ndim == 1:
            phoneme_mask = phoneme_mask[None]
        if not torch.equal(mask, phoneme_mask):
            raise ConsistencyError("speech and phoneme masks disagree; frames cannot be paired")
    if mask.shape != (b, t):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match sequences {(b, t)}")
    flat_s = speech[mask]
    flat_p = phoneme[mask]
    n = flat_s.shape[0]
    if n < 2:
        raise DegenerateInputError(f"contrastive loss needs at least 2 valid frames, got {n}")
    if not torch.is_tensor(tau):
        tau = torch.as_tensor(tau, dtype=speech.dtype)
    scores = tau * (flat_s @ flat_p.T)
    target = torch.arange(n)
    return 0.5 * (F.cross_entropy(scores, target) + F.cross_entropy(scores.T, target))
