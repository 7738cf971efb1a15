"""Denoising connector from phoneme embeddings to speech embeddings.

The two encoders land in one space, but phoneme embeddings are flat
within a phoneme while real speech embeddings wander; the connector
closes that gap.  It is a small conditional diffusion model over the
continuous (pre-quantization) speech embedding sequence: forward
corruption follows a linear beta schedule, and the denoiser is a stack
of bidirectional dilated convolutions with gated units, conditioned on
the phoneme embedding sequence per layer and on the diffusion step
through a shared sinusoidal embedding added at each layer input.

Step indices run t = 1..T with the convention alpha_bar(0) = 1, which
makes the posterior deterministic at the final step: no noise is added
when producing the t=0 output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .config import REAL_DTYPE, Config
from .errors import ParameterError, ShapeError, StateError
from .networks import TransformerStack, sinusoidal_positions


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached alpha products.

    ``alpha_bars`` has T + 1 entries; index 0 is the convention value 1,
    index t is prod(alpha_1..alpha_t).
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise IndexError(f"step {t} outside [0, {self.steps}]")
        return float(self.alpha_bars[t])


def build_noise_schedule(steps: int = 50, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ParameterError(f"need at least one diffusion step, got {steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if steps == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(s0: Tensor, t: int | Tensor, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Corrupt clean embeddings to step t:
    sqrt(alpha_bar_t) * s0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` may be a scalar or a [B] tensor of per-element steps in [1, T].
    """
    if eps.shape != s0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match s0 {tuple(s0.shape)}")
    bars = torch.from_numpy(schedule.alpha_bars)
    if torch.is_tensor(t):
        if t.ndim != 1 or t.shape[0] != s0.shape[0]:
            raise ShapeError(f"per-element t must be [B], got {tuple(t.shape)}")
        if (t < 1).any() or (t > schedule.steps).any():
            raise IndexError(f"steps must lie in [1, {schedule.steps}]")
        ab = bars[t].reshape(-1, *([1] * (s0.ndim - 1)))
    else:
        if not 1 <= int(t) <= schedule.steps:
            raise IndexError(f"step {t} outside [1, {schedule.steps}]")
        ab = bars[int(t)]
    return torch.sqrt(ab) * s0 + torch.sqrt(1.0 - ab) * eps


def reverse_sigma(schedule: NoiseSchedule, t: int) -> float:
    """Posterior noise scale sqrt((1 - ab_{t-1}) * (1 - a_t) / (1 - ab_t)).

    Zero at t = 1 by the alpha_bar(0) = 1 convention: the final step is
    deterministic.
    """
    if not 1 <= t <= schedule.steps:
        raise IndexError(f"step {t} outside [1, {schedule.steps}]")
    ab_prev = schedule.alpha_bar(t - 1)
    ab = schedule.alpha_bar(t)
    a = float(schedule.alphas[t - 1])
    return math.sqrt((1.0 - ab_prev) * (1.0 - a) / (1.0 - ab))


class _StepEmbedding(nn.Module):
    """Sinusoidal step encoding pushed through a small MLP, shared by all layers."""

    def __init__(self, step_dim: int, channels: int):
        super().__init__()
        self.step_dim = step_dim
        self.fc1 = nn.Linear(step_dim, channels)
        self.fc2 = nn.Linear(channels, channels)
        self.act = nn.SiLU()

    def forward(self, t: Tensor) -> Tensor:
        table = sinusoidal_positions(int(t.max()) + 1, self.step_dim, dtype=REAL_DTYPE)
        return self.fc2(self.act(self.fc1(table[t])))


class _ResidualLayer(nn.Module):
    """Bidirectional dilated conv with a gated tanh/sigmoid unit.

    The conditioner contributes a per-frame bias into both halves of the
    gate; residual and skip branches are 1x1 projections of the gated
    output.
    """

    def __init__(self, channels: int, cond_width: int, dilation: int):
        super().__init__()
        self.dilated = nn.Conv1d(
            channels, 2 * channels, kernel_size=3, padding=dilation, dilation=dilation
        )
        self.cond = nn.Conv1d(cond_width, 2 * channels, kernel_size=1)
        self.res = nn.Conv1d(channels, channels, kernel_size=1)
        self.skip = nn.Conv1d(channels, channels, kernel_size=1)
        self.channels = channels

    def forward(self, x: Tensor, cond: Tensor, step: Tensor) -> tuple[Tensor, Tensor]:
        h = self.dilated(x + step[:, :, None]) + self.cond(cond)
        gate = torch.tanh(h[:, : self.channels]) * torch.sigmoid(h[:, self.channels :])
        return (x + self.res(gate)) / math.sqrt(2.0), self.skip(gate)


class Denoiser(nn.Module):
    """Predicts the corruption noise from (noisy embeddings, step, phonemes).

    Dilations double within each block and the cycle restarts per block,
    so the receptive field covers the whole desk-scale sequence while
    every layer stays cheap.  The phoneme conditioning sequence passes
    through its own small transformer once, then feeds every layer.

    The output is assembled from the input and the trunk as
    sqrt(1 - abar_t) * noisy + sqrt(abar_t) * trunk: by the identity
    eps = sqrt(1 - abar) * x_t + sqrt(abar) * v the input coefficient of
    the noise estimate is exact at every step, so reverse-process errors
    stay additive instead of compounding, and the trunk regresses the
    bounded combination v = sqrt(abar) * eps - sqrt(1 - abar) * s0 under
    a nearly step-uniform weight.  Direct noise output would instead
    have to cancel two large terms to reproduce the low-step noise
    estimate, a precision the gated trunk cannot reach.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        d = cfg.embed_dim
        c = cfg.connector_channels
        schedule = build_noise_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        self.register_buffer(
            "alpha_bars", torch.from_numpy(schedule.alpha_bars.copy()).to(REAL_DTYPE)
        )
        self.in_proj = nn.Conv1d(d, c, kernel_size=1)
        self.cond_net = TransformerStack(
            d, cfg.connector_cond_layers, cfg.connector_cond_heads, cfg.ffn_dim, cfg.dropout
        )
        self.step_embed = _StepEmbedding(cfg.connector_step_dim, c)
        cycle = cfg.connector_dilation_cycle
        self.layers = nn.ModuleList(
            _ResidualLayer(c, d, dilation=2 ** (i % cycle))
            for i in range(cfg.connector_layers)
        )
        # the head must reproduce a d-dim signed target from rectified
        # features, which takes 2d of them; equal width would clip half
        # the directions the same way a rectified input lift would
        self.out1 = nn.Conv1d(c, 2 * c, kernel_size=1)
        self.out2 = nn.Conv1d(2 * c, d, kernel_size=1)
        # start at eps_hat = 0 so early updates fit the mean field first
        nn.init.zeros_(self.out2.weight)
        nn.init.zeros_(self.out2.bias)
        self.act = nn.ReLU()
        self.to(REAL_DTYPE)

    def forward(self, noisy: Tensor, t: Tensor, phonemes: Tensor, mask: Tensor) -> Tensor:
        if noisy.shape != phonemes.shape:
            raise ShapeError(
                f"noisy {tuple(noisy.shape)} and conditioning {tuple(phonemes.shape)} differ"
            )
        cond = self.cond_net(phonemes, mask).transpose(1, 2)
        step = self.step_embed(t)
        # linear lift: rectifying here would clip half of the signed input
        # dimensions at equal width, and the trunk can never recover them
        x = self.in_proj(noisy.transpose(1, 2))
        skips = torch.zeros_like(x)
        for layer in self.layers:
            x, skip = layer(x, cond, step)
            skips = skips + skip
        skips = skips / math.sqrt(len(self.layers))
        h = self.act(self.out1(skips))
        trunk = self.out2(h).transpose(1, 2)
        ab = self.alpha_bars[t].reshape(-1, 1, 1)
        return torch.sqrt(1.0 - ab) * noisy + torch.sqrt(ab) * trunk


def build_denoiser(cfg: Config, seed: int | None = None) -> Denoiser:
    if seed is not None:
        torch.manual_seed(seed)
    return Denoiser(cfg)


def connector_train_step(
    denoiser: Denoiser,
    optimizer: torch.optim.Optimizer,
    s0: Tensor,
    phonemes: Tensor,
    mask: Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    draws: int = 1,
) -> float:
    """One denoising-score-matching step on a batch of paired sequences.

    Draws a step t and a noise field per batch element, corrupts s0, and
    regresses the denoiser output onto the noise with a masked MSE.  The
    (t, noise) pair is the only stochasticity here; ``draws`` > 1 corrupts
    each sequence that many independent times per optimizer update, which
    cuts gradient variance per step but costs proportionally more compute
    and in practice loses to spending the same time on more steps.
    Returns the loss value.
    """
    if draws < 1:
        raise ParameterError(f"need at least one noise draw, got {draws}")
    b = s0.shape[0]
    s0_rep = s0.repeat(draws, 1, 1)
    cond_rep = phonemes.repeat(draws, 1, 1)
    mask_rep = mask.repeat(draws, 1)
    t = torch.randint(1, schedule.steps + 1, (draws * b,), generator=generator)
    eps = torch.randn(s0_rep.shape, generator=generator, dtype=s0.dtype)
    noisy = q_sample(s0_rep, t, eps, schedule)
    pred = denoiser(noisy, t, cond_rep, mask_rep)
    m = mask_rep.to(s0.dtype)[:, :, None]
    loss = ((pred - eps) ** 2 * m).sum() / (m.sum() * s0.shape[-1])
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def connector_sample(
    denoiser: Denoiser | None,
    phonemes: Tensor,
    mask: Tensor,
    schedule: NoiseSchedule,
    seed: int = 0,
    initial: Tensor | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """Ancestral sampling of speech embeddings conditioned on phonemes.

    Starts from standard normal noise (or ``initial`` when given) and
    walks t = T..1; noise is injected at every step except the last.
    ``noise``, when given, must hold the T - 1 injection fields stacked
    on dim 0 and replaces the generator draws; it exists so tests can
    pin the whole trajectory.  Output shape equals the conditioning
    shape.  Deterministic given (seed, inputs).
    """
    if denoiser is None:
        raise StateError("no trained connector available; train or load one first")
    if phonemes.ndim != 3:
        raise ShapeError(f"conditioning must be [B, T', d], got {tuple(phonemes.shape)}")
    generator = torch.Generator().manual_seed(seed)
    if initial is None:
        x = torch.randn(phonemes.shape, generator=generator, dtype=phonemes.dtype)
    else:
        if initial.shape != phonemes.shape:
            raise ShapeError("initial noise shape must match the conditioning shape")
        x = initial.clone()
    was_training = denoiser.training
    denoiser.eval()
    try:
        with torch.no_grad():
            for t in range(schedule.steps, 0, -1):
                tt = torch.full((phonemes.shape[0],), t, dtype=torch.long)
                eps_hat = denoiser(x, tt, phonemes, mask)
                a = float(schedule.alphas[t - 1])
                ab = schedule.alpha_bar(t)
                mean = (x - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
                if t > 1:
                    if noise is None:
                        psi = torch.randn(x.shape, generator=generator, dtype=x.dtype)
                    else:
                        psi = noise[schedule.steps - t]
                    x = mean + reverse_sigma(schedule, t) * psi
                else:
                    x = mean
    finally:
        denoiser.train(was_training)
    return x
