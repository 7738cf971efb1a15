"""The five networks of the transcoder.

Two encoders map mel frames and phoneme frames into one shared embedding
space at a quarter of the mel frame rate; both end in a projection plus a
LayerNorm without learned scale or bias, so frames from either stream
live on comparable scales and raw dot products are meaningful scores.  A
variational voice encoder summarises a reference clip into a global
vector.  Two decoders map quantized embeddings back out: one to mel
frames (conditioned on the voice vector at every timestep), one to
per-frame phoneme logits.  All sequence tensors are [B, T, width] with a
bool validity mask per frame; masks at the compressed rate keep a block
valid when any of its four source frames was valid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import REAL_DTYPE, Config
from .errors import DegenerateInputError, DomainError, LengthError, ShapeError
from .features import FRAMES_PER_CODE, N_MELS

# Log-mel values are pinned by the feature extractor: the floor sits at
# ln(1e-5), roughly -11.5, and lit bands peak a little above zero.  The
# networks fold that range to unit scale on the way in and unfold it on the
# way out, so parameters work at O(1) magnitude; without the output affine
# the decoder bias would have to crawl across ten log units at the training
# step size and reconstruction stalls near the mean.
MEL_SHIFT = -6.0
MEL_SCALE = 6.0

# Full-amplitude additive sinusoids let frame position drown out frame
# content in the retrieval geometry: cross-modal argmax then confuses
# utterances that happen to share a time index.  The two encoders add
# positions at reduced amplitude; decoders keep full-strength positions,
# which cost nothing there.
ENCODER_POS_SCALE = 0.35


def sinusoidal_positions(length: int, dim: int, dtype=REAL_DTYPE) -> Tensor:
    """Classic fixed sin/cos position table, shape [length, dim]."""
    pos = torch.arange(length, dtype=dtype)[:, None]
    idx = torch.arange(0, dim, 2, dtype=dtype)[None, :]
    angle = pos / torch.pow(10000.0, idx / dim)
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table


def downsample_mask(mask: Tensor, factor: int = FRAMES_PER_CODE) -> Tensor:
    """Validity at the compressed rate: a block counts if any source frame does."""
    if mask.shape[-1] % factor != 0:
        raise ShapeError(f"mask length {mask.shape[-1]} is not a multiple of {factor}")
    return mask.to(torch.bool).reshape(*mask.shape[:-1], -1, factor).any(dim=-1)


class TransformerStack(nn.Module):
    """Position-encoded transformer encoder with key-padding masking."""

    def __init__(
        self,
        width: int,
        layers: int,
        heads: int,
        ffn: int,
        dropout: float,
        pos_scale: float = 1.0,
    ):
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=heads,
            dim_feedforward=ffn,
            dropout=dropout,
            batch_first=True,
        )
        self.stack = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        self.width = width
        self.pos_scale = pos_scale

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        x = x + self.pos_scale * sinusoidal_positions(x.shape[1], self.width, dtype=x.dtype)[None]
        return self.stack(x, src_key_padding_mask=~mask.to(torch.bool))


@dataclass
class ParaVec:
    """Global voice posterior: mean, scale, and the vector downstream code uses
    (a reparameterised draw in training mode, the mean in eval mode)."""

    mu: Tensor      # [B, D]
    sigma: Tensor   # [B, D]
    sample: Tensor  # [B, D]


class SpeechEncoder(nn.Module):
    """Mel frames -> frame embeddings at 1/4 rate.

    Two stride-2 convolutions with GELU compress time by four, a
    transformer mixes context, and a linear head plus affine-free
    LayerNorm lands in the shared space.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        h = cfg.hidden_dim
        self.conv1 = nn.Conv1d(N_MELS, h, kernel_size=5, stride=2, padding=2)
        self.conv2 = nn.Conv1d(h, h, kernel_size=5, stride=2, padding=2)
        self.act = nn.GELU()
        self.transformer = TransformerStack(
            h,
            cfg.speech_encoder_layers,
            cfg.attention_heads,
            cfg.ffn_dim,
            cfg.dropout,
            pos_scale=ENCODER_POS_SCALE,
        )
        self.proj = nn.Linear(h, cfg.embed_dim)
        self.out_norm = nn.LayerNorm(cfg.embed_dim, elementwise_affine=False)

    def forward(self, mel: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        if mel.ndim != 3 or mel.shape[-1] != N_MELS:
            raise ShapeError(f"mel must be [B, T, {N_MELS}], got {tuple(mel.shape)}")
        if mel.shape[1] % FRAMES_PER_CODE != 0:
            raise ShapeError(
                f"mel length {mel.shape[1]} is not a multiple of {FRAMES_PER_CODE}; pad first"
            )
        x = (mel - MEL_SHIFT) / MEL_SCALE
        x = self.act(self.conv1(x.transpose(1, 2)))
        x = self.act(self.conv2(x)).transpose(1, 2)
        mask4 = downsample_mask(mask)
        x = self.transformer(x, mask4)
        return self.out_norm(self.proj(x)), mask4


class PhonemeEncoder(nn.Module):
    """Frame-level phoneme ids -> embeddings at 1/4 rate, same target space."""

    def __init__(self, cfg: Config):
        super().__init__()
        h = cfg.hidden_dim
        self.vocab_size = cfg.vocab_size
        self.embed = nn.Embedding(cfg.vocab_size, cfg.phoneme_embed_dim)
        self.conv = nn.Conv1d(cfg.phoneme_embed_dim, h, kernel_size=8, stride=4, padding=2)
        self.act = nn.ReLU()
        self.transformer = TransformerStack(
            h,
            cfg.phoneme_encoder_layers,
            cfg.attention_heads,
            cfg.ffn_dim,
            cfg.dropout,
            pos_scale=ENCODER_POS_SCALE,
        )
        self.proj = nn.Linear(h, cfg.embed_dim)
        self.out_norm = nn.LayerNorm(cfg.embed_dim, elementwise_affine=False)

    def forward(self, phonemes: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        if phonemes.ndim != 2:
            raise ShapeError(f"phonemes must be [B, T], got {tuple(phonemes.shape)}")
        if phonemes.shape[1] % FRAMES_PER_CODE != 0:
            raise ShapeError(
                f"phoneme length {phonemes.shape[1]} is not a multiple of {FRAMES_PER_CODE}; pad first"
            )
        if (phonemes < 0).any() or (phonemes >= self.vocab_size).any():
            raise DomainError(f"phoneme ids must lie in [0, {self.vocab_size})")
        x = self.embed(phonemes).transpose(1, 2)
        x = self.act(self.conv(x)).transpose(1, 2)
        mask4 = downsample_mask(mask)
        x = self.transformer(x, mask4)
        return self.out_norm(self.proj(x)), mask4


class _SEResBlock(nn.Module):
    """Residual conv pair with squeeze-and-excitation channel gating."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        squeeze = max(channels // 4, 1)
        self.fc1 = nn.Linear(channels, squeeze)
        self.fc2 = nn.Linear(squeeze, channels)
        self.act = nn.ReLU()

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        h = self.conv2(self.act(self.conv1(x)))
        m = mask[:, None, :].to(x.dtype)
        pooled = (h * m).sum(dim=2) / m.sum(dim=2)
        scale = torch.sigmoid(self.fc2(self.act(self.fc1(pooled))))
        return self.act(x + h * scale[:, :, None])


class PromptEncoder(nn.Module):
    """Reference mel clip -> diagonal-Gaussian posterior over a voice vector.

    Six convolutions, an SE-ResNet block, masked average pooling over
    time, and two linear heads for mean and log-variance.  Training mode
    draws the reparameterised sample mu + sigma * eps; eval mode returns
    the mean, so inference is deterministic.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        c = cfg.prompt_channels
        convs = [nn.Conv1d(N_MELS, c, kernel_size=5, padding=2)]
        convs += [nn.Conv1d(c, c, kernel_size=5, padding=2) for _ in range(5)]
        self.convs = nn.ModuleList(convs)
        self.act = nn.ReLU()
        self.se = _SEResBlock(c)
        self.mu_head = nn.Linear(c, cfg.prompt_dim)
        self.logvar_head = nn.Linear(c, cfg.prompt_dim)

    def forward(
        self, mel: Tensor, mask: Tensor, generator: torch.Generator | None = None
    ) -> ParaVec:
        if mel.ndim != 3 or mel.shape[-1] != N_MELS:
            raise ShapeError(f"reference mel must be [B, T, {N_MELS}], got {tuple(mel.shape)}")
        if mel.shape[1] == 0:
            raise LengthError("reference clip is empty")
        mask = mask.to(torch.bool)
        if (~mask.any(dim=1)).any():
            raise DegenerateInputError("a reference clip has no valid frames")
        x = ((mel - MEL_SHIFT) / MEL_SCALE).transpose(1, 2)
        for conv in self.convs:
            x = self.act(conv(x))
        x = self.se(x, mask)
        m = mask[:, None, :].to(x.dtype)
        pooled = (x * m).sum(dim=2) / m.sum(dim=2)
        mu = self.mu_head(pooled)
        sigma = torch.exp(0.5 * self.logvar_head(pooled))
        if self.training:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            sample = mu + sigma * eps
        else:
            sample = mu
        return ParaVec(mu=mu, sigma=sigma, sample=sample)


class SpeechDecoder(nn.Module):
    """Quantized embeddings + voice vector -> mel frames at 4x the input rate.

    The voice vector is projected to the working width and added to every
    timestep before the transformer; two stride-2 transposed convolutions
    restore the mel frame rate, with Tanh activations through the conv
    stack and a linear output head.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        h = cfg.hidden_dim
        self.in_proj = nn.Linear(cfg.embed_dim, h)
        self.voice_proj = nn.Linear(cfg.prompt_dim, h)
        self.transformer = TransformerStack(
            h, cfg.speech_decoder_layers, cfg.attention_heads, cfg.ffn_dim, cfg.dropout
        )
        self.up1 = nn.ConvTranspose1d(h, h, kernel_size=4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose1d(h, h, kernel_size=4, stride=2, padding=1)
        self.convs = nn.ModuleList(
            nn.Conv1d(h, h, kernel_size=5, padding=2) for _ in range(cfg.speech_decoder_convs)
        )
        self.act = nn.Tanh()
        self.out = nn.Linear(h, N_MELS)

    def forward(self, codes: Tensor, voice: Tensor, mask: Tensor) -> Tensor:
        if codes.ndim != 3:
            raise ShapeError(f"codes must be [B, T', d], got {tuple(codes.shape)}")
        if voice.ndim != 2 or voice.shape[0] != codes.shape[0]:
            raise ShapeError(
                f"voice must be [B, D] matching the code batch, got {tuple(voice.shape)}"
            )
        x = self.in_proj(codes) + self.voice_proj(voice)[:, None, :]
        x = self.transformer(x, mask)
        x = x.transpose(1, 2)
        x = self.act(self.up1(x))
        x = self.act(self.up2(x))
        for conv in self.convs:
            x = self.act(conv(x))
        return self.out(x.transpose(1, 2)) * MEL_SCALE + MEL_SHIFT


class PhonemeDecoder(nn.Module):
    """Quantized embeddings -> per-frame phoneme logits at 4x the input rate."""

    def __init__(self, cfg: Config):
        super().__init__()
        h = cfg.hidden_dim
        self.in_proj = nn.Linear(cfg.embed_dim, h)
        self.transformer = TransformerStack(
            h, cfg.phoneme_decoder_layers, cfg.attention_heads, cfg.ffn_dim, cfg.dropout
        )
        self.up1 = nn.ConvTranspose1d(h, h, kernel_size=4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose1d(h, h, kernel_size=4, stride=2, padding=1)
        self.act = nn.Tanh()
        self.out = nn.Linear(h, cfg.vocab_size)

    def forward(self, codes: Tensor, mask: Tensor) -> Tensor:
        if codes.ndim != 3:
            raise ShapeError(f"codes must be [B, T', d], got {tuple(codes.shape)}")
        x = self.in_proj(codes)
        x = self.transformer(x, mask)
        x = x.transpose(1, 2)
        x = self.act(self.up1(x))
        x = self.act(self.up2(x))
        return self.out(x.transpose(1, 2))


class Transcoder(nn.Module):
    """The five networks plus the learned contrastive temperature."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        self.speech_encoder = SpeechEncoder(cfg)
        self.phoneme_encoder = PhonemeEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.speech_decoder = SpeechDecoder(cfg)
        self.phoneme_decoder = PhonemeDecoder(cfg)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init), dtype=REAL_DTYPE))
        self.to(REAL_DTYPE)

    def tau(self) -> Tensor:
        lo, hi = math.log(self.cfg.tau_min), math.log(self.cfg.tau_max)
        return torch.exp(torch.clamp(self.log_tau, lo, hi))

    # thin named wrappers so call sites read like the data flow
    def speech_encode(self, mel: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        return self.speech_encoder(mel, mask)

    def phoneme_encode(self, phonemes: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        return self.phoneme_encoder(phonemes, mask)

    def prompt_encode(
        self, mel: Tensor, mask: Tensor, generator: torch.Generator | None = None
    ) -> ParaVec:
        return self.prompt_encoder(mel, mask, generator)

    def speech_decode(self, codes: Tensor, voice: Tensor, mask: Tensor) -> Tensor:
        return self.speech_decoder(codes, voice, mask)

    def phoneme_decode(self, codes: Tensor, mask: Tensor) -> Tensor:
        return self.phoneme_decoder(codes, mask)


def build_transcoder(cfg: Config, seed: int | None = None) -> Transcoder:
    """Construct a transcoder, optionally with seeded parameter init."""
    if seed is not None:
        torch.manual_seed(seed)
    return Transcoder(cfg)
