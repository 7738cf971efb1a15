"""Run configuration.

A single flat dataclass holds every architecture and schedule constant.
Defaults are the desk-scale preset used throughout the test suite; the
full-scale preset widens the model to production size.  Configs load
from and save to a plain ``key = value`` text file, one pair per line,
``#`` comments allowed.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import CheckpointFormatError, ParameterError

# All real-valued tensors in the package use float64.  Desk-scale models are
# small enough that the cost is irrelevant on CPU, and the tight numeric
# tolerances in the test suite (closed-form EMA traces, finite-difference
# gradient checks, bit-identical restarts) are only comfortable in double
# precision.
REAL_DTYPE = torch.float64


@dataclass
class Config:
    # phoneme inventory
    vocab_size: int = 18
    pad_id: int = 0
    silence_id: int = 1

    # transcoder widths
    embed_dim: int = 64          # width of the shared frame embedding space
    hidden_dim: int = 64         # transformer / conv channel width
    phoneme_embed_dim: int = 32  # lookup-table width before the phoneme conv
    prompt_dim: int = 64         # global voice vector width
    prompt_channels: int = 32    # conv channels inside the voice encoder
    attention_heads: int = 2
    ffn_dim: int = 128
    dropout: float = 0.0

    # transcoder depths
    speech_encoder_layers: int = 2
    phoneme_encoder_layers: int = 2
    speech_decoder_layers: int = 2
    phoneme_decoder_layers: int = 2
    speech_decoder_convs: int = 2

    # quantizer
    codebook_size: int = 64
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5

    # contrastive temperature (learned; these are init and clamp bounds)
    tau_init: float = 1.0 / 0.07
    tau_min: float = 1.0
    tau_max: float = 100.0

    # voice encoder regularisation
    kl_margin: float = 0.5
    prompt_window_frames: int = 300

    # training
    learning_rate: float = 2e-4
    mse_weight: float = 1.0
    vq_weight: float = 1.0
    classify_weight: float = 1.0
    contrastive_weight: float = 0.1
    kl_start: int = 500
    kl_end: int = 1500
    kl_upper: float = 1e-2
    consistency_start: int = 1000
    consistency_end: int = 2000
    consistency_upper: float = 1.0

    # connector (denoising bridge from phoneme space to speech space)
    diffusion_steps: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    connector_channels: int = 64
    connector_layers: int = 8
    connector_dilation_cycle: int = 4
    connector_cond_layers: int = 2
    connector_cond_heads: int = 2
    connector_step_dim: int = 128
    connector_lr: float = 2e-3

    # inference
    uniform_duration: int = 10   # frames per phoneme when no durations given

    def __post_init__(self) -> None:
        if self.vocab_size < 3:
            raise ParameterError(
                f"vocab_size must leave room for pad, silence and content ids, got {self.vocab_size}"
            )
        if self.pad_id == self.silence_id:
            raise ParameterError("pad_id and silence_id must differ")
        for name in ("embed_dim", "hidden_dim", "prompt_dim", "codebook_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ParameterError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.ema_epsilon <= 0.0:
            raise ParameterError(f"ema_epsilon must be positive, got {self.ema_epsilon}")
        if self.kl_margin < 0.0:
            raise ParameterError(f"kl_margin must be nonnegative, got {self.kl_margin}")
        if not 0.0 < self.tau_min <= self.tau_init <= self.tau_max:
            raise ParameterError("need 0 < tau_min <= tau_init <= tau_max")

    @classmethod
    def full_scale(cls) -> "Config":
        """The production model size.  Far too slow to train on a desk CPU;
        provided so shapes and plumbing can be exercised at full width."""
        return cls(
            embed_dim=256,
            hidden_dim=256,
            phoneme_embed_dim=256,
            prompt_dim=256,
            prompt_channels=256,
            attention_heads=4,
            ffn_dim=1024,
            speech_encoder_layers=6,
            phoneme_encoder_layers=4,
            speech_decoder_layers=6,
            phoneme_decoder_layers=6,
            speech_decoder_convs=5,
            codebook_size=8192,
            connector_channels=256,
        )

    # fields that must agree between a checkpoint and the config it is
    # loaded into; everything else (schedules, learning rates) may differ
    ARCH_FIELDS = (
        "vocab_size",
        "embed_dim",
        "hidden_dim",
        "phoneme_embed_dim",
        "prompt_dim",
        "prompt_channels",
        "attention_heads",
        "ffn_dim",
        "speech_encoder_layers",
        "phoneme_encoder_layers",
        "speech_decoder_layers",
        "phoneme_decoder_layers",
        "speech_decoder_convs",
        "codebook_size",
        "connector_channels",
        "connector_layers",
        "connector_dilation_cycle",
        "connector_cond_layers",
        "connector_cond_heads",
        "connector_step_dim",
        "diffusion_steps",
    )

    def check_arch_compatible(self, stored: "Config") -> None:
        """Raise if ``stored`` (from a checkpoint) cannot drive this model."""
        for name in self.ARCH_FIELDS:
            mine = getattr(self, name)
            theirs = getattr(stored, name)
            if mine != theirs:
                raise CheckpointFormatError(
                    f"checkpoint was built with {name}={theirs}, this config has {name}={mine}"
                )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(data) - known
        if bad:
            raise ParameterError(f"unknown config keys: {sorted(bad)}")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in dataclasses.fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        """Parse a ``key = value`` file.  Values use Python literal syntax
        for floats/ints; a special key ``scale = full`` selects the wide
        preset as the base before other keys are applied."""
        base: dict = {}
        overrides: dict = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "scale":
                scale = value.strip("'\"")
                if scale not in ("desk", "full"):
                    raise ParameterError(f"{path}:{lineno}: scale must be desk or full")
                base = {"scale": scale}
                continue
            overrides[key] = _parse_value(value)
        cfg = cls.full_scale() if base.get("scale") == "full" else cls()
        merged = cfg.to_dict()
        known = set(merged)
        bad = set(overrides) - known
        if bad:
            raise ParameterError(f"{path}: unknown config keys: {sorted(bad)}")
        merged.update(overrides)
        return cls(**merged)


def _parse_value(text: str):
    text = text.strip().strip("'\"")
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text in ("True", "true"):
        return True
    if text in ("False", "false"):
        return False
    return text
