"""Joint training of the transcoder and codebook, plus connector training.

The per-step recipe: encode the paired batch on both sides, draw a voice
vector from a reference window of the same utterance, quantize the
speech embeddings, decode both ways, and take one optimizer step on the
weighted sum of reconstruction, commitment, classification, contrastive,
margin-KL and style-consistency terms.  The KL and consistency weights
are gated by piecewise-linear ramps over the step index, so those terms
contribute exactly nothing before their start steps.  The codebook never
sees gradients: after the optimizer step its EMA statistics absorb this
step's (detached) assignments.  All randomness flows through one
explicit generator, so fixed seeds reproduce loss traces bit-for-bit.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .config import REAL_DTYPE, Config
from .diffusion import Denoiser, NoiseSchedule, build_noise_schedule, connector_train_step
from .errors import BatchError, DivergenceError, ParameterError
from .features import FRAMES_PER_CODE, SyntheticCorpus, Utterance, length_regulate, mel_spectrogram
from .networks import Transcoder, build_transcoder, downsample_mask
from .quantizer import Codebook, ema_update, init_codebook, quantize
from . import losses as L

LOG_COLUMNS = (
    "step",
    "loss_total",
    "loss_mse",
    "loss_vq",
    "loss_classify",
    "loss_contrastive",
    "loss_kl",
    "loss_consistency",
    "beat_kl",
    "beat_consistency",
)


def loss_weight(step: int, start: int, end: int, upper: float) -> float:
    """Piecewise-linear ramp: 0 through ``start``, linear up to ``upper``
    at ``end``, flat after."""
    if start >= end:
        raise ParameterError(f"ramp needs start < end, got {start} >= {end}")
    if step <= start:
        return 0.0
    if step >= end:
        return upper
    return upper * (step - start) / (end - start)


@dataclass(frozen=True)
class StepSchedule:
    """The two ramps plus the constant base weights, bound to a config."""

    kl_start: int
    kl_end: int
    kl_upper: float
    consistency_start: int
    consistency_end: int
    consistency_upper: float
    mse_weight: float
    vq_weight: float
    classify_weight: float
    contrastive_weight: float

    @classmethod
    def from_config(cls, cfg: Config) -> "StepSchedule":
        return cls(
            kl_start=cfg.kl_start,
            kl_end=cfg.kl_end,
            kl_upper=cfg.kl_upper,
            consistency_start=cfg.consistency_start,
            consistency_end=cfg.consistency_end,
            consistency_upper=cfg.consistency_upper,
            mse_weight=cfg.mse_weight,
            vq_weight=cfg.vq_weight,
            classify_weight=cfg.classify_weight,
            contrastive_weight=cfg.contrastive_weight,
        )

    def kl_weight(self, step: int) -> float:
        return loss_weight(step, self.kl_start, self.kl_end, self.kl_upper)

    def consistency_weight(self, step: int) -> float:
        return loss_weight(step, self.consistency_start, self.consistency_end, self.consistency_upper)


@dataclass
class Batch:
    """One collated training batch.  ``unpaired`` may be None while the
    consistency ramp is still at zero."""

    mel: Tensor            # [B, T, 40], T a multiple of 4
    mel_mask: Tensor       # [B, T] bool
    phonemes: Tensor       # [B, T] long, frame level
    prompt: Tensor         # [B, Tp, 40]
    prompt_mask: Tensor    # [B, Tp] bool
    unpaired: Tensor | None = None
    unpaired_mask: Tensor | None = None


def _collate(mels: list[np.ndarray], phoneme_frames: list[np.ndarray], pad_id: int):
    """Right-pad sequences to a common multiple-of-4 length."""
    b = len(mels)
    t_max = max(m.shape[0] for m in mels)
    t_max += (-t_max) % FRAMES_PER_CODE
    mel = torch.zeros(b, t_max, mels[0].shape[1], dtype=REAL_DTYPE)
    mask = torch.zeros(b, t_max, dtype=torch.bool)
    phon = torch.full((b, t_max), pad_id, dtype=torch.long)
    for i, (m, p) in enumerate(zip(mels, phoneme_frames)):
        t = m.shape[0]
        mel[i, :t] = torch.from_numpy(m)
        mask[i, :t] = True
        phon[i, :t] = torch.from_numpy(p)
    return mel, mask, phon


def _collate_mels(mels: list[np.ndarray]):
    b = len(mels)
    t_max = max(m.shape[0] for m in mels)
    t_max += (-t_max) % FRAMES_PER_CODE
    out = torch.zeros(b, t_max, mels[0].shape[1], dtype=REAL_DTYPE)
    mask = torch.zeros(b, t_max, dtype=torch.bool)
    for i, m in enumerate(mels):
        out[i, : m.shape[0]] = torch.from_numpy(m)
        mask[i, : m.shape[0]] = True
    return out, mask


@dataclass
class TrainState:
    """Everything that evolves during training, in one place."""

    config: Config
    model: Transcoder
    optimizer: torch.optim.Optimizer
    schedule: StepSchedule
    generator: torch.Generator
    codebook: Codebook | None = None
    step: int = 0
    records: list[dict] = field(default_factory=list)


def new_train_state(cfg: Config, seed: int) -> TrainState:
    model = build_transcoder(cfg, seed=seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(seed)
    return TrainState(
        config=cfg,
        model=model,
        optimizer=optimizer,
        schedule=StepSchedule.from_config(cfg),
        generator=generator,
    )


def train_step(state: TrainState, batch: Batch) -> dict:
    """One optimizer step; returns the loss record for the log.

    The returned ``loss_total`` is exactly the optimized scalar, and it
    can be recomputed from the component fields with the same weighted
    sum in the same order.
    """
    cfg = state.config
    sched = state.schedule
    step = state.step + 1
    model = state.model
    model.train()

    speech_emb, mask4 = model.speech_encode(batch.mel, batch.mel_mask)
    phoneme_emb, p_mask4 = model.phoneme_encode(batch.phonemes, batch.mel_mask)
    voice = model.prompt_encode(batch.prompt, batch.prompt_mask, state.generator)

    if state.codebook is None:
        flat = speech_emb.detach()[mask4]
        state.codebook = init_codebook(
            flat, cfg.codebook_size, cfg.ema_decay, cfg.ema_epsilon, state.generator
        )
    q = quantize(speech_emb, state.codebook, mask4)

    mel_hat = model.speech_decode(q.ste_values, voice.sample, mask4)
    logits = model.phoneme_decode(q.ste_values, mask4)

    m = batch.mel_mask.to(REAL_DTYPE)[:, :, None]
    loss_mse = ((mel_hat - batch.mel) ** 2 * m).sum() / (m.sum() * batch.mel.shape[-1])
    loss_vq = q.commitment
    loss_classify = F.cross_entropy(logits[batch.mel_mask], batch.phonemes[batch.mel_mask])
    loss_contrastive = L.contrastive_loss(speech_emb, phoneme_emb, model.tau(), mask4, p_mask4)
    loss_kl = L.kl_margin_loss(voice.mu, voice.sigma, cfg.kl_margin)

    beat_kl = sched.kl_weight(step)
    beat_consistency = sched.consistency_weight(step)

    if batch.unpaired is not None:
        r_emb, r_mask4 = model.speech_encode(batch.unpaired, batch.unpaired_mask)
        qr = quantize(r_emb, state.codebook, r_mask4)
        r_hat = model.speech_decode(qr.ste_values, voice.sample, r_mask4)
        voice_self = model.prompt_encode(mel_hat, batch.mel_mask, state.generator)
        voice_cross = model.prompt_encode(r_hat, batch.unpaired_mask, state.generator)
        loss_consistency = L.gram_consistency_loss(
            voice.sample, voice_self.sample
        ) + L.gram_consistency_loss(voice_self.sample, voice_cross.sample)
    else:
        if beat_consistency > 0.0:
            raise BatchError(
                f"consistency weight is {beat_consistency} at step {step} but the batch "
                "has no unpaired speech"
            )
        loss_consistency = torch.zeros((), dtype=REAL_DTYPE)

    total = (
        sched.mse_weight * loss_mse
        + sched.vq_weight * loss_vq
        + sched.classify_weight * loss_classify
        + sched.contrastive_weight * loss_contrastive
        + beat_kl * loss_kl
        + beat_consistency * loss_consistency
    )
    if not torch.isfinite(total):
        raise DivergenceError(f"non-finite loss at step {step}")

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()

    ema_update(state.codebook, speech_emb.detach(), q)
    state.step = step

    record = {
        "step": step,
        "loss_total": float(total.detach()),
        "loss_mse": float(loss_mse.detach()),
        "loss_vq": float(loss_vq.detach()),
        "loss_classify": float(loss_classify.detach()),
        "loss_contrastive": float(loss_contrastive.detach()),
        "loss_kl": float(loss_kl.detach()),
        "loss_consistency": float(loss_consistency.detach()),
        "beat_kl": beat_kl,
        "beat_consistency": beat_consistency,
    }
    state.records.append(record)
    return record


class LossLog:
    """Append-only CSV loss log with a fixed column order."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._handle: io.TextIOBase | None = None

    def __enter__(self) -> "LossLog":
        self._handle = open(self.path, "w")
        self._handle.write(",".join(LOG_COLUMNS) + "\n")
        return self

    def write(self, record: dict) -> None:
        assert self._handle is not None
        self._handle.write(",".join(repr(record[c]) if c != "step" else str(record[c]) for c in LOG_COLUMNS) + "\n")

    def __exit__(self, *exc) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


def read_loss_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ",".join(LOG_COLUMNS):
        raise ParameterError(f"{path}: not a loss log (bad header)")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        rec = {c: (int(v) if c == "step" else float(v)) for c, v in zip(LOG_COLUMNS, vals)}
        out.append(rec)
    return out


class Trainer:
    """Owns the paired corpus, the unpaired corpus and a TrainState.

    Mel spectrograms and frame-level phoneme sequences are computed once
    per utterance; each step collates the whole corpus into one batch
    (desk-scale corpora are this small on purpose), draws fresh prompt
    windows from the same utterances, and draws an unpaired batch for
    the consistency branch whenever unpaired data is available.
    """

    def __init__(
        self,
        cfg: Config,
        corpus: SyntheticCorpus | list[Utterance],
        unpaired: SyntheticCorpus | list[Utterance] | None = None,
        seed: int = 0,
    ):
        self.state = new_train_state(cfg, seed)
        self.utterances = list(corpus.utterances if isinstance(corpus, SyntheticCorpus) else corpus)
        if not self.utterances:
            raise BatchError("training corpus is empty")
        self.mels = [mel_spectrogram(u.waveform).frames for u in self.utterances]
        self.phoneme_frames = [
            length_regulate(u.phonemes, u.durations) for u in self.utterances
        ]
        for u, m, p in zip(self.utterances, self.mels, self.phoneme_frames):
            if m.shape[0] != p.shape[0]:
                raise BatchError(
                    f"{u.utt_id}: durations cover {p.shape[0]} frames but the waveform "
                    f"yields {m.shape[0]} mel frames"
                )
        if unpaired is not None:
            src = unpaired.utterances if isinstance(unpaired, SyntheticCorpus) else unpaired
            self.unpaired_mels = [mel_spectrogram(u.waveform).frames for u in src]
        else:
            self.unpaired_mels = None

    def _randint(self, low: int, high: int) -> int:
        return int(torch.randint(low, high, (1,), generator=self.state.generator))

    def make_batch(self) -> Batch:
        cfg = self.state.config
        mel, mask, phon = _collate(self.mels, self.phoneme_frames, cfg.pad_id)
        prompts = []
        for m in self.mels:
            t = m.shape[0]
            win = cfg.prompt_window_frames
            if t > win:
                start = self._randint(0, t - win + 1)
                prompts.append(m[start : start + win])
            else:
                prompts.append(m)
        prompt, prompt_mask = _collate_mels(prompts)
        unpaired = unpaired_mask = None
        # the unpaired branch only influences the total once the consistency
        # ramp opens, so the trainer leaves it out of earlier batches to keep
        # the cold phase cheap; train_step still runs the branch whenever
        # unpaired data shows up in a batch
        ramp_open = self.state.schedule.consistency_weight(self.state.step + 1) > 0.0
        if self.unpaired_mels is not None and ramp_open:
            picks = [self._randint(0, len(self.unpaired_mels)) for _ in self.mels]
            unpaired, unpaired_mask = _collate_mels([self.unpaired_mels[i] for i in picks])
        return Batch(mel, mask, phon, prompt, prompt_mask, unpaired, unpaired_mask)

    def run(self, steps: int, log: LossLog | None = None, progress_every: int = 0) -> list[dict]:
        out = []
        for _ in range(steps):
            record = train_step(self.state, self.make_batch())
            if log is not None:
                log.write(record)
            if progress_every and record["step"] % progress_every == 0:
                print(
                    f"step {record['step']}: total {record['loss_total']:.4f} "
                    f"mse {record['loss_mse']:.4f} classify {record['loss_classify']:.4f} "
                    f"contrastive {record['loss_contrastive']:.4f}"
                )
            out.append(record)
        return out

    def train_reconstruction_mse(self, window: int = 50) -> float:
        """Mean mel reconstruction loss over the last ``window`` steps;
        recorded into checkpoints as the reference level for conversion
        quality checks."""
        if not self.state.records:
            raise ParameterError("no training steps recorded yet")
        tail = self.state.records[-window:]
        return float(np.mean([r["loss_mse"] for r in tail]))


# ---------------------------------------------------------------------------
# connector training


@dataclass
class ConnectorState:
    denoiser: Denoiser
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    generator: torch.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)


def new_connector_state(cfg: Config, seed: int) -> ConnectorState:
    from .diffusion import build_denoiser

    denoiser = build_denoiser(cfg, seed=seed)
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=cfg.connector_lr)
    schedule = build_noise_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
    return ConnectorState(
        denoiser=denoiser,
        optimizer=optimizer,
        schedule=schedule,
        generator=torch.Generator().manual_seed(seed),
    )


def connector_targets(
    model: Transcoder, corpus: SyntheticCorpus | list[Utterance]
) -> tuple[Tensor, Tensor, Tensor]:
    """Frozen-encoder targets for connector training.

    Runs both encoders in eval mode over the corpus and collates the
    continuous speech embeddings (regression target), phoneme embeddings
    (conditioning) and the shared compressed-rate mask.
    """
    utts = list(corpus.utterances if isinstance(corpus, SyntheticCorpus) else corpus)
    if not utts:
        raise BatchError("connector corpus is empty")
    was_training = model.training
    model.eval()
    s_list, p_list, m_list = [], [], []
    try:
        with torch.no_grad():
            for u in utts:
                mel = mel_spectrogram(u.waveform).frames
                phon = length_regulate(u.phonemes, u.durations)
                melt, mask, phont = _collate([mel], [phon], 0)
                s, mask4 = model.speech_encode(melt, mask)
                p, _ = model.phoneme_encode(phont, mask)
                s_list.append(s[0])
                p_list.append(p[0])
                m_list.append(mask4[0])
    finally:
        model.train(was_training)
    t_max = max(s.shape[0] for s in s_list)
    b, d = len(s_list), s_list[0].shape[1]
    s_out = torch.zeros(b, t_max, d, dtype=REAL_DTYPE)
    p_out = torch.zeros(b, t_max, d, dtype=REAL_DTYPE)
    m_out = torch.zeros(b, t_max, dtype=torch.bool)
    for i, (s, p, m) in enumerate(zip(s_list, p_list, m_list)):
        s_out[i, : s.shape[0]] = s
        p_out[i, : p.shape[0]] = p
        m_out[i, : m.shape[0]] = m
    return s_out, p_out, m_out


def train_connector(
    cstate: ConnectorState,
    targets: tuple[Tensor, Tensor, Tensor],
    steps: int,
    progress_every: int = 0,
) -> list[float]:
    """Run denoising regression steps against precomputed frozen targets."""
    s0, cond, mask = targets
    out = []
    for _ in range(steps):
        loss = connector_train_step(
            cstate.denoiser, cstate.optimizer, s0, cond, mask, cstate.schedule, cstate.generator
        )
        cstate.step += 1
        cstate.losses.append(loss)
        if progress_every and cstate.step % progress_every == 0:
            print(f"connector step {cstate.step}: loss {loss:.5f}")
        out.append(loss)
    return out
