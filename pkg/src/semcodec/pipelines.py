"""Plug-and-play inference on a frozen checkpoint.

Every pipeline loads one trained checkpoint and composes the same parts
in different orders, with no fine-tuning: text-to-speech runs phoneme
encoding, the denoising connector, quantization and the speech decoder;
voice conversion runs the speech encoder, quantization and the speech
decoder under a new voice vector; recognition runs the speech encoder,
quantization and the phoneme decoder.  Inference always uses the voice
posterior mean, so results are deterministic (text-to-speech up to its
sampling seed).

Mel output files use a tiny binary format: two little-endian uint32
words (frame count, band count) followed by float32 frame-major data.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import load_train_state
from .config import REAL_DTYPE, Config
from .diffusion import Denoiser, NoiseSchedule, build_noise_schedule, connector_sample
from .errors import FileAccessError, LengthError, ParameterError, ShapeError, StateError
from .features import (
    FRAMES_PER_CODE,
    HOP_LENGTH,
    N_MELS,
    SAMPLE_RATE,
    WIN_LENGTH,
    ManifestEntry,
    MelSpec,
    Utterance,
    Waveform,
    length_regulate,
    load_utterance,
    mel_filterbank,
    mel_spectrogram,
    pad_to_multiple,
    read_manifest,
)
from .networks import Transcoder
from .quantizer import Codebook, quantize


@dataclass
class Pipeline:
    """A frozen model bundle ready for inference."""

    config: Config
    model: Transcoder
    codebook: Codebook
    denoiser: Denoiser | None
    schedule: NoiseSchedule
    meta: dict


def load_pipeline(path: str | Path, expect: Config | None = None) -> Pipeline:
    state, connector, meta = load_train_state(path, expect)
    if state.codebook is None:
        raise StateError(f"{path}: checkpoint has no codebook; it was never trained")
    model = state.model
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    denoiser = None
    if connector is not None:
        denoiser = connector.denoiser
        denoiser.eval()
        for p in denoiser.parameters():
            p.requires_grad_(False)
    cfg = state.config
    return Pipeline(
        config=cfg,
        model=model,
        codebook=state.codebook,
        denoiser=denoiser,
        schedule=build_noise_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max),
        meta=meta,
    )


def _prompt_vector(pipe: Pipeline, prompt: Waveform) -> Tensor:
    """Posterior mean over the first prompt window of the reference clip."""
    mel = mel_spectrogram(prompt).frames
    win = pipe.config.prompt_window_frames
    if mel.shape[0] > win:
        mel = mel[:win]
    melt = torch.from_numpy(mel)[None].to(REAL_DTYPE)
    mask = torch.ones(1, mel.shape[0], dtype=torch.bool)
    with torch.no_grad():
        return pipe.model.prompt_encode(melt, mask).mu


def _encode_waveform(pipe: Pipeline, wav: Waveform):
    mel = mel_spectrogram(wav).frames
    padded, mask = pad_to_multiple(mel, FRAMES_PER_CODE)
    melt = torch.from_numpy(padded)[None].to(REAL_DTYPE)
    maskt = torch.from_numpy(mask)[None].to(torch.bool)
    with torch.no_grad():
        emb, mask4 = pipe.model.speech_encode(melt, maskt)
    return emb, mask4, mel.shape[0]


def tts(
    pipe: Pipeline,
    phonemes: np.ndarray,
    prompt: Waveform,
    durations: np.ndarray | None = None,
    seed: int = 0,
    use_connector: bool = True,
) -> MelSpec:
    """Phonemes + reference voice -> mel frames.

    Without explicit durations every phoneme gets the configured uniform
    count.  The connector bridges phoneme embeddings into speech
    embedding space before quantization; ``use_connector=False`` feeds
    the phoneme embeddings straight to the quantizer, which is cruder
    but needs no trained connector.  Output length is four times the
    compressed conditioning length (the input padded up to a multiple
    of four frames).
    """
    phonemes = np.asarray(phonemes, dtype=np.int64)
    if phonemes.ndim != 1 or phonemes.size == 0:
        raise LengthError("phoneme sequence is empty")
    if durations is None:
        durations = np.full(phonemes.shape, pipe.config.uniform_duration, dtype=np.int64)
    frames = length_regulate(phonemes, durations)
    padded, mask = pad_to_multiple(frames, FRAMES_PER_CODE, pad_value=pipe.config.pad_id)
    phont = torch.from_numpy(padded)[None]
    maskt = torch.from_numpy(mask)[None].to(torch.bool)
    with torch.no_grad():
        p_emb, mask4 = pipe.model.phoneme_encode(phont, maskt)
        if use_connector:
            if pipe.denoiser is None:
                raise StateError("checkpoint has no trained connector; pass use_connector=False")
            s_emb = connector_sample(pipe.denoiser, p_emb, mask4, pipe.schedule, seed=seed)
        else:
            s_emb = p_emb
        q = quantize(s_emb, pipe.codebook, mask4)
        voice = _prompt_vector(pipe, prompt)
        mel = pipe.model.speech_decode(q.values, voice, mask4)
    return MelSpec(mel[0].numpy())


def vc(pipe: Pipeline, source: Waveform, prompt: Waveform) -> MelSpec:
    """Re-render the source utterance in the reference clip's voice.

    The quantized bottleneck keeps what was said and when; the voice
    vector swaps who says it.  Output length is the source mel length
    padded up to a multiple of four frames.
    """
    emb, mask4, _ = _encode_waveform(pipe, source)
    q = quantize(emb, pipe.codebook, mask4)
    voice = _prompt_vector(pipe, prompt)
    with torch.no_grad():
        mel = pipe.model.speech_decode(q.values, voice, mask4)
    return MelSpec(mel[0].numpy())


def asr(pipe: Pipeline, wav: Waveform) -> np.ndarray:
    """Waveform -> phoneme id sequence.

    Per-frame argmax over the phoneme decoder logits, consecutive
    repeats collapsed, silence and pad ids stripped.  Pure silence
    therefore comes back as an empty sequence.
    """
    emb, mask4, n_frames = _encode_waveform(pipe, wav)
    q = quantize(emb, pipe.codebook, mask4)
    with torch.no_grad():
        logits = pipe.model.phoneme_decode(q.values, mask4)
    labels = logits[0].argmax(dim=-1).numpy()[:n_frames]
    out = []
    previous = None
    for lab in labels:
        if lab != previous:
            out.append(int(lab))
        previous = lab
    skip = (pipe.config.pad_id, pipe.config.silence_id)
    return np.array([p for p in out if p not in skip], dtype=np.int64)


def export_embeddings(
    pipe: Pipeline,
    source: str | Path | list[ManifestEntry] | list[Utterance],
    out_path: str | Path,
) -> int:
    """Dump frame embeddings and voice vectors for downstream probing.

    One CSV row per valid compressed frame per stream ("speech" rows
    from the speech encoder, "phoneme" rows from the phoneme encoder)
    plus one "prompt" row per utterance holding the voice posterior
    mean.  Vectors shorter than the widest stream are zero-padded on the
    right so every row has the same column count.  Returns the number of
    data rows written.
    """
    if isinstance(source, (str, Path)):
        utts = [load_utterance(e) for e in read_manifest(source)]
    else:
        utts = [u if isinstance(u, Utterance) else load_utterance(u) for u in source]
    width = max(pipe.config.embed_dim, pipe.config.prompt_dim)
    header = "utt_id,frame_idx,kind," + ",".join(f"dim_{i}" for i in range(width))
    lines = [header]

    def emit(utt_id: str, frame_idx: int, kind: str, vec: np.ndarray) -> None:
        vals = np.zeros(width, dtype=np.float64)
        vals[: vec.shape[0]] = vec
        lines.append(f"{utt_id},{frame_idx},{kind}," + ",".join(repr(float(v)) for v in vals))

    count = 0
    for utt in utts:
        mel = mel_spectrogram(utt.waveform).frames
        mel_p, mask = pad_to_multiple(mel, FRAMES_PER_CODE)
        melt = torch.from_numpy(mel_p)[None].to(REAL_DTYPE)
        maskt = torch.from_numpy(mask)[None].to(torch.bool)
        frames = length_regulate(utt.phonemes, utt.durations)
        if frames.shape[0] != mel.shape[0]:
            raise ShapeError(
                f"{utt.utt_id}: durations cover {frames.shape[0]} frames, waveform yields {mel.shape[0]}"
            )
        phon_p, _ = pad_to_multiple(frames, FRAMES_PER_CODE, pad_value=pipe.config.pad_id)
        phont = torch.from_numpy(phon_p)[None]
        with torch.no_grad():
            s_emb, mask4 = pipe.model.speech_encode(melt, maskt)
            p_emb, _ = pipe.model.phoneme_encode(phont, maskt)
        valid = mask4[0].numpy().astype(bool)
        s_np, p_np = s_emb[0].numpy(), p_emb[0].numpy()
        for t in np.nonzero(valid)[0]:
            emit(utt.utt_id, int(t), "speech", s_np[t])
            count += 1
        for t in np.nonzero(valid)[0]:
            emit(utt.utt_id, int(t), "phoneme", p_np[t])
            count += 1
        win = pipe.config.prompt_window_frames
        prompt_mel = mel[:win] if mel.shape[0] > win else mel
        pm = torch.from_numpy(prompt_mel)[None].to(REAL_DTYPE)
        pmask = torch.ones(1, prompt_mel.shape[0], dtype=torch.bool)
        with torch.no_grad():
            mu = pipe.model.prompt_encode(pm, pmask).mu
        emit(utt.utt_id, 0, "prompt", mu[0].numpy())
        count += 1
    Path(out_path).write_text("\n".join(lines) + "\n")
    return count


# ---------------------------------------------------------------------------
# mel file format


def write_mel(path: str | Path, mel: MelSpec) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<II", mel.n_frames, mel.frames.shape[1]))
        f.write(mel.frames.astype("<f4").tobytes())


def read_mel(path: str | Path) -> MelSpec:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileAccessError(f"{path}: {exc}") from exc
    if len(raw) < 8:
        raise ParameterError(f"{path}: too short to be a mel file")
    frames, bands = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * frames * bands
    if len(raw) != expected:
        raise ParameterError(f"{path}: size {len(raw)} does not match header ({expected} expected)")
    data = np.frombuffer(raw, dtype="<f4", offset=8).reshape(frames, bands)
    return MelSpec(data.astype(np.float64))


# ---------------------------------------------------------------------------
# rough waveform rendering (listening convenience, not part of the model)


def mel_to_waveform(mel: MelSpec, iterations: int = 32, seed: int = 0) -> Waveform:
    """Invert log-mel frames to audio by filterbank pseudo-inverse and
    iterative phase re-estimation.  Quality is what one expects from a
    40-band desk model; meant for sanity listening only."""
    fb = mel_filterbank()
    mag = np.exp(mel.frames)  # [T, bands] -> linear mel magnitudes
    spec = np.clip(mag @ np.linalg.pinv(fb).T, 0.0, None)  # [T, bins]
    t = mel.n_frames
    n = t * HOP_LENGTH
    pad = (WIN_LENGTH - HOP_LENGTH) // 2
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WIN_LENGTH) / WIN_LENGTH)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, size=spec.shape)

    def synthesize(phase: np.ndarray) -> np.ndarray:
        buf = np.zeros(n + 2 * pad)
        norm = np.zeros(n + 2 * pad)
        frames = np.fft.irfft(spec * np.exp(1j * phase), n=WIN_LENGTH, axis=1)
        for i in range(t):
            lo = i * HOP_LENGTH
            buf[lo : lo + WIN_LENGTH] += frames[i] * window
            norm[lo : lo + WIN_LENGTH] += window ** 2
        return buf / np.maximum(norm, 1e-8)

    wav = synthesize(phase)
    for _ in range(iterations):
        offsets = np.arange(t) * HOP_LENGTH
        segs = wav[offsets[:, None] + np.arange(WIN_LENGTH)[None, :]] * window
        phase = np.angle(np.fft.rfft(segs, axis=1))
        wav = synthesize(phase)
    out = wav[pad : pad + n]
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    return Waveform(out, rate=SAMPLE_RATE)
