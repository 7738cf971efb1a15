"""Audio front end and corpus plumbing.

Fixed facts about the audio interface live here as module constants: the
system consumes 24 kHz mono waveforms and represents them as 40-band
log-mel spectrograms with a 960-sample window and 240-sample hop.  Frames
are centered by reflect-padding (window - hop) / 2 samples on each side,
which makes the frame count exactly ``len(samples) // HOP_LENGTH`` - so a
whole-second clip maps to a round number of frames and four mel frames
always correspond to one downstream quantized frame.

Everything in this module is numpy; tensors appear only at the training
boundary.  All functions are pure and the corpus generator draws every
random number from its seed argument, so repeated calls are bit-identical.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import (
    ConsistencyError,
    DegenerateInputError,
    FileAccessError,
    LengthError,
    ParameterError,
    SampleRateError,
    ShapeError,
)

SAMPLE_RATE = 24000
WIN_LENGTH = 960
HOP_LENGTH = 240
N_MELS = 40
LOG_FLOOR = 1e-5
MEL_FMIN = 0.0
MEL_FMAX = 12000.0

# mel frames per quantized frame (two stride-2 stages in the speech encoder)
FRAMES_PER_CODE = 4


@dataclass
class Waveform:
    """Mono audio.  ``samples`` is float64 in [-1, 1], ``rate`` in Hz."""

    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass
class MelSpec:
    """Log-mel frames, shape [frames, N_MELS], natural log of magnitudes."""

    frames: np.ndarray

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ShapeError(f"mel frames must be [T, {N_MELS}], got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _hz_to_mel(hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=4)
def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = WIN_LENGTH,
    rate: int = SAMPLE_RATE,
    fmin: float = MEL_FMIN,
    fmax: float = MEL_FMAX,
) -> np.ndarray:
    """Triangular mel filters, shape [n_mels, n_fft // 2 + 1]."""
    if fmax > rate / 2:
        raise ParameterError(f"fmax {fmax} exceeds Nyquist {rate / 2}")
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins, dtype=np.float64) * rate / n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def _hann_periodic(n: int) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def mel_spectrogram(wav: Waveform) -> MelSpec:
    """40-band log-mel analysis.

    Frame t covers padded samples [t * HOP, t * HOP + WIN); the reflect
    padding of (WIN - HOP) / 2 samples per side centers the frames and
    pins the count to len(samples) // HOP.  Magnitudes below LOG_FLOOR
    clamp to the floor, so digital silence maps to log(LOG_FLOOR) in
    every band rather than -inf.
    """
    if wav.rate != SAMPLE_RATE:
        raise SampleRateError(f"expected {SAMPLE_RATE} Hz input, got {wav.rate}")
    n = len(wav.samples)
    if n < WIN_LENGTH:
        raise LengthError(f"need at least {WIN_LENGTH} samples for one window, got {n}")
    pad = (WIN_LENGTH - HOP_LENGTH) // 2
    padded = np.pad(wav.samples, pad, mode="reflect")
    n_frames = n // HOP_LENGTH
    offsets = np.arange(n_frames) * HOP_LENGTH
    frames = padded[offsets[:, None] + np.arange(WIN_LENGTH)[None, :]]
    window = _hann_periodic(WIN_LENGTH)
    mag = np.abs(np.fft.rfft(frames * window, axis=1))
    mel = mag @ mel_filterbank().T
    return MelSpec(np.log(np.maximum(mel, LOG_FLOOR)))


def length_regulate(phonemes: np.ndarray, durations: np.ndarray) -> np.ndarray:
    """Expand each phoneme id to its duration in frames.

    Zero-duration phonemes vanish from the output; an expansion that
    would be empty overall is an error.
    """
    phonemes = np.asarray(phonemes)
    durations = np.asarray(durations)
    if phonemes.ndim != 1 or durations.ndim != 1:
        raise ShapeError("phonemes and durations must be 1-D")
    if phonemes.shape != durations.shape:
        raise ShapeError(
            f"phonemes ({phonemes.shape[0]}) and durations ({durations.shape[0]}) differ in length"
        )
    if np.any(durations < 0):
        raise ParameterError("durations must be nonnegative")
    if durations.sum() == 0:
        raise DegenerateInputError("all durations are zero; nothing to expand")
    return np.repeat(phonemes.astype(np.int64), durations.astype(np.int64))


def pad_to_multiple(x: np.ndarray, multiple: int, pad_value: float = 0.0):
    """Right-pad the time axis (axis 0) to a multiple and return (padded, mask).

    The mask is uint8 with 1 on original positions.  Inputs whose length
    is already a multiple come back unchanged (with an all-ones mask).
    """
    if multiple < 1:
        raise ParameterError(f"multiple must be >= 1, got {multiple}")
    x = np.asarray(x)
    t = x.shape[0]
    if t == 0:
        raise LengthError("cannot pad an empty sequence")
    extra = (-t) % multiple
    mask = np.ones(t + extra, dtype=np.uint8)
    if extra:
        mask[t:] = 0
        widths = [(0, extra)] + [(0, 0)] * (x.ndim - 1)
        x = np.pad(x, widths, mode="constant", constant_values=pad_value)
    return x, mask


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class Utterance:
    utt_id: str
    waveform: Waveform
    phonemes: np.ndarray   # int64, includes leading/trailing silence
    durations: np.ndarray  # int64 mel frames per phoneme, sums to the mel frame count
    speaker: int

    def __post_init__(self) -> None:
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if self.phonemes.shape != self.durations.shape:
            raise ShapeError("phonemes and durations differ in length")


@dataclass
class SyntheticCorpus:
    utterances: list[Utterance]
    vocab_size: int
    n_speakers: int
    seed: int = 0

    def __len__(self) -> int:
        return len(self.utterances)


def _speaker_voice(speaker: int) -> dict:
    """Deterministic per-speaker timbre parameters, spaced so that any two
    speakers differ audibly: pitch scale, spectral tilt, and a fixed
    marker tone present in every voiced frame of that speaker."""
    return {
        "pitch": 1.0 + 0.21 * speaker,
        "tilt": 0.55 + 0.3 * speaker,
        "marker_hz": 5200.0 + 1100.0 * speaker,
        "marker_amp": 0.12,
    }


def _tone_segment(n: int, start: int, base_hz: float, voice: dict) -> np.ndarray:
    """Harmonic stack for one phoneme, phase-continuous in global time."""
    t = (np.arange(start, start + n, dtype=np.float64)) / SAMPLE_RATE
    f0 = base_hz * voice["pitch"]
    sig = np.zeros(n, dtype=np.float64)
    for h in range(1, 5):
        f = f0 * h
        if f >= SAMPLE_RATE / 2:
            break
        sig += (h ** -voice["tilt"]) * np.sin(2.0 * np.pi * f * t)
    sig += voice["marker_amp"] * np.sin(2.0 * np.pi * voice["marker_hz"] * t)
    # short raised-cosine fade at both ends keeps segment joins click-free
    ramp = min(n // 4, HOP_LENGTH)
    if ramp > 0:
        env = np.ones(n)
        fade = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, ramp))
        env[:ramp] = fade
        env[-ramp:] = fade[::-1]
        sig *= env
    peak = np.max(np.abs(sig))
    return 0.3 * sig / peak if peak > 0 else sig


def make_synthetic_corpus(
    seed: int,
    n_utterances: int = 8,
    n_speakers: int = 2,
    vocab_size: int = 18,
    min_frames: int = 100,
    max_frames: int = 300,
) -> SyntheticCorpus:
    """Build a deterministic toy corpus of harmonic-tone utterances.

    Each content phoneme id maps to a base frequency; each speaker applies
    a pitch scale, spectral tilt and a marker tone, so both the phoneme
    and the speaker are recoverable from any single frame.  Every utterance
    additionally gets its own small register shift, which keeps recordings
    acoustically distinct the way real takes are.  Utterances open and
    close with silence, adjacent content phonemes always differ (so
    collapsing repeated frame labels recovers the sequence exactly), and
    the waveform length equals sum(durations) * HOP_LENGTH.
    """
    if n_speakers < 2:
        raise ParameterError("need at least two speakers")
    if n_utterances < n_speakers:
        raise ParameterError("need at least one utterance per speaker")
    if vocab_size < 4:
        raise ParameterError("vocab too small for pad, silence and content ids")
    if max_frames < min_frames + 38:
        raise ParameterError("max_frames leaves no room above min_frames for a closing segment pair")
    rng = np.random.default_rng(seed)
    content_ids = np.arange(2, vocab_size)
    # utterances grow by whole content segments until they pass their target
    # length, so silence never appears as a long filler run; long stretches
    # of identical frames make poor contrastive training data
    high = min(min_frames + 80, max_frames - 37)
    utts = []
    for idx in range(n_utterances):
        speaker = idx % n_speakers
        target = int(rng.integers(min_frames, high))
        ids = [1]
        durs = [int(rng.integers(4, 9))]
        while sum(durs) < target:
            pid = int(rng.choice(content_ids))
            while pid == ids[-1]:
                pid = int(rng.choice(content_ids))
            ids.append(pid)
            durs.append(int(rng.integers(8, 26)))
        ids.append(1)
        # the analysis window smears content energy two frames past the last
        # segment, so the closing silence must outlast that skirt by a full
        # downsample block at any alignment; nine frames is the minimum
        durs.append(int(rng.integers(9, 13)))
        if sum(durs) > max_frames:
            raise ConsistencyError("internal: drawn durations exceeded the frame budget")
        phonemes = np.array(ids, dtype=np.int64)
        durations = np.array(durs, dtype=np.int64)
        # evenly spread per-utterance registers: no rng draw, so the stream
        # of segment choices above is unaffected by the count of utterances
        register = 0.96 + 0.08 * idx / max(1, n_utterances - 1)
        wav = render_utterance(phonemes, durations, speaker, register)
        utts.append(Utterance(f"utt{idx:03d}", wav, phonemes, durations, speaker))
    return SyntheticCorpus(utts, vocab_size=vocab_size, n_speakers=n_speakers, seed=seed)


PID_BASE_HZ = 300.0
PID_RATIO = 1.14


def render_utterance(
    phonemes: np.ndarray,
    durations: np.ndarray,
    speaker: int,
    register: float = 1.0,
) -> Waveform:
    """Waveform for a phoneme/duration sequence in a given synthetic voice.

    Silence ids render as digital zero; content id p renders as a harmonic
    stack on base frequency 300 * 1.14 ** (p - 2) Hz.  The geometric spacing
    keeps adjacent ids separated by 14% so that a small per-utterance
    ``register`` shift (every recording sits at a slightly different overall
    pitch, like real takes do) can never swap two ids.  The speaker marker
    tone is deliberately not register-shifted.
    """
    phonemes = np.asarray(phonemes, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if phonemes.shape != durations.shape:
        raise ShapeError("phonemes and durations differ in length")
    voice = _speaker_voice(speaker)
    pieces = []
    start = 0
    for pid, dur in zip(phonemes, durations):
        n = int(dur) * HOP_LENGTH
        if pid <= 1:
            pieces.append(np.zeros(n, dtype=np.float64))
        else:
            base_hz = register * PID_BASE_HZ * PID_RATIO ** (int(pid) - 2)
            pieces.append(_tone_segment(n, start, base_hz, voice))
        start += n
    return Waveform(np.concatenate(pieces) if pieces else np.zeros(0))


# ---------------------------------------------------------------------------
# manifest and WAV I/O


@dataclass
class ManifestEntry:
    utt_id: str
    wav_path: Path
    phonemes: np.ndarray
    durations: np.ndarray
    speaker: int


def write_wav(path: str | Path, wav: Waveform) -> None:
    wavfile.write(str(path), wav.rate, wav.samples.astype(np.float32))


def read_wav(path: str | Path) -> Waveform:
    """Load a mono WAV.  16-bit PCM and float32 files are accepted; no
    resampling is performed, a wrong rate is the caller's error."""
    try:
        rate, data = wavfile.read(str(path))
    except OSError as exc:
        raise FileAccessError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise ShapeError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ParameterError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate=int(rate))


def write_manifest(corpus: SyntheticCorpus, out_dir: str | Path) -> Path:
    """Write WAVs plus a manifest.tsv into ``out_dir``; returns the manifest path.

    Manifest line format (tab-separated):
    utt_id, wav path, space-separated phoneme ids, space-separated
    durations, speaker id.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus.utterances:
        wav_path = out_dir / f"{utt.utt_id}.wav"
        write_wav(wav_path, utt.waveform)
        lines.append(
            "\t".join(
                [
                    utt.utt_id,
                    str(wav_path),
                    " ".join(str(int(p)) for p in utt.phonemes),
                    " ".join(str(int(d)) for d in utt.durations),
                    str(utt.speaker),
                ]
            )
        )
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    base = Path(path).parent
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileAccessError(f"{path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ParameterError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        utt_id, wav_path, phon_s, dur_s, spk_s = parts
        phonemes = np.array([int(tok) for tok in phon_s.split()], dtype=np.int64)
        durations = np.array([int(tok) for tok in dur_s.split()], dtype=np.int64)
        if phonemes.shape != durations.shape:
            raise ConsistencyError(f"{path}:{lineno}: phoneme and duration counts differ")
        wav = Path(wav_path)
        if not wav.is_absolute():
            wav = base / wav
        entries.append(ManifestEntry(utt_id, wav, phonemes, durations, int(spk_s)))
    return entries


def load_utterance(entry: ManifestEntry) -> Utterance:
    wav = read_wav(entry.wav_path)
    return Utterance(entry.utt_id, wav, entry.phonemes, entry.durations, entry.speaker)
