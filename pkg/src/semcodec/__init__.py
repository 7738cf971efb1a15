"""Frame-level joint text/speech representations with a quantized bottleneck.

Train one model that encodes 24 kHz speech and frame-level phoneme
sequences into a shared 25 Hz embedding space, snaps speech embeddings
to a learned codebook, and decodes back to mel frames (in a reference
voice) or phoneme labels.  A small denoising connector bridges phoneme
embeddings into speech embedding space, after which text-to-speech,
voice conversion and recognition are all compositions of frozen parts.
"""

from .config import Config
from .errors import SemcodecError
from .features import (
    MelSpec,
    SyntheticCorpus,
    Utterance,
    Waveform,
    make_synthetic_corpus,
    mel_spectrogram,
)
from .pipelines import Pipeline, asr, load_pipeline, tts, vc

__version__ = "0.1.0"

__all__ = [
    "Config",
    "MelSpec",
    "Pipeline",
    "SemcodecError",
    "SyntheticCorpus",
    "Utterance",
    "Waveform",
    "__version__",
    "asr",
    "load_pipeline",
    "make_synthetic_corpus",
    "mel_spectrogram",
    "tts",
    "vc",
]
