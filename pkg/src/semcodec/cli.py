"""Command-line entry points.

Subcommands cover the whole workflow: synthesize a toy corpus, train a
checkpoint, train the connector on top of it, then run text-to-speech,
voice conversion, recognition, or embedding export against the frozen
checkpoint.  `train` writes a checkpoint plus a per-step CSV loss log
into its output directory.  Mel outputs use the package's binary mel
format; pass ``--render-wav`` to also write rough audio.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_train_state, save_train_state
from .config import Config
from .errors import SemcodecError
from .features import (
    load_utterance,
    make_synthetic_corpus,
    read_manifest,
    read_wav,
    write_manifest,
    write_wav,
)
from . import pipelines
from .training import (
    LossLog,
    Trainer,
    connector_targets,
    new_connector_state,
    train_connector,
)

CHECKPOINT_NAME = "checkpoint.bin"
LOSS_LOG_NAME = "losses.csv"


def _load_config(args) -> Config:
    if getattr(args, "config", None):
        return Config.load(args.config)
    return Config()


def _ids(text: str) -> np.ndarray:
    try:
        return np.array([int(tok) for tok in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise SemcodecError(f"expected space-separated integers, got {text!r}") from exc


def _cmd_make_corpus(args) -> int:
    corpus = make_synthetic_corpus(
        seed=args.seed, n_utterances=args.utterances, n_speakers=args.speakers
    )
    manifest = write_manifest(corpus, args.out)
    print(f"wrote {len(corpus)} utterances to {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = [load_utterance(e) for e in read_manifest(args.data)]
    unpaired = None
    if args.unpaired:
        unpaired = [load_utterance(e) for e in read_manifest(args.unpaired)]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, corpus, unpaired, seed=args.seed)
    with LossLog(out_dir / LOSS_LOG_NAME) as log:
        trainer.run(args.steps, log=log, progress_every=args.progress_every)
    ckpt = out_dir / CHECKPOINT_NAME
    save_train_state(
        ckpt,
        trainer.state,
        extra_meta={"train_reconstruction_mse": trainer.train_reconstruction_mse()},
    )
    print(f"trained {args.steps} steps, checkpoint at {ckpt}")
    return 0


def _cmd_train_connector(args) -> int:
    state, connector, meta = load_train_state(args.ckpt)
    corpus = [load_utterance(e) for e in read_manifest(args.data)]
    if connector is None:
        connector = new_connector_state(state.config, seed=args.seed)
    targets = connector_targets(state.model, corpus)
    losses = train_connector(connector, targets, args.steps, progress_every=args.progress_every)
    out = args.out or args.ckpt
    extra = {k: v for k, v in meta.items() if k == "train_reconstruction_mse"}
    save_train_state(out, state, connector=connector, extra_meta=extra)
    print(f"connector trained {args.steps} steps (final loss {losses[-1]:.5f}), checkpoint at {out}")
    return 0


def _write_mel_outputs(mel, out: str, wav_out: str | None) -> None:
    pipelines.write_mel(out, mel)
    print(f"wrote {mel.n_frames} mel frames to {out}")
    if wav_out:
        write_wav(wav_out, pipelines.mel_to_waveform(mel))
        print(f"wrote rough audio to {wav_out}")


def _cmd_tts(args) -> int:
    pipe = pipelines.load_pipeline(args.ckpt)
    durations = _ids(args.durations) if args.durations else None
    mel = pipelines.tts(
        pipe,
        _ids(args.phonemes),
        prompt=read_wav(args.prompt),
        durations=durations,
        seed=args.seed,
        use_connector=not args.no_connector,
    )
    _write_mel_outputs(mel, args.out, args.render_wav)
    return 0


def _cmd_vc(args) -> int:
    pipe = pipelines.load_pipeline(args.ckpt)
    mel = pipelines.vc(pipe, source=read_wav(args.source), prompt=read_wav(args.prompt))
    _write_mel_outputs(mel, args.out, args.render_wav)
    return 0


def _cmd_asr(args) -> int:
    pipe = pipelines.load_pipeline(args.ckpt)
    ids = pipelines.asr(pipe, read_wav(args.wav))
    text = " ".join(str(int(p)) for p in ids)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _cmd_export(args) -> int:
    pipe = pipelines.load_pipeline(args.ckpt)
    rows = pipelines.export_embeddings(pipe, args.data, args.out)
    print(f"wrote {rows} embedding rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcodec",
        description="Frame-level text/speech transcoding: train once, then TTS, VC and ASR from the same checkpoint.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="synthesize a deterministic toy corpus")
    p.add_argument("--out", required=True, help="output directory for WAVs and manifest.tsv")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--utterances", type=int, default=8)
    p.add_argument("--speakers", type=int, default=2)
    p.set_defaults(func=_cmd_make_corpus)

    p = sub.add_parser("train", help="train transcoder and codebook")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--unpaired", default=None, help="unpaired speech manifest for the consistency loss")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for checkpoint.bin and losses.csv")
    p.add_argument("--progress-every", type=int, default=100)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("train-connector", help="train the denoising connector on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="defaults to rewriting the input checkpoint")
    p.add_argument("--progress-every", type=int, default=200)
    p.set_defaults(func=_cmd_train_connector)

    p = sub.add_parser("tts", help="phonemes + reference voice -> mel frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--phonemes", required=True, help="space-separated phoneme ids")
    p.add_argument("--durations", default=None, help="space-separated frame counts")
    p.add_argument("--prompt", required=True, help="reference WAV for the voice")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-connector", action="store_true", help="feed phoneme embeddings straight to the quantizer")
    p.add_argument("--out", required=True, help="output mel file")
    p.add_argument("--render-wav", default=None, help="also write rough audio here")
    p.set_defaults(func=_cmd_tts)

    p = sub.add_parser("vc", help="re-render source audio in a reference voice")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True, help="output mel file")
    p.add_argument("--render-wav", default=None)
    p.set_defaults(func=_cmd_vc)

    p = sub.add_parser("asr", help="waveform -> phoneme ids")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True, help="input WAV")
    p.add_argument("--out", default=None, help="also write the ids to this file")
    p.set_defaults(func=_cmd_asr)

    p = sub.add_parser("export-embeddings", help="dump frame and voice embeddings to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest of utterances to embed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SemcodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
