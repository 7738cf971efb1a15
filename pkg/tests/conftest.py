import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from semcodec.config import Config
from semcodec.features import make_synthetic_corpus

CORPUS_SEED = 7
UNPAIRED_SEED = 99
TRAIN_SEED = 1234
TRAIN_STEPS = 3000
CONNECTOR_SEED = 5
CONNECTOR_STEPS = 4000


@pytest.fixture(scope="session")
def tiny_cfg() -> Config:
    """Small widths for fast structural tests; still the full architecture."""
    return Config(
        vocab_size=10,
        embed_dim=16,
        hidden_dim=16,
        phoneme_embed_dim=8,
        prompt_dim=16,
        prompt_channels=8,
        attention_heads=2,
        ffn_dim=32,
        speech_encoder_layers=1,
        phoneme_encoder_layers=1,
        speech_decoder_layers=1,
        phoneme_decoder_layers=1,
        speech_decoder_convs=1,
        codebook_size=8,
        connector_channels=16,
        connector_layers=2,
        connector_cond_layers=1,
        connector_step_dim=16,
    )


@pytest.fixture(scope="session")
def corpus8():
    return make_synthetic_corpus(CORPUS_SEED, 8, 2)


@pytest.fixture(scope="session")
def unpaired8():
    return make_synthetic_corpus(UNPAIRED_SEED, 8, 2)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, corpus8, unpaired8):
    """One desk-scale training run shared by every test that needs a
    trained model: the retrieval, recognition, conversion and synthesis
    bars are all judged against this run plus its connector.

    Returns a dict with the trainer, loss records, the connector state,
    and the path of a checkpoint holding both.
    """
    from semcodec.checkpoint import save_train_state
    from semcodec.training import (
        LossLog,
        Trainer,
        connector_targets,
        new_connector_state,
        train_connector,
    )

    import time

    out_dir = tmp_path_factory.mktemp("trained")
    cfg = Config()
    trainer = Trainer(cfg, corpus8, unpaired8, seed=TRAIN_SEED)
    log_path = out_dir / "losses.csv"
    t0 = time.time()
    with LossLog(log_path) as log:
        records = trainer.run(TRAIN_STEPS, log=log)
    train_seconds = time.time() - t0

    cstate = new_connector_state(cfg, seed=CONNECTOR_SEED)
    targets = connector_targets(trainer.state.model, corpus8)
    connector_losses = train_connector(cstate, targets, CONNECTOR_STEPS)

    ckpt_path = out_dir / "checkpoint.bin"
    save_train_state(
        ckpt_path,
        trainer.state,
        connector=cstate,
        extra_meta={"train_reconstruction_mse": trainer.train_reconstruction_mse()},
    )
    return {
        "config": cfg,
        "trainer": trainer,
        "records": records,
        "train_seconds": train_seconds,
        "connector": cstate,
        "connector_losses": connector_losses,
        "checkpoint": ckpt_path,
        "loss_log": log_path,
        "out_dir": out_dir,
    }


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, corpus8):
    """The training corpus written out as WAVs + manifest, for CLI tests."""
    from semcodec.features import write_manifest

    d = tmp_path_factory.mktemp("corpus")
    manifest = write_manifest(corpus8, d)
    return {"dir": d, "manifest": manifest}
