# Pin BLAS to one thread before numpy loads: the desk-scale matrices are
# small enough that thread sync costs more than it saves, and single-thread
# keeps timing-sensitive tests stable.
import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import dataclasses
import time

import numpy as np
import pytest

from shapenas import data
from shapenas.presets import desk_backbone, desk_training
from shapenas.supernet import BackboneConfig, Supernet
from shapenas.training import super_pretrain

DESK_SEED = 20240901


def toy_backbone():
    """3 layers, 3 widths: small enough to enumerate all 27 shapes."""
    return BackboneConfig(
        num_layers=3,
        d_model=8,
        d_attn=8,
        d_ff=16,
        heads=2,
        vocab_size=11,
        max_seq_len=12,
        allowed_dims=(2, 4, 8),
    )


@pytest.fixture(scope="session")
def desk_assets(tmp_path_factory):
    """1 MB synthetic corpus, its vocab, and the desk backbone config."""
    root = tmp_path_factory.mktemp("desk")
    corpus_path = root / "corpus.txt"
    vocab_path = root / "vocab.txt"
    data.generate_corpus(str(corpus_path), target_bytes=1_000_000, seed=11)
    tokens = data.build_vocab(str(corpus_path), 2000)
    data.write_vocab(tokens, str(vocab_path))
    vocab = data.Vocab.load(str(vocab_path))
    config = dataclasses.replace(desk_backbone(), vocab_size=len(vocab))
    training = desk_training(seed=DESK_SEED)
    corpus = data.prepare_corpus(
        str(corpus_path), vocab, training.seq_len,
        training.eval_batches * training.batch_size,
    )
    return {
        "corpus_path": str(corpus_path),
        "vocab_path": str(vocab_path),
        "vocab": vocab,
        "config": config,
        "training": training,
        "corpus": corpus,
    }


@pytest.fixture(scope="session")
def small_assets(tmp_path_factory):
    """~120 KB corpus and a short schedule for fast training tests."""
    root = tmp_path_factory.mktemp("small")
    corpus_path = root / "corpus.txt"
    vocab_path = root / "vocab.txt"
    data.generate_corpus(str(corpus_path), target_bytes=120_000, seed=5)
    tokens = data.build_vocab(str(corpus_path), 600)
    data.write_vocab(tokens, str(vocab_path))
    vocab = data.Vocab.load(str(vocab_path))
    config = dataclasses.replace(desk_backbone(), vocab_size=len(vocab))
    training = dataclasses.replace(
        desk_training(seed=9),
        steps=30, warmup_steps=5, eval_interval=15, eval_batches=4,
    )
    corpus = data.prepare_corpus(
        str(corpus_path), vocab, training.seq_len,
        training.eval_batches * training.batch_size,
    )
    return {
        "corpus_path": str(corpus_path),
        "vocab_path": str(vocab_path),
        "vocab": vocab,
        "config": config,
        "training": training,
        "corpus": corpus,
    }


@pytest.fixture(scope="session")
def desk_run(desk_assets):
    """The full desk training run shared by the acceptance criteria."""
    model = Supernet(desk_assets["config"], seed=DESK_SEED)
    start = time.monotonic()
    log = super_pretrain(model, desk_assets["corpus"], desk_assets["training"])
    elapsed = time.monotonic() - start
    return {"model": model, "log": log, "elapsed_s": elapsed, **desk_assets}


@pytest.fixture(scope="session")
def perplexity_dataset(desk_run):
    """500 measured sub-network perplexities of the trained desk model."""
    from shapenas.surrogate import collect_perplexity_dataset
    from shapenas.training import MaskingPolicy

    model = desk_run["model"]
    rows = desk_run["corpus"].eval_rows[:64]
    rng = np.random.default_rng(914)
    return collect_perplexity_dataset(
        model, model.config.design_space, 500, rows, 16, MaskingPolicy(), rng,
    )
