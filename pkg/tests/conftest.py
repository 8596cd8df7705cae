import dataclasses

import numpy as np
import pytest

from micar.config import load_run_config, packaged_config
from micar.data import SyntheticSpec, build_vocab, generate_synthetic, load_dataset, read_captions


def tiny_model_cfg(**kw):
    """The minimal preset's model section with overrides."""
    cfg = load_run_config(packaged_config("minimal"), env={}).model
    return dataclasses.replace(cfg, **kw)


@pytest.fixture
def tiny_cfg():
    return tiny_model_cfg()


@pytest.fixture(scope="session")
def overfit_dir(tmp_path_factory):
    return generate_synthetic(SyntheticSpec(32, 7), 8, tmp_path_factory.mktemp("overfit"))


@pytest.fixture(scope="session")
def overfit_data(overfit_dir):
    """All 8 pairs with a vocabulary that keeps every caption word."""
    texts = [r["text"] for r in read_captions(overfit_dir / "captions.jsonl")]
    return load_dataset(overfit_dir, build_vocab(texts, min_freq=1), max_len=16)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    return generate_synthetic(SyntheticSpec(32, 3), 60, tmp_path_factory.mktemp("corpus"))


def random_batch(cfg, batch=2, length=6, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(batch, cfg.in_channels, 32, 32))
    ids = np.concatenate([np.ones((batch, 1), dtype=np.int64), rng.integers(4, cfg.vocab_size, size=(batch, length)),
                          np.full((batch, 1), 2)], axis=1)
    return images, ids
