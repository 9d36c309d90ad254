"""Shared fixtures: one 400-video toy corpus and a cache of pretraining runs."""

import numpy as np
import pytest

from tgmae.config import load_run_config
from tgmae.synthgen import generate_dataset
from tgmae.trainer import pretrain

CORPUS_SIZE = 400
CORPUS_SEED = 11
N_TRAIN = 320
# frozen desk-scale recipe for the representation checks
RECIPE = ["epochs=30", "base_lr=0.016", "batch_size=32", "mask.gamma=0.75"]


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    return generate_dataset(tmp_path_factory.mktemp("toy400"), CORPUS_SIZE, seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def toy_split(toy_corpus):
    idx = np.arange(len(toy_corpus))
    return toy_corpus.subset(idx[:N_TRAIN]), toy_corpus.subset(idx[N_TRAIN:])


class PretrainCache:
    def __init__(self, train):
        self.train = train
        self.runs = {}

    def get(self, algorithm: str, contrastive: bool, seed: int):
        key = (algorithm, contrastive, seed)
        if key not in self.runs:
            run = load_run_config(None, RECIPE + [f"mask.algorithm={algorithm}",
                                                  f"contrastive={contrastive}", f"seed={seed}"])
            self.runs[key] = pretrain(self.train, run)
        return self.runs[key]


@pytest.fixture(scope="session")
def pretrained(toy_split):
    return PretrainCache(toy_split[0])
