import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bandnet import features
from bandnet.synthcorpus import CorpusSpec, synth_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A small but non-trivial corpus shared by trainer/eval/cli tests."""
    root = tmp_path_factory.mktemp("smallcorpus")
    spec = CorpusSpec(
        n_train_utts=40,
        n_test_wb=6,
        n_test_nb=6,
        utt_seconds=(0.8, 1.4),
        seed=11,
    )
    paths = synth_corpus(spec, root)
    return {"spec": spec, "dir": root, **paths}


@pytest.fixture(scope="session")
def small_features(small_corpus):
    train = features.featurize_manifest(small_corpus["train"], features.SCENARIO_NATIVE)
    test = features.featurize_manifest(small_corpus["test"], features.SCENARIO_NATIVE)
    return {"train": train, "test": test}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
