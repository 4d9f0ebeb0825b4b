import numpy as np
import pytest

from attendgan import data as D
from attendgan import generator as gen
from attendgan.diffcore import precision


@pytest.fixture(scope="session")
def small_corpus():
    plan = D.CorpusPlan({"factual": {"train": 12, "val": 3, "test": 3},
                         "positive": {"train": 8, "val": 2, "test": 2}})
    return D.synth_corpus(plan, D.SynthConfig(), D.default_lexicon(), seed=3)


@pytest.fixture(scope="session")
def vocab(small_corpus):
    return D.build_vocab(small_corpus.all_tokens())


@pytest.fixture(scope="session")
def encoded(small_corpus, vocab):
    return D.encode_pairs(small_corpus.pairs(style="factual", split="train"), vocab, 16)


@pytest.fixture
def tiny_gen():
    """Small float32 generator over a 7-word vocabulary, 3 regions of dim 4."""
    cfg = gen.GeneratorConfig(vocab_size=7, feature_dim=4, embed_dim=5, hidden=6, attn_dim=3)
    return gen.init_generator(cfg, seed=11)


def make_gen64(seed=0, V=7, D_=4, K=3):
    with precision(np.float64):
        cfg = gen.GeneratorConfig(vocab_size=V, feature_dim=D_, embed_dim=5, hidden=6, attn_dim=3)
        params = gen.init_generator(cfg, seed=seed)
    feats = np.random.default_rng(seed).normal(size=(2, K, D_))
    return params, feats
