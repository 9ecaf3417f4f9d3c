import numpy as np
import pytest
from hypothesis import settings

import sani.corpus as C
import sani.model as M

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


TINY_GEN = dict(n_docs=40, words_per_doc=120, n_direct=6, n_indirect=4, n_conf=5, repetition_law=1.2, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small generated corpus with vocab, tokenized docs, and blacklists."""
    docs, blacklists = C.generate_synthetic_corpus(C.GenConfig(**TINY_GEN))
    vocab = C.build_vocab(docs)
    docs = C.tokenize_documents(docs, vocab)
    split = C.split_corpus(docs, 0.1)
    bl = {cat.lower(): C.blacklist_from_lines(lines, vocab, split.train) for cat, lines in blacklists.items()}
    bl["identifiers"] = C.Blacklist.merge(bl["direct"], bl["indirect"])
    return dict(docs=docs, vocab=vocab, split=split, blacklists=bl, raw_blacklists=blacklists)


@pytest.fixture(scope="session")
def toy_mlm_params():
    cfg = M.ModelConfig(variant="mlm", n_layers=1, n_heads=2, d_model=16, d_ff=32, max_seq=12, vocab_size=23, seed=3)
    return M.init(cfg)


@pytest.fixture(scope="session")
def toy_clm_params():
    cfg = M.ModelConfig(variant="clm", n_layers=1, n_heads=2, d_model=16, d_ff=32, max_seq=12, vocab_size=23, seed=4)
    return M.init(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
