import numpy as np
import pytest

from tipformer.data import Corpus, InteractionPair, ProteinTarget, Toxin
from tipformer.embeddings import Featurizer, protein_fallback, toxin_fallback
from tipformer.model import ModelConfig, TipFormer
from tipformer.toy import make_toy_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corpus_files(tmp_path):
    """Two toxins, two proteins, three pairs."""
    (tmp_path / "toxins.tsv").write_text("# id\tsmiles\nT1\tCCO\nT2\tc1ccccc1N\n")
    (tmp_path / "proteins.tsv").write_text("P1\tMKVLA\n\nP2\tMBWCCA\n")
    (tmp_path / "pairs.tsv").write_text("T1\tP1\t1\nT1\tP2\t0\nT2\tP2\t1\n")
    return tmp_path / "toxins.tsv", tmp_path / "proteins.tsv", tmp_path / "pairs.tsv"


@pytest.fixture
def grid_corpus():
    """Five toxins A..E and four proteins, every combination labeled."""
    toxins = {t: Toxin(t, "CCO") for t in "ABCDE"}
    proteins = {f"P{j}": ProteinTarget(f"P{j}", "MKV") for j in range(4)}
    pairs = tuple(InteractionPair(t, p, (i + j) % 2) for i, t in enumerate(toxins) for j, p in enumerate(proteins))
    return Corpus(toxins, proteins, pairs)


@pytest.fixture(scope="session")
def small_toy():
    return make_toy_corpus(n_toxins=16, n_proteins=16, n_pairs=48, seed=3)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(hidden=16, heads=4, fallback_dim=16)


@pytest.fixture
def small_model(small_config):
    return TipFormer(small_config, seed=5)


@pytest.fixture(scope="session")
def toy_feats(small_toy):
    return Featurizer(small_toy, toxin_fallback(16), protein_fallback(16))
