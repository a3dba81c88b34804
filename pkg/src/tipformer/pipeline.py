"""End-to-end experiment runs: negatives, split, fit, score the test partition."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from tipformer.data import Corpus, DatasetSplit, sample_negatives, split
from tipformer.embeddings import Featurizer
from tipformer.evaluation import MetricsReport, evaluate_scores, knn_baseline, repeat_evaluate, score_pairs
from tipformer.model import ModelConfig, TipFormer
from tipformer.training import FitResult, TrainConfig, fit

METHODS = ("tipformer", "deepcnn", "knn")


@dataclass
class Experiment:
    corpus: Corpus
    feats: Featurizer
    model_config: ModelConfig = field(default_factory=ModelConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    method: str = "tipformer"
    policy: str = "random"
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    neg_ratio: float = 0.0
    knn_k: int = 5

    def make_split(self, seed: int) -> DatasetSplit:
        pairs = list(self.corpus.pairs)
        if self.neg_ratio > 0:
            # fresh negatives per repeat
            pairs += sample_negatives(self.corpus, self.neg_ratio, seed)
        return split(pairs, self.policy, self.fractions, seed)

    def train(self, ds: DatasetSplit, seed: int) -> FitResult:
        cfg = dataclasses.replace(self.model_config, variant=self.method)
        model = TipFormer(cfg, seed=seed)
        return fit(ds, model, dataclasses.replace(self.train_config, seed=seed), self.feats)

    def run(self, seed: int) -> MetricsReport:
        ds = self.make_split(seed)
        labels = [p.label for p in ds.test]
        if self.method == "knn":
            train = ds.train + ds.validation
            x = np.stack([self.feats.pooled_pair(p.toxin_id, p.protein_id) for p in train])
            q = np.stack([self.feats.pooled_pair(p.toxin_id, p.protein_id) for p in ds.test])
            scores = knn_baseline(x, [p.label for p in train], q, self.knn_k).tolist()
        else:
            result = self.train(ds, seed)
            scores = score_pairs(result.model, ds.test, self.feats)
        return evaluate_scores(scores, labels)

    def repeat(self, n_runs: int = 5, seed_base: int = 0):
        return repeat_evaluate(self.run, n_runs, seed_base)
