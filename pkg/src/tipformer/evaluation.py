"""Classification metrics, ROC/AUC, repeat aggregation, KNN baseline, exports."""

from __future__ import annotations

import csv
import math
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tipformer.data import InteractionPair, _rows
from tipformer.errors import DataError, TipFormerError, UsageError

METRIC_NAMES = ("acc", "sn", "sp", "pre", "f1", "mcc", "auc")
UNDEFINED = "undefined"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    sn: float | None
    sp: float | None
    pre: float | None
    acc: float | None
    f1: float | None
    mcc: float | None
    auc: float | None = None
    threshold: float = 0.5

    def get(self, name: str) -> float | None:
        return getattr(self, name)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionCounts:
    """Counts with ``score >= threshold`` read as a predicted interaction."""
    if len(scores) != len(labels):
        raise UsageError(f"{len(scores)} scores but {len(labels)} labels")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if y.size and not np.isin(y, (0, 1)).all():
        raise UsageError("labels must be 0 or 1")
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def compute_metrics(counts: ConfusionCounts, threshold: float = 0.5) -> MetricsReport:
    """Sn, Sp, Pre, Acc, F1 and MCC; any zero denominator yields ``None``."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    if counts.total == 0:
        raise UsageError("cannot compute metrics on zero scored pairs")
    sn = _ratio(tp, tp + fn)
    sp = _ratio(tn, tn + fp)
    pre = _ratio(tp, tp + fp)
    acc = (tp + tn) / counts.total
    f1 = None if pre is None or sn is None or pre + sn == 0 else 2 * pre * sn / (pre + sn)
    # standard MCC: the last factor is the sum (TN + FN)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else None
    return MetricsReport(counts, sn, sp, pre, acc, f1, mcc, None, threshold)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def write(self, path: str | Path) -> None:
        rows = ["threshold\tfpr\ttpr\n"]
        rows += [f"{t!r}\t{f!r}\t{r!r}\n" for t, f, r in zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist())]
        Path(path).write_text("".join(rows), encoding="utf-8")


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, RocCurve]:
    """Pairwise AUC (ties count one half) and ROC points at every distinct score."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise UsageError("scores and labels differ in length")
    pos, neg = s[y == 1], np.sort(s[y == 0])
    if pos.size == 0 or neg.size == 0:
        raise UsageError("AUC needs at least one positive and one negative label")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    twice = int(np.sum(2 * below + (upto - below)))
    auc = twice / (2 * pos.size * neg.size)

    thresholds = np.unique(s)[::-1]
    pos_sorted = np.sort(pos)
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    curve = RocCurve(
        np.concatenate([[np.inf], thresholds]),
        np.concatenate([[0.0], fp / neg.size]),
        np.concatenate([[0.0], tp / pos.size]),
    )
    return auc, curve


def evaluate_scores(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> MetricsReport:
    report = compute_metrics(confusion(scores, labels, threshold), threshold)
    if 0 < sum(labels) < len(labels):
        report.auc = roc_auc(scores, labels)[0]
    return report


# ---------------------------------------------------------------- repeats


@dataclass
class RepeatSummary:
    runs: list[MetricsReport]
    mean: dict[str, float | None] = field(default_factory=dict)
    std: dict[str, float | None] = field(default_factory=dict)

    @property
    def n_runs(self) -> int:
        return len(self.runs)


def summarize(runs: Sequence[MetricsReport]) -> RepeatSummary:
    summary = RepeatSummary(list(runs))
    for name in METRIC_NAMES:
        values = [r.get(name) for r in runs]
        if not values or any(v is None for v in values):
            summary.mean[name] = summary.std[name] = None
            continue
        summary.mean[name] = statistics.fmean(values)
        summary.std[name] = statistics.stdev(values) if len(values) > 1 else None
    return summary


def repeat_evaluate(run_fn: Callable[[int], MetricsReport], n_runs: int = 5, seed_base: int = 0) -> RepeatSummary:
    """Run ``run_fn(seed_base + i)`` for each repeat and aggregate (sample std)."""
    if n_runs < 1:
        raise UsageError("n_runs must be >= 1")
    runs = []
    for i in range(n_runs):
        try:
            runs.append(run_fn(seed_base + i))
        except TipFormerError as exc:
            raise type(exc)(f"run {i} (seed {seed_base + i}) failed: {exc}") from exc
        except Exception as exc:
            raise TipFormerError(f"run {i} (seed {seed_base + i}) failed: {exc!r}") from exc
    return summarize(runs)


def _fmt(v: float | None) -> str:
    return UNDEFINED if v is None else f"{v:.6f}"


def write_metrics(summary: RepeatSummary, path: str | Path) -> None:
    """Metrics TSV: one row per run, then mean and std rows."""
    lines = ["run\t" + "\t".join(METRIC_NAMES)]
    for i, r in enumerate(summary.runs):
        lines.append(f"{i}\t" + "\t".join(_fmt(r.get(n)) for n in METRIC_NAMES))
    lines.append("mean\t" + "\t".join(_fmt(summary.mean.get(n)) for n in METRIC_NAMES))
    lines.append("std\t" + "\t".join(_fmt(summary.std.get(n)) for n in METRIC_NAMES))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_summary(summary: RepeatSummary) -> str:
    cells = []
    for n in METRIC_NAMES:
        m, s = summary.mean.get(n), summary.std.get(n)
        cells.append(f"{n}={_fmt(m)}" + (f" ({s:.3f})" if s is not None else ""))
    return " ".join(cells)


# ---------------------------------------------------------------- external test set


@dataclass(frozen=True)
class ExternalTestReport:
    """Known interactions only: how many the model recovers.

    The output columns are ``tp`` (hits) and ``fp``, which here counts known
    interactions scored below the threshold.
    """

    hits: int
    misses: int

    @property
    def precision(self) -> float | None:
        return _ratio(self.hits, self.hits + self.misses)

    def row(self) -> dict[str, str]:
        return {"pre": _fmt(self.precision), "tp": str(self.hits), "fp": str(self.misses)}


def external_test(scores: Sequence[float], threshold: float = 0.5) -> ExternalTestReport:
    s = np.asarray(scores, dtype=np.float64)
    hits = int(np.sum(s >= threshold))
    return ExternalTestReport(hits, int(s.size) - hits)


# ---------------------------------------------------------------- KNN baseline


def knn_baseline(
    train_features: np.ndarray, train_labels: Sequence[int], test_features: np.ndarray, k: int = 5
) -> np.ndarray:
    """Fraction of positives among the k nearest training pairs (Euclidean).

    Equal distances are broken by ascending training index.
    """
    x = np.asarray(train_features, dtype=np.float64)
    q = np.atleast_2d(np.asarray(test_features, dtype=np.float64))
    y = np.asarray(train_labels, dtype=np.float64)
    if not 1 <= k <= len(x):
        raise UsageError(f"k must be between 1 and the training size {len(x)}, got {k}")
    scores = np.empty(len(q))
    for i, row in enumerate(q):
        d2 = np.sum((x - row) ** 2, axis=1)
        nearest = np.argsort(d2, kind="stable")[:k]
        scores[i] = y[nearest].sum() / k
    return scores


# ---------------------------------------------------------------- model scoring / export


def worker_count() -> int:
    raw = os.environ.get("TIPFORMER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"TIPFORMER_THREADS must be an integer, got {raw!r}") from None


def score_pairs(model, pairs: Sequence[InteractionPair], feats, workers: int | None = None) -> list[float]:
    """Eval-mode probabilities in pair order, optionally over a thread pool."""
    inputs = [(feats.toxin(p.toxin_id), feats.protein(p.protein_id)) for p in pairs]
    workers = workers or worker_count()
    if workers == 1 or len(inputs) < 2:
        return [model.predict(t, p) for t, p in inputs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda tp: model.predict(*tp), inputs))


def export_features(model, pairs: Sequence[InteractionPair], feats, path: str | Path) -> int:
    """CSV of the pooled [o1 | o2] vectors that feed the prediction head."""
    width = 2 * model.config.hidden
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["toxin_id", "protein_id", "label", *(f"f{i}" for i in range(width))])
        for pair in pairs:
            _, out = model.predict_pair(feats.toxin(pair.toxin_id), feats.protein(pair.protein_id))
            writer.writerow([pair.toxin_id, pair.protein_id, pair.label, *(repr(float(v)) for v in out.features)])
    return len(pairs)


def read_scores(path: str | Path) -> dict[tuple[str, str], float]:
    scores: dict[tuple[str, str], float] = {}
    for lineno, (t, p, raw) in _rows(path, 3):
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"{path}:{lineno}: score {raw!r} is not a number") from None
        if (t, p) in scores:
            raise DataError(f"{path}:{lineno}: duplicate score for {t}/{p}")
        scores[(t, p)] = value
    return scores
