"""Binary detection metrics with fake (label 1) as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.size == 0:
        raise DataError("empty score list")
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    return scores, labels


def accuracy_at_threshold(scores, labels, thresh: float = 0.5) -> float:
    """Fraction of correct hard decisions; a score equal to ``thresh`` counts as fake."""
    scores, labels = _check(scores, labels)
    return float(np.mean((scores >= thresh).astype(int) == labels))


def average_precision(scores, labels) -> float:
    """``sum_k (R_k - R_{k-1}) P_k`` down the ranking.

    Items are ranked by descending score; ties keep their input order
    (stable sort), so every position is its own operating point.
    """
    scores, labels = _check(scores, labels)
    n_pos = labels.sum()
    if n_pos == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / n_pos)


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_fake > score_real), ties count one half."""
    scores, labels = _check(scores, labels)
    n1 = labels.sum()
    n0 = len(labels) - n1
    if n0 == 0 or n1 == 0:
        raise DataError("AUROC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2) / (n0 * n1))


@dataclass
class MetricsReport:
    acc_at_half: float
    average_precision: float
    auroc: float
    n_real: int
    n_fake: int
    per_generator: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(scores, labels, tags=None) -> MetricsReport:
    """Overall metrics plus, per fake generator tag, metrics on reals + that generator."""
    scores, labels = _check(scores, labels)
    per = {}
    if tags is not None:
        tags = np.asarray(tags)
        real = labels == 0
        for tag in sorted(set(tags[labels == 1].tolist())):
            sel = real | (tags == tag)
            s, y = scores[sel], labels[sel]
            per[tag] = {
                "acc_at_half": accuracy_at_threshold(s, y),
                "average_precision": average_precision(s, y),
                "auroc": auroc(s, y) if real.any() else float("nan"),
                "n_fake": int(y.sum()),
            }
    both = labels.min() == 0 and labels.max() == 1
    return MetricsReport(
        accuracy_at_threshold(scores, labels),
        average_precision(scores, labels) if labels.any() else float("nan"),
        auroc(scores, labels) if both else float("nan"),
        int((labels == 0).sum()), int(labels.sum()), per)
