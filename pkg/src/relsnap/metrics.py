from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricReport:
    name: str
    value: float
    n: int
    seed_times: list[int] = field(default_factory=list)


def mae(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("mae of an empty sample is undefined")
    return float(np.mean(np.abs(preds - labels)))


def rocauc(scores, labels) -> float:
    """Mann-Whitney AUC: (wins + 0.5 * ties) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("rocauc needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks give ties half credit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def agreement_rocauc(student, teacher_prob, threshold: float = 0.5) -> float:
    """How well student scores rank the teacher's predicted classes."""
    return rocauc(student, (np.asarray(teacher_prob) >= threshold).astype(int))
