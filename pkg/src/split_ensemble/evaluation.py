"""OOD detection metrics and synthetic noise datasets.

In-distribution samples are the positive class throughout: a higher score
means "more in-distribution".
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricsReport:
    accuracy: float | None = None
    fpr_at_95tpr: float | None = None
    detection_error_at_95tpr: float | None = None
    auroc: float | None = None
    aupr: float | None = None

    def to_dict(self, percent: bool = False) -> dict:
        d = asdict(self)
        if percent:
            d = {k: None if v is None else 100.0 * v for k, v in d.items()}
        return d


def _scores(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def threshold_at_tpr(id_scores, tpr: float = 0.95) -> float:
    """Largest threshold that keeps at least ``tpr`` of ID scores at or above it."""
    s = np.sort(_scores(id_scores, "id_scores"))[::-1]
    if not 0.0 < tpr <= 1.0:
        raise ValueError(f"tpr must lie in (0, 1], got {tpr}")
    k = max(1, math.ceil(tpr * s.size - 1e-9))
    return float(s[k - 1])


def detection_error(fpr: float, tpr: float) -> float:
    """Equal-prior misclassification rate at an operating point."""
    return 0.5 * (1.0 - tpr) + 0.5 * fpr


def fpr_detection_error(id_scores, ood_scores, tpr: float = 0.95) -> tuple[float, float]:
    ids = _scores(id_scores, "id_scores")
    oods = _scores(ood_scores, "ood_scores")
    t = threshold_at_tpr(ids, tpr)
    fpr = float(np.mean(oods >= t))
    achieved = float(np.mean(ids >= t))
    return fpr, detection_error(fpr, achieved)


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney U statistic; tied pairs count one half."""
    ids = _scores(id_scores, "id_scores")
    oods = _scores(ood_scores, "ood_scores")
    ranks = rankdata(np.concatenate([ids, oods]))
    n1, n2 = ids.size, oods.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def aupr(id_scores, ood_scores, positive: str = "id") -> float:
    """Average precision: sum over thresholds of recall increments times precision."""
    ids = _scores(id_scores, "id_scores")
    oods = _scores(ood_scores, "ood_scores")
    if positive == "ood":
        ids, oods = -oods, -ids
    elif positive != "id":
        raise ValueError("positive must be 'id' or 'ood'")
    scores = np.concatenate([ids, oods])
    labels = np.concatenate([np.ones(ids.size), np.zeros(oods.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    # one operating point per distinct threshold
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(labels)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / ids.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def ood_metrics(id_scores, ood_scores, tpr: float = 0.95, accuracy=None) -> MetricsReport:
    fpr, det = fpr_detection_error(id_scores, ood_scores, tpr)
    return MetricsReport(accuracy, fpr, det, auroc(id_scores, ood_scores),
                         aupr(id_scores, ood_scores))


def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    out = {}
    for key in MetricsReport.__dataclass_fields__:
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return MetricsReport(**out)


def gen_noise_ood(kind: str, shape, count: int, seed: int = 0, mean: float = 0.5,
                  std: float = 0.25) -> np.ndarray:
    """``count`` noise images of ``shape`` (C, H, W), float32 in [0, 1]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    size = (count, *tuple(shape))
    if kind == "gaussian":
        x = np.clip(rng.normal(mean, std, size), 0.0, 1.0)
    elif kind == "uniform":
        x = rng.uniform(0.0, 1.0, size)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return x.astype(np.float32)
